"""Unit tests for data models and configuration types."""

from datetime import datetime, timedelta

import numpy as np
import pytest

from src.lib.errors import ConfigError, ContractError
from src.lib.tensor import Tensor
from src.models.types import (
    AttentionDump,
    CorruptionKind,
    CorruptionType,
    CropPolicy,
    Direction,
    EmbedKind,
    Expert,
    KeyLayout,
    ModelConfig,
    StepRecord,
    SynthSpec,
    TimeInterval,
    TokenSequence,
    TrainJob,
    Variant,
    VideoBatch,
    ViewSpec,
    WindowShape,
    audio_patch_count,
)


def test_direction_names_and_mirror():
    """Test direction naming, parsing and mirroring."""
    d = Direction.parse("t2s")
    assert d.key == Expert.TEMPORAL
    assert d.query == Expert.SPATIAL
    assert d.name == "T2S"
    assert d.mirror.name == "S2T"
    assert Direction.parse("S2A").involves_audio


def test_direction_rejects_bad_names():
    """Test malformed direction names and self-directions."""
    with pytest.raises(ConfigError):
        Direction.parse("S2S")
    with pytest.raises(ConfigError):
        Direction.parse("SXT")


def test_audio_patch_count():
    """Test overlapping window counts."""
    assert audio_patch_count(32, 16, 10) == 2
    assert audio_patch_count(64, 16, 10) == 5
    assert audio_patch_count(1024, 16, 10) == 101
    assert audio_patch_count(15, 16, 10) == 0


def test_video_batch_needs_even_frames():
    """Test that an odd frame count is rejected."""
    with pytest.raises(ContractError, match="even"):
        VideoBatch(np.zeros((1, 3, 8, 8, 3)))


def test_time_interval_validation():
    """Test that empty or negative intervals are rejected."""
    TimeInterval(0.0, 0.25)
    with pytest.raises(ContractError):
        TimeInterval(0.5, 0.5)
    with pytest.raises(ContractError):
        TimeInterval(-1.0, 0.5)


def test_token_index_marks_class_tokens():
    """Test (frame, patch) indices of a spatial sequence with class tokens."""
    seq = TokenSequence(
        tokens=Tensor(np.zeros((2, 5, 4))),
        layout=Expert.SPATIAL,
        batch=1,
        frames=2,
        patches=4,
        has_cls=True,
        grid=(2, 2),
    )
    frame, patch = seq.token_index()
    np.testing.assert_array_equal(frame, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    np.testing.assert_array_equal(patch, [-1, 0, 1, 2, 3, -1, 0, 1, 2, 3])
    assert seq.tokens_per_video == 10


def test_token_sequence_rejects_wrong_extents():
    """Test that token extents must match the declared layout."""
    with pytest.raises(ContractError, match="leading extents"):
        TokenSequence(
            tokens=Tensor(np.zeros((1, 7, 4))),
            layout=Expert.TEMPORAL,
            batch=1,
            frames=2,
            patches=4,
            has_cls=False,
            grid=(2, 2),
        )


def test_model_config_defaults_and_presets():
    """Test the desk default and the toy preset geometry."""
    desk = ModelConfig()
    assert desk.variant == Variant.CAST
    assert desk.grid == (4, 4)
    toy = ModelConfig.from_preset("toy", variant=Variant.CA2ST)
    assert (toy.depth, toy.embed_dim, toy.bca_dim, toy.num_classes) == (2, 32, 8, 2)
    assert toy.audio_grid == (2, 2)
    assert toy.tokens_per_video(Expert.SPATIAL) == 10
    assert toy.tokens_per_video(Expert.TEMPORAL) == 8
    assert toy.tokens_per_video(Expert.AUDIO) == 5


def test_model_config_unknown_preset():
    """Test that an unknown preset raises ConfigError."""
    with pytest.raises(ConfigError, match="unknown preset"):
        ModelConfig.from_preset("huge")


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"frames": 7}, "even"),
        ({"image_height": 30}, "divisible"),
        ({"embed_dim": 30, "heads": 4}, "divisible"),
        ({"adapter_dim": 64}, "adapter_dim"),
        ({"bca_dim": 64}, "bca_dim"),
        ({"variant": Variant.CAVA, "windows": (("A2S", WindowShape.TIME),)}, "space-time"),
        ({"disabled_directions": ("A2S",)}, "not part of CAST"),
        ({"head_paths": (Expert.SPATIAL,)}, "exchange is off"),
    ],
)
def test_model_config_validation(overrides, message):
    """Test configuration errors name the offending setting."""
    with pytest.raises(ConfigError, match=message):
        ModelConfig(**overrides)


def test_variant_topology():
    """Test paths, pairs and direction order for each variant."""
    cast = ModelConfig()
    assert cast.paths == (Expert.SPATIAL, Expert.TEMPORAL)
    assert [d.name for d in cast.directions] == ["T2S", "S2T"]

    cava = ModelConfig(variant=Variant.CAVA)
    assert cava.paths == (Expert.SPATIAL, Expert.AUDIO)
    assert [d.name for d in cava.directions] == ["A2S", "S2A"]
    assert cava.embed_kind_for((Expert.SPATIAL, Expert.AUDIO)) == EmbedKind.TIME
    assert cava.uses_time_embedding

    cava_t = ModelConfig(variant=Variant.CAVA, cava_visual=Expert.TEMPORAL)
    assert cava_t.paths == (Expert.TEMPORAL, Expert.AUDIO)

    ca2st = ModelConfig(variant=Variant.CA2ST)
    assert [d.name for d in ca2st.directions] == ["T2S", "S2T", "A2S", "S2A", "A2T", "T2A"]


def test_default_windows():
    """Test the default window of each direction."""
    config = ModelConfig(variant=Variant.CA2ST)
    assert config.window_for(Direction.parse("T2S")) == WindowShape.TIME
    assert config.window_for(Direction.parse("S2T")) == WindowShape.SPACE
    assert config.window_for(Direction.parse("S2A")) == WindowShape.SPACE_TIME
    override = config.with_overrides(windows=(("T2S", WindowShape.SPACE_TIME),))
    assert override.window_for(Direction.parse("T2S")) == WindowShape.SPACE_TIME


def test_exchange_ablations():
    """Test that exchange off removes directions and head_paths selects paths."""
    off = ModelConfig(variant=Variant.CA2ST, exchange=False, head_paths=(Expert.AUDIO,))
    assert off.directions == ()
    assert off.paths == (Expert.AUDIO,)
    one_way = ModelConfig(disabled_directions=("S2T",))
    assert [d.name for d in one_way.directions] == ["T2S"]
    assert one_way.pairs == ((Expert.SPATIAL, Expert.TEMPORAL),)


def test_view_spec_parse():
    """Test TxS parsing and the default crop policy."""
    views = ViewSpec.parse("2x3")
    assert (views.temporal_views, views.spatial_crops) == (2, 3)
    assert views.crop_policy == CropPolicy.THREE_CROP
    assert ViewSpec.parse("1x1").crop_policy == CropPolicy.CENTER
    with pytest.raises(ConfigError):
        ViewSpec.parse("three")
    with pytest.raises(ConfigError):
        ViewSpec.parse("0x1")


def test_corruption_kind_parse():
    """Test corruption parsing and range checks."""
    assert CorruptionKind.parse("misalignment:1.5").shift_s == 1.5
    assert CorruptionKind.parse("dropout").rate == 0.2
    assert CorruptionKind.parse("pink:0.3").sigma == 0.3
    assert CorruptionKind.parse("gaussian:0.1").kind == CorruptionType.GAUSSIAN
    with pytest.raises(ConfigError):
        CorruptionKind.parse("misalignment:3")
    with pytest.raises(ConfigError):
        CorruptionKind.parse("reverb:0.1")


def test_synth_spec_validation():
    """Test infeasible synthetic specs."""
    assert SynthSpec(num_classes=2, samples_per_class=4).total == 8
    with pytest.raises(ConfigError, match="divisible"):
        SynthSpec(num_classes=2, samples_per_class=3)
    with pytest.raises(ConfigError, match="mel bins"):
        SynthSpec(num_classes=4, mel_bins=6)


def test_key_layout_array_form():
    """Test the numeric form stored in attention dumps."""
    layout = KeyLayout(Expert.SPATIAL, 2, 5, 2, 2, True)
    assert KeyLayout.from_array(Expert.SPATIAL, layout.as_array()) == layout


def test_attention_dump_validation():
    """Test dump layer range and missing-entry lookup."""
    with pytest.raises(ContractError, match="layer"):
        AttentionDump("s", weights={(0, "S2A"): np.ones((1, 1, 1))})
    dump = AttentionDump("s", weights={(2, "S2A"): np.ones((1, 1, 1))})
    assert dump.depth == 2
    with pytest.raises(KeyError):
        dump.get(1, "S2A")


def test_train_job_tracks_steps():
    """Test TrainJob counters, duration and log-line format."""
    start = datetime(2024, 1, 1)
    job = TrainJob(start_time=start)
    job.add_step(StepRecord(step=1, epoch=0, lr=0.001, loss=0.5, top1=0.25))
    job.add_step(StepRecord(step=2, epoch=1, lr=0.0005, loss=0.25, top1=0.5))
    job.end_time = start + timedelta(seconds=2)
    assert job.steps == 2
    assert job.epochs == 2
    assert job.final_loss == 0.25
    assert job.duration_ms == 2000
    assert job.history[0].as_line() == "1\t0\t0.001\t0.500000\t0.2500"
