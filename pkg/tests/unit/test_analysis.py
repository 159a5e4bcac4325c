"""Unit tests for attention capture, entropy ratios and attention-map export."""

import math

import numpy as np
import pytest

from src.lib.errors import ContractError
from src.lib.io_utils import read_pgm
from src.models.types import AttentionDump, Expert, KeyLayout, ModelConfig, SynthSpec, Variant
from src.services.analysis import (
    capture_attention,
    entropy_curve,
    entropy_ratio,
    export_attention_map,
    key_grid,
    load_dump,
    row_entropy_ratio,
    save_dump,
    write_curve,
)
from src.services.model import build, randomize_zero_inits
from src.services.synthdata import generate

SPATIAL_KEYS = KeyLayout(Expert.SPATIAL, frames=2, tokens_per_row=5, grid_h=2, grid_w=2, has_cls=True)
AUDIO_KEYS = KeyLayout(Expert.AUDIO, frames=2, tokens_per_row=5, grid_h=2, grid_w=2, has_cls=True)


def _samples(count: int = 2):
    spec = SynthSpec(samples_per_class=2, frames=4, height=16, width=16, spec_frames=32, mel_bins=32, seed=4)
    return generate(spec, threads=1)[:count]


def _ca2st():
    model = build(ModelConfig.from_preset("toy", variant=Variant.CA2ST))
    randomize_zero_inits(model, seed=2, scale=0.5)
    return model


# Entropy


def test_entropy_ratio_extremes():
    """Test uniform, one-hot and a hand-computed two-key row."""
    assert row_entropy_ratio(np.full((3, 4), 0.25)) == pytest.approx(1.0)
    assert row_entropy_ratio(np.eye(4)) == 0.0
    expected = -(1 / 3 * math.log(1 / 3) + 2 / 3 * math.log(2 / 3)) / math.log(2)
    assert row_entropy_ratio(np.array([[1 / 3, 2 / 3]])) == pytest.approx(expected)
    assert expected == pytest.approx(0.9183, abs=1e-4)
    assert row_entropy_ratio(np.ones((2, 1))) == 1.0


def test_entropy_ratio_ignores_key_order():
    """Test that permuting keys leaves the ratio unchanged."""
    rows = np.random.default_rng(0).dirichlet(np.ones(6), size=(2, 3))
    permuted = rows[..., np.random.default_rng(1).permutation(6)]
    assert row_entropy_ratio(permuted) == pytest.approx(row_entropy_ratio(rows))


def test_entropy_ratio_missing_entry():
    """Test that an absent (layer, direction) is a KeyError."""
    dump = AttentionDump("s", weights={(1, "S2A"): np.full((1, 2, 2), 0.5)})
    assert entropy_ratio(dump, 1, "S2A") == pytest.approx(1.0)
    with pytest.raises(KeyError):
        entropy_ratio(dump, 2, "S2A")


def test_capture_records_every_layer_and_direction():
    """Test dump keys and weight shapes for a toy three-expert model."""
    model = _ca2st()
    dump = capture_attention(model, _samples(1)[0])
    assert dump.depth == 2
    assert len(dump.weights) == 12
    assert dump.get(1, "S2A").shape == (2, 5, 10)
    assert dump.get(2, "T2S").shape == (2, 10, 8)
    np.testing.assert_allclose(dump.get(1, "A2T").sum(axis=-1), 1.0, rtol=1e-5)
    assert dump.layouts[Expert.SPATIAL] == SPATIAL_KEYS


def test_entropy_curve_is_deterministic_and_bounded():
    """Test curve length, range and repeatability."""
    model = _ca2st()
    samples = _samples()
    curve = entropy_curve(model, samples, "s2a")
    assert len(curve) == 2
    assert all(0.0 <= v <= 1.0 for v in curve)
    assert entropy_curve(model, samples, "S2A") == curve


def test_sharper_queries_lower_only_their_layer():
    """Test that scaling one layer's queries lowers that layer's entropy and no other."""
    model = _ca2st()
    samples = _samples()
    before = entropy_curve(model, samples, "S2A")
    w_q = model.parameters["audio.block2.bca.S2A.w_q"]
    w_q.assign(w_q.value.data * 10.0)
    after = entropy_curve(model, samples, "S2A")
    assert after[0] == before[0]
    assert after[1] < before[1]


def test_entropy_curve_rejects_absent_direction():
    """Test that a direction the model lacks is a contract error."""
    model = build(ModelConfig.from_preset("toy"))
    with pytest.raises(ContractError, match="no S2A"):
        entropy_curve(model, _samples(), "S2A")
    with pytest.raises(ContractError, match="at least one"):
        entropy_curve(model, [], "T2S")


def test_capture_needs_exchange():
    """Test that a model without exchange has nothing to capture."""
    model = build(ModelConfig.from_preset("toy", exchange=False))
    with pytest.raises(ContractError, match="exchange disabled"):
        capture_attention(model, _samples(1)[0])


def test_write_curve(tmp_path):
    """Test the layer/ratio table format."""
    path = write_curve([0.5, 0.25], tmp_path / "curve.tsv")
    assert path.read_text() == "layer\tratio\n1\t0.500000\n2\t0.250000\n"


# Dumps and maps


def test_dump_round_trip(tmp_path):
    """Test saving and loading an attention dump."""
    dump = capture_attention(_ca2st(), _samples(1)[0])
    loaded = load_dump(save_dump(dump, tmp_path / f"{dump.sample_id}.xava"))
    assert loaded.sample_id == dump.sample_id
    assert set(loaded.weights) == set(dump.weights)
    np.testing.assert_array_equal(loaded.get(2, "S2A"), dump.get(2, "S2A"))
    assert loaded.layouts == dump.layouts


def test_key_grid_drops_class_tokens():
    """Test the [frames, grid_h, grid_w] arrangement of spatial keys."""
    weights = np.arange(10.0)
    grid = key_grid(weights, SPATIAL_KEYS)
    np.testing.assert_array_equal(grid[0], [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(grid[1], [[6.0, 7.0], [8.0, 9.0]])
    with pytest.raises(ContractError, match="audio keys"):
        key_grid(np.ones(5), AUDIO_KEYS)


def test_export_uniform_attention_is_flat_white(tmp_path):
    """Test that uniform attention normalises to a flat maximum."""
    dump = AttentionDump("s", weights={(1, "S2T"): np.full((2, 8, 10), 0.1)}, layouts={Expert.SPATIAL: SPATIAL_KEYS})
    grids = export_attention_map(dump, 1, "S2T", tmp_path)
    np.testing.assert_allclose(grids, 1.0)
    for frame in range(2):
        np.testing.assert_array_equal(read_pgm(tmp_path / f"S2T_layer1_frame{frame}.pgm"), 255)


def test_export_one_hot_attention(tmp_path):
    """Test that a one-hot key lights exactly one cell of one frame."""
    weights = np.zeros((1, 8, 10))
    weights[0, 3, 8] = 1.0
    dump = AttentionDump("s", weights={(2, "S2T"): weights}, layouts={Expert.SPATIAL: SPATIAL_KEYS})
    grids = export_attention_map(dump, 2, "S2T", tmp_path, query=3, png=True)
    assert grids[1, 1, 0] == 1.0
    assert grids.sum() == 1.0
    assert read_pgm(tmp_path / "S2T_layer2_frame1.pgm")[1, 0] == 255
    assert not read_pgm(tmp_path / "S2T_layer2_frame0.pgm").any()

    table = (tmp_path / "S2T_layer2.tsv").read_text()
    assert table.split("\n\n")[1].splitlines()[1] == "1.000000\t0.000000"
    assert (tmp_path / "S2T_layer2.png").stat().st_size > 0


def test_export_rejects_bad_requests(tmp_path):
    """Test audio keys, missing layouts and out-of-range queries."""
    weights = {(1, "A2S"): np.full((1, 10, 5), 0.2), (1, "S2T"): np.full((1, 8, 10), 0.1)}
    dump = AttentionDump("s", weights=weights, layouts={Expert.AUDIO: AUDIO_KEYS})
    with pytest.raises(ContractError, match="audio keys"):
        export_attention_map(dump, 1, "A2S", tmp_path)
    with pytest.raises(ContractError, match="no layout"):
        export_attention_map(dump, 1, "S2T", tmp_path)
    dump.layouts[Expert.SPATIAL] = SPATIAL_KEYS
    with pytest.raises(ContractError, match="query 8"):
        export_attention_map(dump, 1, "S2T", tmp_path, query=8)
