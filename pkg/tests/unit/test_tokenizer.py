"""Unit tests for patch, tube and audio tokenization and time embeddings."""

import numpy as np
import pytest

from src.lib.errors import ConfigError, ContractError, DimensionError
from src.lib.tensor import Parameter, Tensor
from src.models.types import Expert, ModelConfig, SpectrogramBatch, TokenSequence, Variant, VideoBatch
from src.services.model import build
from src.services.tokenizer import (
    assign_time_embeddings,
    audio_time_groups,
    extract_audio_patches,
    frame_intervals,
    patchify_frames,
    time_interval_embed,
    time_rows,
    tokenize_audio,
    tokenize_spatial,
    tokenize_temporal,
    tubify,
    unpatchify_frames,
    untubify,
)


def _toy_inputs(batch: int = 2):
    rng = np.random.default_rng(0)
    video = VideoBatch(rng.random((batch, 4, 16, 16, 3)).astype(np.float32))
    audio = SpectrogramBatch(rng.random((batch, 32, 32)).astype(np.float32), duration_s=0.5)
    return video, audio


def test_patchify_is_invertible():
    """Test that unpatchify restores the frames exactly."""
    frames = np.random.default_rng(1).random((2, 3, 16, 24, 3))
    patches = patchify_frames(frames, 8)
    assert patches.shape == (6, 6, 192)
    np.testing.assert_array_equal(unpatchify_frames(patches, 2, (2, 3), 8), frames)


def test_patchify_uses_row_major_grid_order():
    """Test that patch n covers grid cell (n // gw, n % gw)."""
    frames = np.random.default_rng(2).random((1, 1, 16, 24, 1))
    patches = patchify_frames(frames, 8)
    np.testing.assert_array_equal(patches[0, 4], frames[0, 0, 8:16, 8:16, 0].ravel())


def test_tubes_pair_consecutive_frames():
    """Test that tube t holds frames 2t then 2t+1."""
    video = np.broadcast_to(np.arange(4.0)[None, :, None, None, None], (1, 4, 16, 16, 3)).copy()
    tubes = tubify(video, 8)
    assert tubes.shape == (1, 8, 384)
    second_tube = tubes[0, 4]
    np.testing.assert_array_equal(second_tube[:192], 2.0)
    np.testing.assert_array_equal(second_tube[192:], 3.0)
    np.testing.assert_array_equal(untubify(tubes, (2, 2), 8), video)


def test_audio_patches_overlap_with_stride():
    """Test overlapping audio windows and their (time, freq) ordering."""
    spec = np.random.default_rng(3).random((1, 32, 32))
    patches, grid = extract_audio_patches(spec, 16, 10)
    assert grid == (2, 2)
    assert patches.shape == (1, 4, 256)
    np.testing.assert_array_equal(patches[0, 2], spec[0, 10:26, 0:16].ravel())
    np.testing.assert_array_equal(patches[0, 1], spec[0, 0:16, 10:26].ravel())


def test_audio_patches_reject_small_spectrogram():
    """Test that a spectrogram smaller than one patch raises ConfigError."""
    with pytest.raises(ConfigError, match="smaller than one"):
        extract_audio_patches(np.zeros((1, 15, 32)), 16, 10)


def test_toy_token_shapes():
    """Test token shapes of all three paths of a toy CA2ST model."""
    model = build(ModelConfig.from_preset("toy", variant=Variant.CA2ST))
    seqs = model.tokenize(*_toy_inputs(batch=2))
    assert seqs[Expert.SPATIAL].tokens.shape == (4, 5, 32)
    assert seqs[Expert.TEMPORAL].tokens.shape == (2, 8, 32)
    assert seqs[Expert.AUDIO].tokens.shape == (2, 5, 32)
    assert seqs[Expert.AUDIO].grid == (2, 2)


def test_tokenize_requires_audio_for_audio_path():
    """Test that a missing spectrogram is a contract error."""
    model = build(ModelConfig.from_preset("toy", variant=Variant.CAVA))
    video, _ = _toy_inputs()
    with pytest.raises(ContractError, match="spectrogram"):
        model.tokenize(video, None)


def test_frame_intervals_follow_sampled_frame_rate():
    """Test that sampled frames are spaced at half the source rate."""
    intervals = frame_intervals(4, 8.0)
    assert [(iv.start_s, iv.end_s) for iv in intervals] == [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)]


def test_audio_time_groups_are_contiguous():
    """Test that audio time positions split into near-equal contiguous groups."""
    np.testing.assert_array_equal(audio_time_groups(5, 2), [0, 0, 0, 1, 1])
    np.testing.assert_array_equal(audio_time_groups(4, 4), [0, 1, 2, 3])
    with pytest.raises(ContractError):
        audio_time_groups(4, 0)


def test_more_time_groups_than_audio_positions_is_rejected():
    """Test that no time group may be left without audio positions."""
    with pytest.raises(DimensionError, match="3 time embeddings for only 2"):
        audio_time_groups(2, 3)
    audio = TokenSequence(Tensor(np.zeros((1, 5, 4))), Expert.AUDIO, 1, 2, 4, True, (2, 2))
    with pytest.raises(DimensionError):
        assign_time_embeddings(audio, Tensor(np.zeros((3, 4))), Parameter("cls", Tensor(np.zeros(4))))


def test_time_rows_map_class_tokens_to_the_extra_row():
    """Test the time-embedding row of every token for each layout."""
    model = build(ModelConfig.from_preset("toy", variant=Variant.CA2ST))
    seqs = model.tokenize(*_toy_inputs(batch=1))
    np.testing.assert_array_equal(time_rows(seqs[Expert.AUDIO], 2), [2, 0, 0, 1, 1])
    np.testing.assert_array_equal(time_rows(seqs[Expert.SPATIAL], 2), [2, 0, 0, 0, 0, 2, 1, 1, 1, 1])
    np.testing.assert_array_equal(time_rows(seqs[Expert.TEMPORAL], 2), [0, 0, 0, 0, 1, 1, 1, 1])


def test_class_tokens_need_a_time_row():
    """Test that class tokens without a learned row raise ContractError."""
    model = build(ModelConfig.from_preset("toy", variant=Variant.CA2ST))
    seqs = model.tokenize(*_toy_inputs(batch=1))
    embeds = Tensor(np.zeros((2, 8), dtype=np.float32))
    with pytest.raises(ContractError, match="time-embedding row"):
        assign_time_embeddings(seqs[Expert.SPATIAL], embeds)
    assert assign_time_embeddings(seqs[Expert.TEMPORAL], embeds).shape == (8, 8)


def _embed_arrays(model, path: Expert):
    e = model.embeds[path]
    return e.proj.w.value.data, e.proj.b.value.data, e.pos.value.data, None if e.cls is None else e.cls.value.data


def test_spatial_tokens_are_projected_patches_with_embeddings():
    """Test class token, projection and positional table of the spatial tokenizer."""
    model = build(ModelConfig.from_preset("toy"), dtype=np.float64)
    video = VideoBatch(np.random.default_rng(1).random((1, 4, 16, 16, 3)))
    e = model.embeds[Expert.SPATIAL]
    seq = tokenize_spatial(video, 8, e.proj, e.pos, e.cls)
    w, b, pos, cls = _embed_arrays(model, Expert.SPATIAL)

    patches = patchify_frames(video.data[:, ::2], 8)
    np.testing.assert_allclose(seq.tokens.data[:, 0], np.broadcast_to(cls + pos[0], (2, 32)))
    np.testing.assert_allclose(seq.tokens.data[:, 1:], patches @ w + b + pos[1:])
    assert (seq.batch, seq.frames, seq.patches, seq.has_cls) == (1, 2, 4, True)


def test_temporal_tokens_cover_frame_pairs():
    """Test that temporal tokens project whole tubes and carry no class token."""
    model = build(ModelConfig.from_preset("toy"), dtype=np.float64)
    video = VideoBatch(np.random.default_rng(2).random((2, 4, 16, 16, 3)))
    e = model.embeds[Expert.TEMPORAL]
    seq = tokenize_temporal(video, 8, e.proj, e.pos)
    w, b, pos, _ = _embed_arrays(model, Expert.TEMPORAL)

    np.testing.assert_allclose(seq.tokens.data, tubify(video.data, 8) @ w + b + pos)
    assert not seq.has_cls
    with pytest.raises(ConfigError, match="not divisible"):
        tokenize_temporal(video, 6, e.proj, e.pos)


def test_audio_tokens_are_overlapping_patches_with_embeddings():
    """Test the audio tokenizer against explicitly extracted patches."""
    model = build(ModelConfig.from_preset("toy", variant=Variant.CAVA), dtype=np.float64)
    spectrogram = SpectrogramBatch(np.random.default_rng(3).random((2, 32, 32)), duration_s=0.5)
    e = model.embeds[Expert.AUDIO]
    seq = tokenize_audio(spectrogram, e.proj, e.pos, e.cls, patch=16, stride=10)
    w, b, pos, cls = _embed_arrays(model, Expert.AUDIO)

    patches, grid = extract_audio_patches(spectrogram.data, 16, 10)
    assert grid == (2, 2)
    np.testing.assert_allclose(seq.tokens.data[:, 0], np.broadcast_to(cls + pos[0], (2, 32)))
    np.testing.assert_allclose(seq.tokens.data[:, 1:], patches @ w + b + pos[1:])
    assert seq.frames == 2


def test_time_interval_embedding():
    """Test output shape, equal rows for equal intervals and the empty-input error."""
    model = build(ModelConfig.from_preset("toy", variant=Variant.CA2ST), dtype=np.float64)
    intervals = frame_intervals(2, 8.0)
    embeds = time_interval_embed(intervals + intervals[:1], model.time_mlp)
    assert embeds.shape == (3, 8)
    np.testing.assert_array_equal(embeds.data[0], embeds.data[2])
    assert not np.array_equal(embeds.data[0], embeds.data[1])
    with pytest.raises(ContractError, match="at least one interval"):
        time_interval_embed([], model.time_mlp)
