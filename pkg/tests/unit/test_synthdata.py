"""Unit tests for synthetic dataset generation, dataset files and audio corruptions."""

from collections import Counter

import numpy as np
import pytest

from src.lib.errors import ContractError
from src.models.types import Coupling, CorruptionKind, CorruptionType, SpectrogramBatch, SynthSpec
from src.services.synthdata import (
    INDEX_NAME,
    corrupt,
    factor_pairs,
    generate,
    load_dataset,
    pink_noise,
    write_dataset,
)


def _spec(**overrides) -> SynthSpec:
    options = dict(samples_per_class=4, frames=4, height=16, width=16, spec_frames=32, mel_bins=32, seed=1)
    options.update(overrides)
    return SynthSpec(**options)


def test_generation_is_deterministic():
    """Test that the same spec reproduces every sample exactly."""
    first, second = generate(_spec()), generate(_spec())
    for a, b in zip(first, second, strict=True):
        assert a.sample_id == b.sample_id and a.label == b.label
        np.testing.assert_array_equal(a.video.data, b.video.data)
        np.testing.assert_array_equal(a.audio.data, b.audio.data)


def test_generation_does_not_depend_on_thread_count():
    """Test that one worker and four workers produce identical samples."""
    serial, parallel = generate(_spec(), threads=1), generate(_spec(), threads=4)
    for a, b in zip(serial, parallel, strict=True):
        np.testing.assert_array_equal(a.video.data, b.video.data)
        np.testing.assert_array_equal(a.audio.data, b.audio.data)


def test_seed_changes_samples():
    """Test that a different seed gives different clips."""
    a, b = generate(_spec(seed=1))[0], generate(_spec(seed=2))[0]
    assert not np.array_equal(a.video.data, b.video.data)


def test_samples_are_balanced_and_in_range():
    """Test class balance, dtype, shapes and value range."""
    samples = generate(_spec())
    assert Counter(s.label for s in samples) == {0: 4, 1: 4}
    for s in samples:
        assert s.video.data.shape == (1, 4, 16, 16, 3)
        assert s.audio.data.shape == (1, 32, 32)
        assert s.video.data.dtype == np.float32
        assert 0.0 <= s.video.data.min() and s.video.data.max() <= 1.0
        assert 0.0 <= s.audio.data.min() and s.audio.data.max() <= 1.0
    assert samples[5].sample_id == "c1_00005"


def test_xor_factors_are_uninformative_alone():
    """Test that each factor alone is uniform given the label under xor coupling."""
    rows = factor_pairs(_spec(num_classes=4, samples_per_class=8))
    for label in range(4):
        visual = Counter(v for c, v, _ in rows if c == label)
        audio = Counter(a for c, _, a in rows if c == label)
        assert visual == {v: 2 for v in range(4)}
        assert audio == {a: 2 for a in range(4)}
    assert all((v + a) % 4 == c for c, v, a in rows)


def test_single_modality_couplings():
    """Test that visual-only and audio-only labels follow one factor."""
    visual = factor_pairs(_spec(coupling=Coupling.VISUAL_ONLY, samples_per_class=3))
    assert all(v == c for c, v, _ in visual)
    audio = factor_pairs(_spec(coupling=Coupling.AUDIO_ONLY, samples_per_class=3))
    assert all(a == c for c, _, a in audio)


def test_factors_are_visible_in_the_signals():
    """Test that the noise-free clip color and tone band encode the two factors."""
    spec = _spec(noise=0.0)
    for (_, v, a), sample in zip(factor_pairs(spec), generate(spec), strict=True):
        channel_peaks = sample.video.data[0].max(axis=(0, 1, 2))
        assert int(np.argmax(channel_peaks)) == v
        band_means = sample.audio.data[0].mean(axis=0).reshape(2, 16).mean(axis=1)
        assert int(np.argmax(band_means)) == a


def test_dataset_files_round_trip(tmp_path):
    """Test writing, loading and rewriting a dataset."""
    samples = generate(_spec())
    index = write_dataset(samples, tmp_path / "a")
    assert index.name == INDEX_NAME
    loaded = load_dataset(index)
    assert [s.sample_id for s in loaded] == [s.sample_id for s in samples]
    assert [s.label for s in loaded] == [s.label for s in samples]
    np.testing.assert_array_equal(loaded[3].video.data, samples[3].video.data)
    assert loaded[0].audio.duration_s == pytest.approx(0.5)

    write_dataset(loaded, tmp_path / "b")
    for name in ("index.tsv", "c0_00000.xavc", "c1_00007.xavc"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_index_label_must_match_file(tmp_path):
    """Test that a label disagreeing with its clip file is rejected."""
    index = write_dataset(generate(_spec(samples_per_class=2)), tmp_path)
    index.write_text(index.read_text().replace("c0_00000.xavc\t0", "c0_00000.xavc\t1"))
    with pytest.raises(ContractError, match="differs"):
        load_dataset(index)


# Corruptions


def _audio(batch: int = 2, frames: int = 32) -> SpectrogramBatch:
    data = np.random.default_rng(0).uniform(0.2, 1.0, size=(batch, frames, 16)).astype(np.float32)
    return SpectrogramBatch(data, duration_s=1.0)


def test_misalignment_rolls_time_axis():
    """Test the circular shift in spectrogram frames."""
    audio = _audio()
    out = corrupt(audio, CorruptionKind(CorruptionType.MISALIGNMENT, shift_s=0.25), seed=0)
    np.testing.assert_array_equal(out.data, np.roll(audio.data, 8, axis=1))
    back = corrupt(audio, CorruptionKind(CorruptionType.MISALIGNMENT, shift_s=-0.25), seed=0)
    np.testing.assert_array_equal(back.data, np.roll(audio.data, -8, axis=1))


def test_dropout_zeroes_whole_frames():
    """Test the number of zeroed frames per sample."""
    audio = _audio()
    out = corrupt(audio, CorruptionKind(CorruptionType.DROPOUT, rate=0.25), seed=3).data
    zero_frames = (out == 0.0).all(axis=2).sum(axis=1)
    np.testing.assert_array_equal(zero_frames, [8, 8])
    kept = ~(out == 0.0).all(axis=2)
    np.testing.assert_array_equal(out[kept], audio.data[kept])
    assert not np.any(corrupt(audio, CorruptionKind(CorruptionType.DROPOUT, rate=1.0), seed=3).data)


def test_zero_strength_is_identity():
    """Test that zero-strength corruptions return the input values."""
    audio = _audio()
    for kind in (
        CorruptionKind(CorruptionType.MISALIGNMENT, shift_s=0.0),
        CorruptionKind(CorruptionType.DROPOUT, rate=0.0),
        CorruptionKind(CorruptionType.GAUSSIAN, sigma=0.0),
        CorruptionKind(CorruptionType.PINK, sigma=0.0),
    ):
        np.testing.assert_array_equal(corrupt(audio, kind, seed=0).data, audio.data)


def test_gaussian_noise_level():
    """Test the added noise variance."""
    audio = SpectrogramBatch(np.zeros((4, 64, 64), dtype=np.float32))
    out = corrupt(audio, CorruptionKind(CorruptionType.GAUSSIAN, sigma=0.1), seed=0).data
    assert out.dtype == np.float32
    assert out.var() == pytest.approx(0.01, rel=0.1)
    again = corrupt(audio, CorruptionKind(CorruptionType.GAUSSIAN, sigma=0.1), seed=0).data
    np.testing.assert_array_equal(out, again)


def test_pink_noise_level_and_spectrum():
    """Test the pink-noise standard deviation and its low-frequency emphasis."""
    audio = SpectrogramBatch(np.zeros((8, 64, 64), dtype=np.float32))
    out = corrupt(audio, CorruptionKind(CorruptionType.PINK, sigma=0.1), seed=0).data
    assert out.std() == pytest.approx(0.1, rel=1e-4)

    noise = pink_noise((8, 64, 64), np.random.default_rng(0))
    power = np.abs(np.fft.fft2(noise, axes=(-2, -1))) ** 2
    assert power[:, 0, 0].max() < 1e-12
    assert power[:, 1, 0].mean() > 5 * power[:, 32, 32].mean()
