"""Synthetic audio-visual classification sets and audio corruptions.

Each sample pairs a visual factor (a square moving along one of K motion templates)
with an audio factor (a rhythmic tone in one of K disjoint mel bands). The label
depends on the visual factor, the audio factor, or both (xor-coupled), so multimodal
synergy can be measured on a laptop.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from src.lib.config import worker_threads
from src.lib.errors import ContractError
from src.lib.io_utils import ensure_output_directory, read_clip, read_index, write_clip, write_index
from src.lib.rng import child_seed, stream
from src.models.types import (
    Coupling,
    CorruptionKind,
    CorruptionType,
    Sample,
    SpectrogramBatch,
    SynthSpec,
    VideoBatch,
)

logger = logging.getLogger(__name__)

INDEX_NAME = "index.tsv"
CLIP_SUFFIX = ".xavc"


def factor_pairs(spec: SynthSpec) -> list[tuple[int, int, int]]:
    """
    (label, visual factor, audio factor) of every sample, class-major.

    Sample j of class c gets:
        visual-only:  v = c,          a = j mod K
        audio-only:   v = j mod K,    a = c
        xor-coupled:  v = j mod K,    a = (c - v) mod K
    """
    k = spec.num_classes
    rows = []
    for c in range(k):
        for j in range(spec.samples_per_class):
            if spec.coupling == Coupling.VISUAL_ONLY:
                v, a = c, j % k
            elif spec.coupling == Coupling.AUDIO_ONLY:
                v, a = j % k, c
            else:
                v = j % k
                a = (c - v) % k
            rows.append((c, v, a))
    return rows


def motion_clip(spec: SynthSpec, template: int, rng: np.random.Generator) -> np.ndarray:
    """Clip [2T, H, W, C] of a square moving along motion template ``template``."""
    frames, height, width = spec.frames, spec.height, spec.width
    size = max(2, min(height, width) // 4)
    angle = 2.0 * math.pi * template / spec.num_classes
    speed = max(1.0, min(height, width) / (2.0 * frames))
    jitter = rng.integers(-1, 2, size=2)
    y0 = (height - size) / 2.0 - math.sin(angle) * (height - size) / 4.0 + jitter[0]
    x0 = (width - size) / 2.0 - math.cos(angle) * (width - size) / 4.0 + jitter[1]

    color = np.full(spec.channels, 0.3)
    color[template % spec.channels] = 1.0
    clip = np.zeros((frames, height, width, spec.channels))
    for f in range(frames):
        y = int(round(y0 + math.sin(angle) * speed * f)) % (height - size + 1)
        x = int(round(x0 + math.cos(angle) * speed * f)) % (width - size + 1)
        clip[f, y : y + size, x : x + size, :] = color
    return clip


def tone_spectrogram(spec: SynthSpec, template: int, rng: np.random.Generator) -> np.ndarray:
    """Spectrogram [T_spec, mel_bins] with an on/off tone in band ``template``."""
    band = spec.mel_bins // spec.num_classes
    period = 2 + template
    phase = int(rng.integers(0, 2 * period))
    on = ((np.arange(spec.spec_frames) + phase) // period) % 2 == 0
    out = np.full((spec.spec_frames, spec.mel_bins), 0.1)
    out[:, template * band : (template + 1) * band] = np.where(on, 0.9, 0.3)[:, None]
    return out


def _make_sample(spec: SynthSpec, index: int, label: int, visual: int, audio: int) -> Sample:
    sample_id = f"c{label}_{index:05d}"
    rng = stream(child_seed(spec.seed, f"sample/{index}"), "synth")
    clip = motion_clip(spec, visual, rng)
    spectrogram = tone_spectrogram(spec, audio, rng)
    if spec.noise:
        clip = clip + spec.noise * rng.standard_normal(clip.shape)
        spectrogram = spectrogram + spec.noise * rng.standard_normal(spectrogram.shape)
    clip = np.clip(clip, 0.0, 1.0).astype(np.float32)
    spectrogram = np.clip(spectrogram, 0.0, 1.0).astype(np.float32)
    return Sample(
        sample_id=sample_id,
        video=VideoBatch(clip[None], spec.frame_rate),
        audio=SpectrogramBatch(spectrogram[None], spec.duration_s),
        label=label,
    )


def generate(spec: SynthSpec, threads: int | None = None) -> list[Sample]:
    """
    Generate the samples of ``spec`` in class-major order.

    Every sample draws from its own seed derived from its index, so the result does not
    depend on the number of worker threads.

    Args:
        spec: Dataset recipe
        threads: Worker cap; defaults to XAVT_THREADS

    Returns:
        List of samples
    """
    rows = factor_pairs(spec)
    threads = min(threads or worker_threads(), len(rows))
    logger.info(f"Generating {len(rows)} {spec.coupling.value} samples with {threads} thread(s)")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda item: _make_sample(spec, item[0], *item[1]), enumerate(rows)))


def write_dataset(samples: list[Sample], out_dir: str | Path) -> Path:
    """Write one XAVC file per sample plus ``index.tsv``; returns the index path."""
    out = ensure_output_directory(out_dir)
    rows = []
    for sample in samples:
        name = f"{sample.sample_id}{CLIP_SUFFIX}"
        write_clip(out / name, sample.video.data[0], sample.audio.data[0], sample.label)
        rows.append((name, sample.label))
    index = write_index(out / INDEX_NAME, rows)
    logger.info(f"Wrote {len(rows)} samples to {out}")
    return index


def load_dataset(index: str | Path, frame_rate: float = 8.0) -> list[Sample]:
    """
    Load every sample listed in an index file.

    Raises:
        ContractError: If the index is malformed or a label disagrees with its file
    """
    samples = []
    for path, label in read_index(index):
        video, spectrogram, stored = read_clip(path)
        if stored != label:
            raise ContractError(f"{path}: index label {label} differs from stored label {stored}")
        samples.append(
            Sample(
                sample_id=path.stem,
                video=VideoBatch(video[None], frame_rate),
                audio=SpectrogramBatch(spectrogram[None], video.shape[0] / frame_rate),
                label=label,
            )
        )
    logger.debug(f"Loaded {len(samples)} samples from {index}")
    return samples


# Corruptions


def pink_noise(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise with amplitude ∝ 1/√f over the last two (time, frequency) axes."""
    white = rng.standard_normal(shape)
    ft = np.fft.fftfreq(shape[-2])[:, None]
    ff = np.fft.fftfreq(shape[-1])[None, :]
    radius = np.sqrt(ft**2 + ff**2)
    radius[0, 0] = np.inf
    shaped = np.fft.ifft2(np.fft.fft2(white, axes=(-2, -1)) / np.sqrt(radius), axes=(-2, -1)).real
    std = shaped.std()
    return shaped / std if std > 0 else shaped


def corrupt(audio: SpectrogramBatch, kind: CorruptionKind, seed: int) -> SpectrogramBatch:
    """
    Corrupted copy of ``audio``; zero strength returns the input values unchanged.

    misalignment: circular shift of the time axis by shift_s * T_spec / duration frames
    dropout:      zero round(rate * T_spec) random time frames per sample
    gaussian:     add sigma * N(0, 1)
    pink:         add sigma * pink noise
    """
    data = audio.data
    rng = stream(seed, f"corrupt/{kind.kind.value}")
    if kind.kind == CorruptionType.MISALIGNMENT:
        shift = int(round(kind.shift_s * audio.time_frames / audio.duration_s))
        out = np.roll(data, shift, axis=1)
    elif kind.kind == CorruptionType.DROPOUT:
        out = data.copy()
        count = int(round(kind.rate * audio.time_frames))
        for b in range(audio.batch):
            out[b, rng.choice(audio.time_frames, size=count, replace=False), :] = 0.0
    elif kind.kind == CorruptionType.GAUSSIAN:
        out = (data + kind.sigma * rng.standard_normal(data.shape)).astype(data.dtype)
    else:
        out = (data + kind.sigma * pink_noise(data.shape, rng)).astype(data.dtype)
    return SpectrogramBatch(out, audio.duration_s)
