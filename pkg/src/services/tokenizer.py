"""Tokenizers for the spatial, temporal and audio paths, and time-interval embeddings."""

import logging

import numpy as np
from einops import rearrange

from src.lib.errors import ConfigError, ContractError, DimensionError
from src.lib.tensor import Parameter, Tensor, broadcast_to, concat, gelu, reshape, take
from src.models.params import LinearParams, TimeIntervalMLP
from src.models.types import (
    Expert,
    SpectrogramBatch,
    TimeInterval,
    TokenSequence,
    VideoBatch,
    audio_patch_count,
)

logger = logging.getLogger(__name__)


def _check_divisible(video: VideoBatch, patch_size: int) -> tuple[int, int]:
    if patch_size <= 0 or video.height % patch_size or video.width % patch_size:
        raise ConfigError(f"frame {video.height}x{video.width} is not divisible by patch size {patch_size}")
    return video.height // patch_size, video.width // patch_size


def patchify_frames(frames: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, F, H, W, C] -> [B*F, N, p*p*C] with patches in row-major grid order."""
    return rearrange(frames, "b f (gh p1) (gw p2) c -> (b f) (gh gw) (p1 p2 c)", p1=patch_size, p2=patch_size)


def unpatchify_frames(patches: np.ndarray, batch: int, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """Inverse of :func:`patchify_frames`."""
    return rearrange(
        patches,
        "(b f) (gh gw) (p1 p2 c) -> b f (gh p1) (gw p2) c",
        b=batch,
        gh=grid[0],
        gw=grid[1],
        p1=patch_size,
        p2=patch_size,
    )


def tubify(video: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, 2T, H, W, C] -> [B, T*N, 2*p*p*C]; tube f covers frames 2f and 2f+1."""
    return rearrange(
        video, "b (t two) (gh p1) (gw p2) c -> b (t gh gw) (two p1 p2 c)", two=2, p1=patch_size, p2=patch_size
    )


def untubify(tubes: np.ndarray, grid: tuple[int, int], patch_size: int) -> np.ndarray:
    """Inverse of :func:`tubify`."""
    return rearrange(
        tubes,
        "b (t gh gw) (two p1 p2 c) -> b (t two) (gh p1) (gw p2) c",
        gh=grid[0],
        gw=grid[1],
        two=2,
        p1=patch_size,
        p2=patch_size,
    )


def audio_patch_starts(extent: int, patch: int = 16, stride: int = 10) -> np.ndarray:
    """Window starts k*stride with k*stride + patch <= extent."""
    return np.arange(audio_patch_count(extent, patch, stride)) * stride


def extract_audio_patches(spectrogram: np.ndarray, patch: int = 16, stride: int = 10) -> tuple[np.ndarray, tuple]:
    """
    Cut overlapping square patches from ``[B, T_spec, mel_bins]``.

    Returns:
        Tuple of (patches [B, M, patch*patch] frequency-major within each time position, grid (time, freq))

    Raises:
        ConfigError: If the spectrogram is smaller than one patch or the stride is out of range
    """
    if not 1 <= stride <= patch:
        raise ConfigError(f"audio stride must be in [1, {patch}], got {stride}")
    _, spec_frames, mel_bins = spectrogram.shape
    if spec_frames < patch or mel_bins < patch:
        raise ConfigError(f"spectrogram {spec_frames}x{mel_bins} is smaller than one {patch}x{patch} patch")
    offsets = np.arange(patch)
    rows = audio_patch_starts(spec_frames, patch, stride)[:, None] + offsets
    cols = audio_patch_starts(mel_bins, patch, stride)[:, None] + offsets
    windows = spectrogram[:, rows[:, None, :, None], cols[None, :, None, :]]
    patches = rearrange(windows, "b t f ph pw -> b (t f) (ph pw)")
    return patches, (rows.shape[0], cols.shape[0])


def _with_cls(x: Tensor, cls: Parameter) -> Tensor:
    rows, _, dim = x.shape
    if cls.shape != (dim,):
        raise DimensionError(f"class token {cls.shape} does not match embed dim {dim}")
    cls_rows = broadcast_to(reshape(cls.value, (1, 1, dim)), (rows, 1, dim))
    return concat([cls_rows, x], axis=1)


def _add_pos(x: Tensor, pos: Parameter) -> Tensor:
    if pos.shape != x.shape[1:]:
        raise DimensionError(f"positional table {pos.shape} does not match tokens {x.shape[1:]}")
    return x + pos.value


def tokenize_spatial(
    video: VideoBatch, patch_size: int, proj: LinearParams, pos: Parameter, cls: Parameter
) -> TokenSequence:
    """
    Tokenize every even frame into p x p patches with one class token per frame.

    Returns:
        Spatial TokenSequence with tokens [B*T, N+1, D]

    Raises:
        ConfigError: If H or W is not divisible by ``patch_size``
    """
    grid = _check_divisible(video, patch_size)
    frames = video.data[:, ::2]
    dtype = proj.w.value.dtype
    x = proj(Tensor(patchify_frames(frames, patch_size).astype(dtype)))
    tokens = _add_pos(_with_cls(x, cls), pos)
    return TokenSequence(
        tokens=tokens,
        layout=Expert.SPATIAL,
        batch=video.batch,
        frames=frames.shape[1],
        patches=grid[0] * grid[1],
        has_cls=True,
        grid=grid,
    )


def tokenize_temporal(video: VideoBatch, patch_size: int, proj: LinearParams, pos: Parameter) -> TokenSequence:
    """
    Tokenize frame pairs (2f, 2f+1) into 2 x p x p tubes; no class token.

    Returns:
        Temporal TokenSequence with tokens [B, T*N, D]
    """
    grid = _check_divisible(video, patch_size)
    dtype = proj.w.value.dtype
    x = proj(Tensor(tubify(video.data, patch_size).astype(dtype)))
    tokens = _add_pos(x, pos)
    return TokenSequence(
        tokens=tokens,
        layout=Expert.TEMPORAL,
        batch=video.batch,
        frames=video.frames // 2,
        patches=grid[0] * grid[1],
        has_cls=False,
        grid=grid,
    )


def tokenize_audio(
    spectrogram: SpectrogramBatch,
    proj: LinearParams,
    pos: Parameter,
    cls: Parameter,
    patch: int = 16,
    stride: int = 10,
) -> TokenSequence:
    """
    Tokenize a spectrogram into overlapping patch x patch windows with one class token.

    Returns:
        Audio TokenSequence with tokens [B, M+1, D]; ``frames`` holds the time positions
    """
    patches, grid = extract_audio_patches(spectrogram.data, patch, stride)
    dtype = proj.w.value.dtype
    x = proj(Tensor(patches.astype(dtype)))
    tokens = _add_pos(_with_cls(x, cls), pos)
    return TokenSequence(
        tokens=tokens,
        layout=Expert.AUDIO,
        batch=spectrogram.batch,
        frames=grid[0],
        patches=grid[0] * grid[1],
        has_cls=True,
        grid=grid,
    )


# Time-interval embeddings


def frame_intervals(frames: int, frame_rate: float) -> list[TimeInterval]:
    """Intervals of the ``frames`` sampled frames; every other source frame is kept, so fps = rate / 2."""
    fps = frame_rate / 2.0
    return [TimeInterval(i / fps, (i + 1) / fps) for i in range(frames)]


def time_interval_embed(intervals: list[TimeInterval], mlp: TimeIntervalMLP) -> Tensor:
    """Embed (start_s, end_s) pairs; returns [len(intervals), bottleneck dim]."""
    if not intervals:
        raise ContractError("time_interval_embed needs at least one interval")
    stamps = np.array([[iv.start_s, iv.end_s] for iv in intervals], dtype=mlp.fc1.w.value.dtype)
    return mlp.fc2(gelu(mlp.fc1(Tensor(stamps))))


def audio_time_groups(time_positions: int, groups: int) -> np.ndarray:
    """
    Group id of every audio time position: ``groups`` contiguous runs whose sizes differ by at most one.

    Raises:
        ContractError: If ``groups`` is not positive
        DimensionError: If there are more groups than time positions
    """
    if groups <= 0:
        raise ContractError(f"group count must be positive, got {groups}")
    if groups > time_positions:
        raise DimensionError(f"{groups} time embeddings for only {time_positions} audio time positions")
    runs = np.array_split(np.arange(time_positions), groups)
    return np.concatenate([np.full(len(run), g, dtype=np.intp) for g, run in enumerate(runs)])


def time_rows(seq: TokenSequence, groups: int) -> np.ndarray:
    """
    Row of the (embeds + class row) table used by every token of one video.

    Class tokens map to row ``groups``.
    """
    if seq.layout == Expert.AUDIO:
        time_pos, freq = seq.grid
        patch_rows = np.repeat(audio_time_groups(time_pos, groups), freq)
        return np.concatenate([[groups], patch_rows]) if seq.has_cls else patch_rows
    if seq.frames != groups:
        raise ContractError(f"{seq.layout.value} sequence has {seq.frames} frames but {groups} time embeddings")
    frame, _ = seq.token_index()
    if seq.layout == Expert.SPATIAL and seq.has_cls:
        frame = np.where(np.arange(len(frame)) % seq.tokens_per_row == 0, groups, frame)
    return frame


def assign_time_embeddings(seq: TokenSequence, embeds: Tensor, cls_row: Parameter | None = None) -> Tensor:
    """
    Per-token time-embedding matrix [tokens_per_video, d] for one video of ``seq``.

    Spatial and temporal tokens of frame i use row i; audio patches use the row of
    their time group; class tokens use ``cls_row``.

    Raises:
        ContractError: On a group-count mismatch or a class token without a class row
    """
    groups, dim = embeds.shape
    rows = time_rows(seq, groups)
    table = embeds
    if seq.has_cls:
        if cls_row is None:
            raise ContractError(f"{seq.layout.value} class tokens need a learned time-embedding row")
        table = concat([embeds, reshape(cls_row.value, (1, dim))], axis=0)
    return take(table, rows)
