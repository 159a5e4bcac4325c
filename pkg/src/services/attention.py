"""Expert sub-blocks: windowed multi-head attention, adapters, and the two residual blocks.

    Y  = X + ADAP(M) + M,            M = MHSA(LN(X))
    X' = B + FFN(LN(B)) + ADAP(LN(B))
"""

import logging
import math
from collections.abc import Callable

import numpy as np

from src.lib.errors import ContractError, DimensionError
from src.lib.tensor import (
    LAYER_NORM_EPS,
    Tensor,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax_lastdim,
    transpose,
)
from src.models.params import AdapterParams, AttentionParams, FeedForwardParams, LayerNormParams
from src.models.types import Expert, TokenSequence, WindowShape

logger = logging.getLogger(__name__)

Residual = Callable[[Tensor, int], Tensor]


class DropPath:
    """Stochastic depth: zero a residual branch per sample with probability ``rate``, rescale survivors.

    A sample owns ``rows_per_sample`` consecutive leading rows (the frames of a spatial sequence);
    they are kept or dropped together.
    """

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"drop-path rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, branch: Tensor, rows_per_sample: int = 1) -> Tensor:
        if self.rate == 0.0:
            return branch
        if rows_per_sample <= 0 or branch.shape[0] % rows_per_sample:
            raise ContractError(f"{branch.shape[0]} rows do not split into samples of {rows_per_sample}")
        keep = np.repeat(self.rng.random(branch.shape[0] // rows_per_sample) >= self.rate, rows_per_sample)
        scale = (keep / (1.0 - self.rate)).astype(branch.dtype)
        return branch * Tensor(scale.reshape((-1,) + (1,) * (branch.ndim - 1)))


def _identity(branch: Tensor, rows_per_sample: int = 1) -> Tensor:
    return branch


def apply_layer_norm(x: Tensor, ln: LayerNormParams, eps: float = LAYER_NORM_EPS) -> Tensor:
    return layer_norm(x, ln.gamma.value, ln.beta.value, eps)


# Heads and masks


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[R, L, d] -> [R, heads, L, d/heads]."""
    rows, length, dim = x.shape
    return transpose(reshape(x, (rows, length, heads, dim // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[R, heads, L, dh] -> [R, L, heads*dh]."""
    rows, heads, length, head_dim = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (rows, length, heads * head_dim))


def per_video(seq: TokenSequence) -> Tensor:
    """Tokens of each video flattened into one sequence: [B, tokens_per_video, dim]."""
    return reshape(seq.tokens, (seq.batch, seq.tokens_per_video, seq.dim))


def from_per_video(seq: TokenSequence, x: Tensor) -> Tensor:
    """Inverse of :func:`per_video` for a tensor of any last extent."""
    return reshape(x, (seq.rows, seq.tokens_per_row, x.shape[-1]))


def window_mask(q_seq: TokenSequence, k_seq: TokenSequence, window: WindowShape) -> np.ndarray | None:
    """
    Admissible (query, key) pairs over the per-video flattened sequences.

    Time windows match patch indices; space windows match frame indices. An index of -1
    (class token) matches everything on that axis. Space-time admits every pair.

    Raises:
        ContractError: If a space or time window involves tokens without a (frame, patch) index
    """
    if window == WindowShape.SPACE_TIME:
        return None
    if Expert.AUDIO in (q_seq.layout, k_seq.layout):
        raise ContractError(f"{window.value} window needs (frame, patch) indices; audio tokens only allow space-time")
    if q_seq.frames != k_seq.frames or q_seq.grid != k_seq.grid:
        raise ContractError(
            f"index systems differ: {q_seq.frames} frames on grid {q_seq.grid} vs "
            f"{k_seq.frames} frames on grid {k_seq.grid}"
        )
    q_frame, q_patch = q_seq.token_index()
    k_frame, k_patch = k_seq.token_index()
    a, b = (q_patch, k_patch) if window == WindowShape.TIME else (q_frame, k_frame)
    return (a[:, None] == b[None, :]) | (a[:, None] < 0) | (b[None, :] < 0)


def attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    mask: np.ndarray | None = None,
    capture: list[np.ndarray] | None = None,
) -> Tensor:
    """
    Scaled dot-product attention over [R, L, d] operands, split into ``heads``.

    Args:
        q: Queries [R, Lq, d]
        k: Keys [R, Lk, d]
        v: Values [R, Lk, d]
        heads: Number of heads; must divide d
        mask: Optional boolean [Lq, Lk]; False entries receive exactly zero weight
        capture: Optional buffer that receives the weights [R, heads, Lq, Lk]

    Returns:
        Attention output [R, Lq, d]
    """
    if q.shape[-1] % heads:
        raise DimensionError(f"attention dim {q.shape[-1]} is not divisible by {heads} heads")
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * scale
    weights = softmax_lastdim(scores, mask)
    if capture is not None:
        capture.append(weights.data.copy())
    return merge_heads(matmul(weights, vh))


def project_attend(
    xq: Tensor,
    xk: Tensor,
    ap: AttentionParams,
    mask: np.ndarray | None = None,
    capture: list[np.ndarray] | None = None,
) -> Tensor:
    """Project queries from ``xq`` and keys/values from ``xk``, then attend."""
    if xq.shape[-1] != ap.dim or xk.shape[-1] != ap.dim:
        raise DimensionError(f"attention at dim {ap.dim} got operands {xq.shape} and {xk.shape}")
    q = matmul(xq, ap.w_q.value)
    k = matmul(xk, ap.w_k.value)
    v = matmul(xk, ap.w_v.value)
    return attend(q, k, v, ap.heads, mask, capture)


def _row_native(layout: Expert, window: WindowShape) -> bool:
    if layout == Expert.SPATIAL:
        return window == WindowShape.SPACE
    return window == WindowShape.SPACE_TIME


def mhsa(
    x: TokenSequence, ap: AttentionParams, window: WindowShape, capture: list[np.ndarray] | None = None
) -> TokenSequence:
    """
    Multi-head self attention restricted to ``window``.

    Spatial rows already hold one frame, so a space window runs row by row; temporal and
    audio rows hold a whole video, so space-time runs row by row. Other combinations attend
    over each video's flattened tokens under a window mask.

    Raises:
        ContractError: If the window needs (frame, patch) indices the layout lacks
    """
    if _row_native(x.layout, window):
        return x.with_tokens(project_attend(x.tokens, x.tokens, ap, capture=capture))
    mask = window_mask(x, x, window)
    flat = per_video(x)
    return x.with_tokens(from_per_video(x, project_attend(flat, flat, ap, mask, capture)))


def adapter_delta(x: Tensor, ad: AdapterParams) -> Tensor:
    """gelu(x W_down) W_up."""
    return matmul(gelu(matmul(x, ad.w_down.value)), ad.w_up.value)


def adapter(x: TokenSequence, ad: AdapterParams) -> TokenSequence:
    """ADAP(X); the residual lives at the call sites."""
    return x.with_tokens(adapter_delta(x.tokens, ad))


def feed_forward(x: Tensor, ffn: FeedForwardParams) -> Tensor:
    return ffn.fc2(gelu(ffn.fc1(x)))


def expert_attn_block(
    x: TokenSequence,
    ap: AttentionParams,
    ad: AdapterParams,
    ln: LayerNormParams,
    window: WindowShape,
    *,
    eps: float = LAYER_NORM_EPS,
    drop_path: Residual | None = None,
    capture: list[np.ndarray] | None = None,
) -> TokenSequence:
    """Y = X + ADAP(M) + M with M = MHSA(LN(X)) evaluated once."""
    drop = drop_path or _identity
    m = mhsa(x.with_tokens(apply_layer_norm(x.tokens, ln, eps)), ap, window, capture).tokens
    return x.with_tokens(x.tokens + drop(adapter_delta(m, ad) + m, x.rows_per_video))


def ffn_block(
    b: TokenSequence,
    ffn: FeedForwardParams,
    ad: AdapterParams,
    ln: LayerNormParams,
    *,
    eps: float = LAYER_NORM_EPS,
    drop_path: Residual | None = None,
) -> TokenSequence:
    """X' = B + FFN(LN(B)) + ADAP(LN(B)) with LN(B) evaluated once."""
    drop = drop_path or _identity
    h = apply_layer_norm(b.tokens, ln, eps)
    return b.with_tokens(b.tokens + drop(feed_forward(h, ffn) + adapter_delta(h, ad), b.rows_per_video))
