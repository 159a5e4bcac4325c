"""Bottleneck cross-attention between experts.

For a direction key -> query, both operands are moved into the bottleneck with their
own expert's projection group,

    Y' = E + LN(Y W_down)

then the query side attends to the key side and the result is projected back:

    Φ = gelu(MHCA(Y'_query, Y'_key)) W_up(query)

An exchange adds every Φ into its query expert; all Φ read the pre-exchange tokens.
"""

import logging
from collections.abc import Iterable, Mapping

import numpy as np

from src.lib.errors import ContractError
from src.lib.tensor import LAYER_NORM_EPS, Tensor, gelu, matmul
from src.models.params import BcaParams, BottleneckProjection, EmbedSource, ExchangeTopology
from src.models.types import EmbedKind, Expert, TokenSequence, WindowShape
from src.services.attention import apply_layer_norm, from_per_video, per_video, project_attend, window_mask

logger = logging.getLogger(__name__)

Capture = dict[str, list[np.ndarray]]


def mhca(
    y_q: TokenSequence,
    y_kv: TokenSequence,
    ap,
    window: WindowShape,
    capture: list[np.ndarray] | None = None,
) -> TokenSequence:
    """
    Multi-head cross attention: queries from ``y_q``, keys and values from ``y_kv``.

    Both sequences are flattened per video; the window mask relates their (frame, patch)
    indices. Weights captured into ``capture`` are [B, heads, Lq, Lk].

    Raises:
        ContractError: If the window needs an index system one side lacks
    """
    if y_q.batch != y_kv.batch:
        raise ContractError(f"cross attention batch mismatch: {y_q.batch} vs {y_kv.batch}")
    mask = window_mask(y_q, y_kv, window)
    out = project_attend(per_video(y_q), per_video(y_kv), ap, mask, capture)
    return y_q.with_tokens(from_per_video(y_q, out))


def bottleneck(seq: TokenSequence, proj: BottleneckProjection, eps: float = LAYER_NORM_EPS) -> Tensor:
    """LN(Y W_down) over each video's flattened tokens: [B, tokens_per_video, d]."""
    return apply_layer_norm(matmul(per_video(seq), proj.w_down.value), proj.ln, eps)


def resolve_embed(source: EmbedSource, layout: Expert, time_embeds: Mapping[Expert, Tensor] | None) -> Tensor | None:
    """Per-token embedding [tokens_per_video, d] for one operand, or None."""
    if source.kind == EmbedKind.POSITIONAL:
        return source.table.value
    if source.kind == EmbedKind.TIME:
        if not time_embeds or layout not in time_embeds:
            raise ContractError(f"{layout.value} operand needs time embeddings but none were supplied")
        return time_embeds[layout]
    return None


def _with_embed(z: Tensor, embed: Tensor | None) -> Tensor:
    if embed is None:
        return z
    if embed.shape != z.shape[1:]:
        raise ContractError(f"embedding {embed.shape} does not match bottleneck tokens {z.shape[1:]}")
    return z + embed


def _delta(
    y_q: TokenSequence,
    y_k: TokenSequence,
    q_in: Tensor,
    k_in: Tensor,
    p: BcaParams,
    window: WindowShape,
    capture: list[np.ndarray] | None,
) -> TokenSequence:
    attended = mhca(
        y_q.with_tokens(from_per_video(y_q, q_in)),
        y_k.with_tokens(from_per_video(y_k, k_in)),
        p.xattn,
        window,
        capture,
    )
    return y_q.with_tokens(matmul(gelu(attended.tokens), p.query_proj.w_up.value))


def phi(
    y_q: TokenSequence,
    y_k: TokenSequence,
    p: BcaParams,
    window: WindowShape | None = None,
    *,
    time_embeds: Mapping[Expert, Tensor] | None = None,
    eps: float = LAYER_NORM_EPS,
    capture: list[np.ndarray] | None = None,
) -> TokenSequence:
    """
    Φ_{key→query}: the delta that the key expert adds to the query expert.

    Args:
        y_q: Query expert tokens (receives the delta)
        y_k: Key expert tokens
        p: Direction parameters
        window: Window shape; defaults to ``p.window``
        time_embeds: Per-layout time-embedding matrices for time-embedded operands
        eps: LayerNorm epsilon of the bottleneck normalisation
        capture: Optional buffer receiving the cross-attention weights

    Returns:
        TokenSequence in the query layout holding Φ
    """
    if (y_k.layout, y_q.layout) != (p.direction.key, p.direction.query):
        raise ContractError(f"{p.direction.name} got {y_k.layout.value} keys for {y_q.layout.value} queries")
    q_in = _with_embed(bottleneck(y_q, p.query_proj, eps), resolve_embed(p.query_embed, y_q.layout, time_embeds))
    k_in = _with_embed(bottleneck(y_k, p.key_proj, eps), resolve_embed(p.key_embed, y_k.layout, time_embeds))
    return _delta(y_q, y_k, q_in, k_in, p, window or p.window, capture)


def exchange(
    ys: Mapping[Expert, TokenSequence],
    directions: Iterable[BcaParams],
    *,
    time_embeds: Mapping[Expert, Tensor] | None = None,
    eps: float = LAYER_NORM_EPS,
    capture: Capture | None = None,
) -> dict[Expert, TokenSequence]:
    """
    Simultaneous exchange: b_e = y_e + Σ Φ_{k→e}, every Φ reading the pre-exchange ``ys``.

    Deltas into one expert are summed in direction-name order, so evaluation order never
    changes the result. Each projection group's bottleneck LN(Y W_down) is computed once.
    """
    cached: dict[tuple[int, Expert], Tensor] = {}

    def prepared(layout: Expert, proj: BottleneckProjection) -> Tensor:
        key = (id(proj), layout)
        if key not in cached:
            cached[key] = bottleneck(ys[layout], proj, eps)
        return cached[key]

    deltas: dict[Expert, dict[str, Tensor]] = {}
    for p in directions:
        query, key = p.direction.query, p.direction.key
        if query not in ys or key not in ys:
            raise ContractError(f"{p.direction.name} needs both {key.value} and {query.value} tokens")
        q_in = _with_embed(prepared(query, p.query_proj), resolve_embed(p.query_embed, query, time_embeds))
        k_in = _with_embed(prepared(key, p.key_proj), resolve_embed(p.key_embed, key, time_embeds))
        buffer = None if capture is None else capture.setdefault(p.direction.name, [])
        delta = _delta(ys[query], ys[key], q_in, k_in, p, p.window, buffer)
        deltas.setdefault(query, {})[p.direction.name] = delta.tokens

    out = {}
    for expert, y in ys.items():
        total = y.tokens
        for name in sorted(deltas.get(expert, {})):
            total = total + deltas[expert][name]
        out[expert] = y.with_tokens(total)
    return out


def exchange_two(
    y1: TokenSequence,
    y2: TokenSequence,
    params_pair: tuple[BcaParams, BcaParams],
    *,
    time_embeds: Mapping[Expert, Tensor] | None = None,
    eps: float = LAYER_NORM_EPS,
    capture: Capture | None = None,
) -> tuple[TokenSequence, TokenSequence]:
    """
    Bidirectional two-expert exchange.

    Args:
        y1: First expert tokens
        y2: Second expert tokens
        params_pair: (Φ_{2→1} parameters, Φ_{1→2} parameters); either may be None for a one-way ablation

    Returns:
        Tuple of (b1, b2)
    """
    directions = [p for p in params_pair if p is not None]
    out = exchange({y1.layout: y1, y2.layout: y2}, directions, time_embeds=time_embeds, eps=eps, capture=capture)
    return out[y1.layout], out[y2.layout]


def exchange_three(
    y1: TokenSequence,
    y2: TokenSequence,
    y3: TokenSequence,
    topology: ExchangeTopology,
    *,
    time_embeds: Mapping[Expert, Tensor] | None = None,
    eps: float = LAYER_NORM_EPS,
    capture: Capture | None = None,
) -> tuple[TokenSequence, TokenSequence, TokenSequence]:
    """
    Three-expert exchange with one shared projection group per expert.

    Raises:
        ContractError: If the topology's projection groups are not shared by identity
    """
    topology.verify_sharing()
    ys = {y1.layout: y1, y2.layout: y2, y3.layout: y3}
    if len(ys) != 3:
        raise ContractError("three-expert exchange needs three distinct layouts")
    out = exchange(ys, topology.directions.values(), time_embeds=time_embeds, eps=eps, capture=capture)
    return out[y1.layout], out[y2.layout], out[y3.layout]
