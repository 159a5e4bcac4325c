"""Named parameter store and the parameter groups the services consume."""

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from src.lib.errors import ContractError, DimensionError
from src.lib.rng import uniform_fan_in
from src.lib.tensor import Parameter, Tensor, linear
from src.models.types import Direction, EmbedKind, Expert, Variant, WindowShape

logger = logging.getLogger(__name__)


class ParameterStore:
    """
    Ordered, name-unique collection of parameters.

    Every random parameter draws from its own stream keyed by ``(seed, name)``, so the
    values of a parameter depend only on its name and shape, never on construction order.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Parameter] = {}

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError as e:
            raise KeyError(f"no parameter named {name}") from e

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name: {param.name}")
        self._params[param.name] = param
        return param

    def uniform(
        self, name: str, shape: tuple[int, ...], fan_in: int, *, trainable: bool, layer: int, decay: bool = True
    ) -> Parameter:
        data = uniform_fan_in(self.seed, name, shape, fan_in, self.dtype)
        return self.add(Parameter(name, Tensor(data), trainable=trainable, layer=layer, decay=decay))

    def constant(
        self, name: str, shape: tuple[int, ...], value: float, *, trainable: bool, layer: int, decay: bool = True
    ) -> Parameter:
        data = np.full(shape, value, dtype=self.dtype)
        return self.add(Parameter(name, Tensor(data), trainable=trainable, layer=layer, decay=decay))

    def linear(
        self, name: str, d_in: int, d_out: int, *, trainable: bool, layer: int, bias: bool = True
    ) -> "LinearParams":
        w = self.uniform(f"{name}.w", (d_in, d_out), d_in, trainable=trainable, layer=layer)
        b = None
        if bias:
            b = self.uniform(f"{name}.b", (d_out,), d_in, trainable=trainable, layer=layer, decay=False)
        return LinearParams(w=w, b=b)

    def layer_norm(self, name: str, dim: int, *, trainable: bool, layer: int) -> "LayerNormParams":
        return LayerNormParams(
            gamma=self.constant(f"{name}.gamma", (dim,), 1.0, trainable=trainable, layer=layer, decay=False),
            beta=self.constant(f"{name}.beta", (dim,), 0.0, trainable=trainable, layer=layer, decay=False),
        )

    def adapter(self, name: str, dim: int, bottleneck: int, *, layer: int) -> "AdapterParams":
        """Trainable adapter with a zero up-projection."""
        return AdapterParams(
            w_down=self.uniform(f"{name}.w_down", (dim, bottleneck), dim, trainable=True, layer=layer),
            w_up=self.constant(f"{name}.w_up", (bottleneck, dim), 0.0, trainable=True, layer=layer),
        )

    def attention(self, name: str, dim: int, heads: int, *, trainable: bool, layer: int) -> "AttentionParams":
        return AttentionParams(
            w_q=self.uniform(f"{name}.w_q", (dim, dim), dim, trainable=trainable, layer=layer),
            w_k=self.uniform(f"{name}.w_k", (dim, dim), dim, trainable=trainable, layer=layer),
            w_v=self.uniform(f"{name}.w_v", (dim, dim), dim, trainable=trainable, layer=layer),
            heads=heads,
        )

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def frozen(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.trainable]

    def astype(self, dtype) -> None:
        self.dtype = np.dtype(dtype)
        for p in self._params.values():
            p.astype(self.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.data.copy() for name, p in self._params.items()}


# Groups


@dataclass
class LinearParams:
    w: Parameter
    b: Parameter | None = None

    def __post_init__(self):
        if len(self.w.shape) != 2:
            raise DimensionError(f"{self.w.name}: linear weight must be 2-D, got {self.w.shape}")
        if self.b is not None and self.b.shape != (self.w.shape[1],):
            raise DimensionError(f"{self.b.name}: bias {self.b.shape} does not match weight {self.w.shape}")

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w.value, None if self.b is None else self.b.value)


@dataclass
class LayerNormParams:
    gamma: Parameter
    beta: Parameter


@dataclass
class AttentionParams:
    """Query/key/value projections; attention has no output projection."""

    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    heads: int

    def __post_init__(self):
        dim = self.w_q.shape[0]
        for p in (self.w_q, self.w_k, self.w_v):
            if p.shape != (dim, dim):
                raise DimensionError(f"{p.name}: expected [{dim}, {dim}], got {p.shape}")
        if self.heads <= 0 or dim % self.heads:
            raise ContractError(f"attention dim {dim} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]


@dataclass
class AdapterParams:
    """ADAP(X) = gelu(X W_down) W_up."""

    w_down: Parameter
    w_up: Parameter

    def __post_init__(self):
        dim, bottleneck = self.w_down.shape
        if self.w_up.shape != (bottleneck, dim):
            raise DimensionError(f"adapter up-projection {self.w_up.shape} does not mirror down {self.w_down.shape}")


@dataclass
class FeedForwardParams:
    fc1: LinearParams
    fc2: LinearParams


@dataclass
class ExpertBlockParams:
    """One frozen expert block plus its two trainable adapters."""

    ln_attn: LayerNormParams
    attn: AttentionParams
    adapter_attn: AdapterParams
    ln_ffn: LayerNormParams
    ffn: FeedForwardParams
    adapter_ffn: AdapterParams


@dataclass
class PatchEmbedParams:
    """Frozen patch projection, positional table and optional class token of one path."""

    proj: LinearParams
    pos: Parameter
    cls: Parameter | None = None


@dataclass
class BottleneckProjection:
    """
    Per-expert B-CA projection group shared by every direction into and out of the expert.

    ``w_up`` is None for an expert that only ever supplies keys.
    """

    w_down: Parameter
    ln: LayerNormParams
    w_up: Parameter | None = None

    @property
    def dim(self) -> int:
        return self.w_down.shape[1]


@dataclass
class EmbedSource:
    """Source of the embedding added to one B-CA operand."""

    kind: EmbedKind
    table: Parameter | None = None

    def __post_init__(self):
        if (self.kind == EmbedKind.POSITIONAL) != (self.table is not None):
            raise ContractError("a positional embedding source needs exactly one table")


@dataclass
class BcaParams:
    """Learnables of one direction Φ_{key→query}; the projection groups are shared references."""

    direction: Direction
    xattn: AttentionParams
    query_proj: BottleneckProjection
    key_proj: BottleneckProjection
    query_embed: EmbedSource
    key_embed: EmbedSource
    window: WindowShape

    def __post_init__(self):
        if self.query_proj.w_up is None:
            raise ContractError(f"{self.direction.name}: receiving expert has no up-projection")
        if self.xattn.dim != self.query_proj.dim or self.key_proj.dim != self.query_proj.dim:
            raise DimensionError(f"{self.direction.name}: bottleneck dims disagree")
        if self.direction.involves_audio and self.window != WindowShape.SPACE_TIME:
            raise ContractError(f"{self.direction.name}: audio tokens only allow a space-time window")


@dataclass
class ExchangeTopology:
    """
    B-CA learnables of one block.

    ``projections`` holds one group per expert; every direction into or out of that
    expert references the same group object.
    """

    variant: Variant
    projections: dict[Expert, BottleneckProjection] = field(default_factory=dict)
    directions: dict[str, BcaParams] = field(default_factory=dict)

    def __post_init__(self):
        for name, params in self.directions.items():
            if params.direction.name != name:
                raise ContractError(f"direction {params.direction.name} is filed under {name}")
        self.verify_sharing()

    def verify_sharing(self) -> None:
        """
        Check that all directions of an expert use its single projection group.

        Raises:
            ContractError: If a direction holds a private copy of a projection group
        """
        for params in self.directions.values():
            for expert, proj in ((params.direction.query, params.query_proj), (params.direction.key, params.key_proj)):
                if self.projections.get(expert) is not proj:
                    raise ContractError(
                        f"{params.direction.name}: {expert.value} projection is not the shared group object"
                    )


@dataclass
class TimeIntervalMLP:
    """(start_s, end_s) -> hidden -> GELU -> bottleneck dim, plus one learned row per class-token path."""

    fc1: LinearParams
    fc2: LinearParams
    cls_rows: dict[Expert, Parameter] = field(default_factory=dict)

    def __post_init__(self):
        if self.fc1.w.shape[0] != 2:
            raise DimensionError(f"time MLP input must take (start, end) pairs, got {self.fc1.w.shape}")

    @property
    def dim(self) -> int:
        return self.fc2.w.shape[1]


@dataclass
class HeadParams:
    """Per-path final LayerNorm and adapter, then the shared linear classifier."""

    final_ln: dict[Expert, LayerNormParams]
    adapters: dict[Expert, AdapterParams]
    classifier: LinearParams
