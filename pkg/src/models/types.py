"""Data models for audio-visual expert transformers."""

from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum

import numpy as np

from src.lib.errors import ConfigError, ContractError
from src.lib.tensor import Tensor


class Expert(str, Enum):
    """An expert path; also names the token layout that path carries."""

    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    AUDIO = "audio"

    @property
    def code(self) -> str:
        return {"spatial": "S", "temporal": "T", "audio": "A"}[self.value]

    @classmethod
    def from_code(cls, code: str) -> "Expert":
        for expert in cls:
            if expert.code == code.upper():
                return expert
        raise ConfigError(f"unknown expert code: {code}")


EXPERT_ORDER = (Expert.SPATIAL, Expert.TEMPORAL, Expert.AUDIO)


class Variant(str, Enum):
    """Expert combination."""

    CAST = "CAST"
    CAVA = "CAVA"
    CA2ST = "CA2ST"


class WindowShape(str, Enum):
    """Key subset a cross-attention query may attend to."""

    TIME = "time"
    SPACE = "space"
    SPACE_TIME = "space-time"


class EmbedKind(str, Enum):
    """Embedding added to a B-CA operand after the down-projection."""

    POSITIONAL = "positional"
    TIME = "time"
    NONE = "none"


class CropPolicy(str, Enum):
    """Spatial crop placement for multi-view inference."""

    THREE_CROP = "three-crop"
    CENTER = "center"


class Coupling(str, Enum):
    """How synthetic labels depend on the visual and audio factors."""

    VISUAL_ONLY = "visual-only"
    AUDIO_ONLY = "audio-only"
    XOR = "xor-coupled"


class CorruptionType(str, Enum):
    """Audio corruption families."""

    MISALIGNMENT = "misalignment"
    DROPOUT = "dropout"
    GAUSSIAN = "gaussian"
    PINK = "pink"


@dataclass(frozen=True)
class Direction:
    """A cross-attention direction: ``key`` expert feeds ``query`` expert (e.g. T2S)."""

    key: Expert
    query: Expert

    def __post_init__(self):
        if self.key == self.query:
            raise ConfigError(f"direction needs two distinct experts, got {self.key.value} twice")

    @property
    def name(self) -> str:
        return f"{self.key.code}2{self.query.code}"

    @property
    def mirror(self) -> "Direction":
        return Direction(key=self.query, query=self.key)

    @property
    def involves_audio(self) -> bool:
        return Expert.AUDIO in (self.key, self.query)

    @classmethod
    def parse(cls, name: str) -> "Direction":
        text = name.strip().upper()
        if len(text) != 3 or text[1] != "2":
            raise ConfigError(f"direction must look like T2S, got {name!r}")
        return cls(key=Expert.from_code(text[0]), query=Expert.from_code(text[2]))

    def __str__(self) -> str:
        return self.name


def audio_patch_count(extent: int, patch: int, stride: int) -> int:
    """Number of window starts k with k*stride + patch <= extent."""
    if extent < patch:
        return 0
    return (extent - patch) // stride + 1


# Input batches


@dataclass
class VideoBatch:
    """RGB clips ``[B, 2T, H, W, C]`` with values in [0, 1]."""

    data: np.ndarray
    frame_rate: float = 8.0

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ContractError(f"video batch must be [B, 2T, H, W, C], got shape {self.data.shape}")
        if self.data.shape[1] % 2 != 0:
            raise ContractError(f"video frame count must be even, got {self.data.shape[1]}")
        if self.frame_rate <= 0:
            raise ContractError("frame_rate must be positive")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def channels(self) -> int:
        return self.data.shape[4]

    @property
    def duration_s(self) -> float:
        return self.frames / self.frame_rate


@dataclass
class SpectrogramBatch:
    """Mel spectrograms ``[B, T_spec, mel_bins]`` covering ``duration_s`` seconds."""

    data: np.ndarray
    duration_s: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ContractError(f"spectrogram batch must be [B, T_spec, mel_bins], got shape {self.data.shape}")
        if self.duration_s <= 0:
            raise ContractError("duration_s must be positive")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def time_frames(self) -> int:
        return self.data.shape[1]

    @property
    def mel_bins(self) -> int:
        return self.data.shape[2]


@dataclass
class TimeInterval:
    """Half-open interval [start_s, end_s) in seconds."""

    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ContractError(f"time interval needs 0 <= start < end, got [{self.start_s}, {self.end_s})")


@dataclass
class TokenSequence:
    """
    Token embeddings of one expert path with their axis metadata.

    Layouts:
        spatial:  tokens [B*T, N(+1 class), D], one row per sampled frame
        temporal: tokens [B, T*N, D], one row per video, no class token
        audio:    tokens [B, M(+1 class), D], one row per video; grid = (time, freq) positions
    """

    tokens: Tensor
    layout: Expert
    batch: int
    frames: int
    patches: int
    has_cls: bool
    grid: tuple[int, int]

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ContractError(f"token tensor must be 3-D, got shape {self.tokens.shape}")
        if self.layout == Expert.TEMPORAL and self.has_cls:
            raise ContractError("temporal layout carries no class token")
        if self.grid[0] * self.grid[1] != self.patches:
            raise ContractError(f"grid {self.grid} does not hold {self.patches} patches")
        expected = (self.rows, self.tokens_per_row)
        if self.tokens.shape[:2] != expected:
            raise ContractError(
                f"{self.layout.value} layout expects leading extents {expected}, got {self.tokens.shape[:2]}"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    @property
    def rows_per_video(self) -> int:
        return self.frames if self.layout == Expert.SPATIAL else 1

    @property
    def rows(self) -> int:
        return self.batch * self.rows_per_video

    @property
    def tokens_per_row(self) -> int:
        if self.layout == Expert.TEMPORAL:
            return self.frames * self.patches
        return self.patches + (1 if self.has_cls else 0)

    @property
    def tokens_per_video(self) -> int:
        return self.rows_per_video * self.tokens_per_row

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return replace(self, tokens=tokens)

    def token_index(self) -> tuple[np.ndarray, np.ndarray]:
        """
        Frame and patch index of every token of one video, in flattened order.

        Class tokens carry -1 (a wildcard) on the axis they do not belong to.

        Raises:
            ContractError: For the audio layout, which has no frame/patch index system
        """
        if self.layout == Expert.AUDIO:
            raise ContractError("audio tokens have no (frame, patch) index system")
        if self.layout == Expert.TEMPORAL:
            frame = np.repeat(np.arange(self.frames), self.patches)
            patch = np.tile(np.arange(self.patches), self.frames)
            return frame, patch
        row_patch = np.arange(-1 if self.has_cls else 0, self.patches)
        frame = np.repeat(np.arange(self.frames), len(row_patch))
        patch = np.tile(row_patch, self.frames)
        return frame, patch


# Configuration


_PRESETS: dict[str, dict] = {
    "desk": {},
    "toy": {
        "depth": 2,
        "embed_dim": 32,
        "heads": 2,
        "patch_size": 8,
        "frames": 4,
        "image_height": 16,
        "image_width": 16,
        "spec_frames": 32,
        "mel_bins": 32,
        "adapter_dim": 8,
        "bca_dim": 8,
        "bca_heads": 2,
        "num_classes": 2,
    },
    "vit-base": {
        "depth": 12,
        "embed_dim": 768,
        "heads": 12,
        "patch_size": 16,
        "frames": 16,
        "image_height": 224,
        "image_width": 224,
        "spec_frames": 1024,
        "mel_bins": 128,
        "adapter_dim": 192,
        "bca_dim": 384,
        "bca_heads": 6,
        "num_classes": 97,
        "drop_path": 0.2,
    },
}


def _default_window(direction: Direction) -> WindowShape:
    if direction.involves_audio:
        return WindowShape.SPACE_TIME
    if direction.query == Expert.SPATIAL:
        return WindowShape.TIME
    return WindowShape.SPACE


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor; fully determines every parameter shape."""

    variant: Variant = Variant.CAST
    depth: int = 4
    embed_dim: int = 64
    heads: int = 4
    patch_size: int = 8
    frames: int = 8
    image_height: int = 32
    image_width: int = 32
    channels: int = 3
    spec_frames: int = 64
    mel_bins: int = 32
    audio_patch: int = 16
    audio_stride: int = 10
    adapter_dim: int = 16
    bca_dim: int = 16
    bca_heads: int = 2
    time_mlp_hidden: int | None = None
    num_classes: int = 2
    windows: tuple[tuple[str, WindowShape], ...] = ()
    drop_path: float = 0.0
    ln_eps: float = 1e-6
    seed: int = 0
    exchange: bool = True
    disabled_directions: tuple[str, ...] = ()
    head_paths: tuple[Expert, ...] = ()
    cava_visual: Expert = Expert.SPATIAL
    audio_embed: EmbedKind = EmbedKind.TIME

    def __post_init__(self):
        """Validate model configuration."""
        for name in ("depth", "embed_dim", "heads", "patch_size", "frames", "channels", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive integer > 0")
        if self.frames % 2 != 0:
            raise ConfigError(f"frames must be even (2T), got {self.frames}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.bca_dim <= 0 or self.bca_dim % self.bca_heads:
            raise ConfigError(f"bca_dim {self.bca_dim} must be positive and divisible by bca_heads {self.bca_heads}")
        if not 0 < self.adapter_dim < self.embed_dim:
            raise ConfigError(f"adapter_dim must be in (0, embed_dim), got {self.adapter_dim}")
        if self.bca_dim >= self.embed_dim:
            raise ConfigError(f"bca_dim must be < embed_dim, got {self.bca_dim}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError("drop_path must be in [0, 1)")
        if self.cava_visual not in (Expert.SPATIAL, Expert.TEMPORAL):
            raise ConfigError("cava_visual must be spatial or temporal")
        if Expert.AUDIO in self.variant_paths:
            if not 1 <= self.audio_stride <= self.audio_patch:
                raise ConfigError("audio_stride must be in [1, audio_patch]")
            if self.spec_frames < self.audio_patch or self.mel_bins < self.audio_patch:
                raise ConfigError(
                    f"spectrogram {self.spec_frames}x{self.mel_bins} is smaller than one {self.audio_patch} patch"
                )
        all_directions = {d.name for d in self.variant_directions}
        for name in self.disabled_directions:
            if name not in all_directions:
                raise ConfigError(f"disabled direction {name} is not part of {self.variant.value}")
        for name, window in self.windows:
            if name not in all_directions:
                raise ConfigError(f"window override {name} is not a direction of {self.variant.value}")
            if Direction.parse(name).involves_audio and window != WindowShape.SPACE_TIME:
                raise ConfigError(f"audio-involved direction {name} needs a space-time window, got {window.value}")
        for path in self.head_paths:
            if path not in self.variant_paths:
                raise ConfigError(f"head path {path.value} is not part of {self.variant.value}")
        if self.exchange and self.head_paths and set(self.head_paths) != set(self.variant_paths):
            raise ConfigError("head_paths can only restrict the head when exchange is off")

    @classmethod
    def from_preset(cls, preset: str = "desk", **overrides) -> "ModelConfig":
        if preset not in _PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
        return cls(**{**_PRESETS[preset], **overrides})

    def with_overrides(self, **overrides) -> "ModelConfig":
        return replace(self, **overrides)

    # geometry

    @property
    def temporal_frames(self) -> int:
        return self.frames // 2

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def audio_grid(self) -> tuple[int, int]:
        return (
            audio_patch_count(self.spec_frames, self.audio_patch, self.audio_stride),
            audio_patch_count(self.mel_bins, self.audio_patch, self.audio_stride),
        )

    @property
    def audio_patches(self) -> int:
        return self.audio_grid[0] * self.audio_grid[1]

    @property
    def time_hidden(self) -> int:
        return self.time_mlp_hidden or 2 * self.bca_dim

    def tokens_per_video(self, path: Expert) -> int:
        """Token count of one video in the path's flattened layout."""
        if path == Expert.SPATIAL:
            return self.temporal_frames * (self.num_patches + 1)
        if path == Expert.TEMPORAL:
            return self.temporal_frames * self.num_patches
        return self.audio_patches + 1

    # topology

    @property
    def variant_paths(self) -> tuple[Expert, ...]:
        if self.variant == Variant.CAST:
            return Expert.SPATIAL, Expert.TEMPORAL
        if self.variant == Variant.CAVA:
            return tuple(p for p in EXPERT_ORDER if p in (self.cava_visual, Expert.AUDIO))
        return EXPERT_ORDER

    @property
    def variant_pairs(self) -> tuple[tuple[Expert, Expert], ...]:
        paths = self.variant_paths
        return tuple((a, b) for i, a in enumerate(paths) for b in paths[i + 1 :])

    @property
    def variant_directions(self) -> tuple[Direction, ...]:
        out = []
        for first, second in self.variant_pairs:
            out.append(Direction(key=second, query=first))
            out.append(Direction(key=first, query=second))
        return tuple(out)

    @property
    def paths(self) -> tuple[Expert, ...]:
        """Paths that are built and run."""
        if not self.exchange and self.head_paths:
            return tuple(p for p in self.variant_paths if p in self.head_paths)
        return self.variant_paths

    @property
    def fused_paths(self) -> tuple[Expert, ...]:
        """Paths whose summaries enter the fused token."""
        if self.head_paths:
            return tuple(p for p in self.paths if p in self.head_paths)
        return self.paths

    @property
    def directions(self) -> tuple[Direction, ...]:
        """Enabled B-CA directions."""
        if not self.exchange:
            return ()
        return tuple(d for d in self.variant_directions if d.name not in self.disabled_directions)

    @property
    def pairs(self) -> tuple[tuple[Expert, Expert], ...]:
        """Expert pairs with at least one enabled direction."""
        enabled = {frozenset((d.key, d.query)) for d in self.directions}
        return tuple(pair for pair in self.variant_pairs if frozenset(pair) in enabled)

    def window_for(self, direction: Direction) -> WindowShape:
        for name, window in self.windows:
            if name == direction.name:
                return window
        return _default_window(direction)

    def embed_kind_for(self, pair: tuple[Expert, Expert]) -> EmbedKind:
        if Expert.AUDIO in pair:
            return self.audio_embed
        return EmbedKind.POSITIONAL

    @property
    def uses_time_embedding(self) -> bool:
        return any(self.embed_kind_for(pair) == EmbedKind.TIME for pair in self.pairs)


@dataclass(frozen=True)
class OptimConfig:
    """Optimizer, schedule and batching hyperparameters."""

    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    layer_decay: float = 0.8
    warmup_epochs: int = 5
    epochs: int = 50
    batch_size: int = 8
    update_frequency: int = 1
    label_smoothing: float = 0.0

    def __post_init__(self):
        """Validate optimizer configuration."""
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must be in [0, 1)")
        if self.epochs <= 0 or self.batch_size <= 0 or self.update_frequency <= 0:
            raise ConfigError("epochs, batch_size and update_frequency must be positive integers")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must be in [0, epochs]")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError("layer_decay must be in (0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")


@dataclass(frozen=True)
class Schedule:
    """Warmup + cosine learning-rate schedule in optimizer steps."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("schedule needs 0 <= warmup_steps <= total_steps and total_steps > 0")


@dataclass(frozen=True)
class ViewSpec:
    """Multi-view inference: temporal clips x spatial crops."""

    temporal_views: int = 1
    spatial_crops: int = 1
    crop_policy: CropPolicy = CropPolicy.CENTER

    def __post_init__(self):
        if self.temporal_views < 1 or self.spatial_crops < 1:
            raise ConfigError("views must be >= 1")

    @classmethod
    def parse(cls, text: str, crop_policy: CropPolicy | None = None) -> "ViewSpec":
        """Parse ``TxS`` (e.g. ``2x3``)."""
        try:
            temporal, spatial = (int(part) for part in text.lower().split("x"))
        except ValueError as e:
            raise ConfigError(f"views must look like TxS (e.g. 2x3), got {text!r}") from e
        if crop_policy is None:
            crop_policy = CropPolicy.THREE_CROP if spatial > 1 else CropPolicy.CENTER
        return cls(temporal_views=temporal, spatial_crops=spatial, crop_policy=crop_policy)


# Synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic audio-visual classification set."""

    num_classes: int = 2
    samples_per_class: int = 32
    coupling: Coupling = Coupling.XOR
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    spec_frames: int = 64
    mel_bins: int = 32
    noise: float = 0.05
    frame_rate: float = 8.0
    seed: int = 0

    def __post_init__(self):
        """Validate the synthetic dataset recipe."""
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.samples_per_class <= 0:
            raise ConfigError("samples_per_class must be positive")
        if self.coupling == Coupling.XOR and self.samples_per_class % self.num_classes:
            raise ConfigError(
                f"xor-coupled labels need samples_per_class divisible by {self.num_classes} "
                "so every label receives each factor pair equally often"
            )
        if self.frames < 2 or self.frames % 2:
            raise ConfigError("frames must be even and >= 2")
        if min(self.height, self.width) < 4:
            raise ConfigError("clip height and width must be >= 4")
        if self.mel_bins < 2 * self.num_classes:
            raise ConfigError(f"{self.mel_bins} mel bins cannot hold {self.num_classes} disjoint tone bands")
        if self.spec_frames < 4:
            raise ConfigError("spec_frames must be >= 4")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    @property
    def duration_s(self) -> float:
        return self.frames / self.frame_rate

    @property
    def total(self) -> int:
        return self.num_classes * self.samples_per_class


SYNTH_PRESETS: dict[str, dict] = {
    "xor2x2": {"num_classes": 2, "coupling": Coupling.XOR},
    "visual2": {"num_classes": 2, "coupling": Coupling.VISUAL_ONLY},
    "audio2": {"num_classes": 2, "coupling": Coupling.AUDIO_ONLY},
    "xor4x4": {"num_classes": 4, "coupling": Coupling.XOR},
}


@dataclass(frozen=True)
class CorruptionKind:
    """One audio corruption with its strength."""

    kind: CorruptionType
    shift_s: float = 0.0
    rate: float = 0.2
    sigma: float = 0.1

    def __post_init__(self):
        if not -2.0 <= self.shift_s <= 2.0:
            raise ConfigError(f"misalignment shift must be within [-2, 2] seconds, got {self.shift_s}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1], got {self.rate}")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "CorruptionKind":
        """Parse ``kind[:value]`` such as ``misalignment:1.5``, ``dropout:0.2`` or ``pink:0.1``."""
        name, _, value = text.partition(":")
        try:
            kind = CorruptionType(name.strip().lower())
        except ValueError as e:
            raise ConfigError(f"unknown corruption {name!r}; choose from {[k.value for k in CorruptionType]}") from e
        if not value:
            return cls(kind=kind)
        try:
            amount = float(value)
        except ValueError as e:
            raise ConfigError(f"corruption strength must be a number, got {value!r}") from e
        if kind == CorruptionType.MISALIGNMENT:
            return cls(kind=kind, shift_s=amount)
        if kind == CorruptionType.DROPOUT:
            return cls(kind=kind, rate=amount)
        return cls(kind=kind, sigma=amount)


@dataclass
class Sample:
    """One labelled clip with its spectrogram."""

    sample_id: str
    video: VideoBatch
    audio: SpectrogramBatch
    label: int


# Analysis


@dataclass(frozen=True)
class KeyLayout:
    """Token layout of one path, flattened per video, as recorded in attention dumps."""

    layout: Expert
    frames: int
    tokens_per_row: int
    grid_h: int
    grid_w: int
    has_cls: bool

    @classmethod
    def of(cls, seq: TokenSequence) -> "KeyLayout":
        return cls(seq.layout, seq.frames, seq.tokens_per_row, seq.grid[0], seq.grid[1], seq.has_cls)

    def as_array(self) -> np.ndarray:
        return np.array([self.frames, self.tokens_per_row, self.grid_h, self.grid_w, int(self.has_cls)], np.float32)

    @classmethod
    def from_array(cls, layout: Expert, values: np.ndarray) -> "KeyLayout":
        frames, per_row, grid_h, grid_w, has_cls = (int(v) for v in values)
        return cls(layout, frames, per_row, grid_h, grid_w, bool(has_cls))


@dataclass
class AttentionDump:
    """Cross-attention weights of one sample, keyed by (layer, direction name)."""

    sample_id: str
    weights: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    layouts: dict[Expert, KeyLayout] = field(default_factory=dict)

    def __post_init__(self):
        for (layer, direction), w in self.weights.items():
            if layer < 1:
                raise ContractError(f"layer index must be >= 1, got {layer} for {direction}")
            if w.ndim != 3:
                raise ContractError(f"attention weights must be [heads, queries, keys], got {w.shape}")

    @property
    def depth(self) -> int:
        return max((layer for layer, _ in self.weights), default=0)

    def get(self, layer: int, direction: str) -> np.ndarray:
        try:
            return self.weights[(layer, direction)]
        except KeyError as e:
            raise KeyError(f"attention dump {self.sample_id} has no entry for layer {layer}, {direction}") from e


# Training and evaluation results


@dataclass
class EvalMetrics:
    """Classification quality of one prediction set."""

    top1: float
    per_class_f1: list[float]
    weighted_f1: float
    num_samples: int


@dataclass
class StepRecord:
    """One optimizer step of a training run."""

    step: int
    epoch: int
    lr: float
    loss: float
    top1: float

    def as_line(self) -> str:
        return f"{self.step}\t{self.epoch}\t{self.lr:.6g}\t{self.loss:.6f}\t{self.top1:.4f}"


@dataclass
class TrainJob:
    """Represents a training run over several epochs."""

    start_time: datetime
    end_time: datetime | None = None
    steps: int = 0
    epochs: int = 0
    history: list[StepRecord] = field(default_factory=list)

    @property
    def duration_ms(self) -> int | None:
        """Calculate job duration in milliseconds."""
        if self.end_time is None:
            return None
        delta = self.end_time - self.start_time
        return int(delta.total_seconds() * 1000)

    @property
    def final_loss(self) -> float | None:
        return self.history[-1].loss if self.history else None

    def add_step(self, record: StepRecord) -> None:
        """Add a step record and update counters."""
        self.history.append(record)
        self.steps += 1
        self.epochs = max(self.epochs, record.epoch + 1)
