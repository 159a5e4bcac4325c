"""Expert-path assembly for CAST / CAVA / CA2ST, the fused classification head, and checkpoints."""

import logging
from pathlib import Path

import numpy as np

from src.lib.errors import CheckpointError, ContractError, DimensionError
from src.lib.io_utils import CHECKPOINT_MAGIC, TensorRecord, read_container, write_container
from src.lib.rng import stream
from src.lib.tensor import Parameter, Tensor, getitem, reshape
from src.models.params import (
    BcaParams,
    BottleneckProjection,
    EmbedSource,
    ExchangeTopology,
    ExpertBlockParams,
    FeedForwardParams,
    HeadParams,
    LinearParams,
    ParameterStore,
    PatchEmbedParams,
    TimeIntervalMLP,
)
from src.models.types import (
    EXPERT_ORDER,
    EmbedKind,
    Expert,
    KeyLayout,
    ModelConfig,
    SpectrogramBatch,
    TokenSequence,
    VideoBatch,
    WindowShape,
)
from src.services.attention import (
    DropPath,
    adapter_delta,
    apply_layer_norm,
    expert_attn_block,
    ffn_block,
    per_video,
)
from src.services.bca import exchange
from src.services.tokenizer import (
    assign_time_embeddings,
    frame_intervals,
    time_interval_embed,
    tokenize_audio,
    tokenize_spatial,
    tokenize_temporal,
)

logger = logging.getLogger(__name__)

AttentionCapture = dict[tuple[int, str], np.ndarray]

SELF_WINDOWS = {
    Expert.SPATIAL: WindowShape.SPACE,
    Expert.TEMPORAL: WindowShape.SPACE_TIME,
    Expert.AUDIO: WindowShape.SPACE_TIME,
}


# Topology helpers shared by build() and count_trainable()


def _bca_experts(config: ModelConfig) -> tuple[Expert, ...]:
    members = {e for pair in config.pairs for e in pair}
    return tuple(e for e in EXPERT_ORDER if e in members)


def _receivers(config: ModelConfig) -> set[Expert]:
    return {d.query for d in config.directions}


def _time_cls_paths(config: ModelConfig) -> tuple[Expert, ...]:
    sides = {e for pair in config.pairs if config.embed_kind_for(pair) == EmbedKind.TIME for e in pair}
    return tuple(e for e in EXPERT_ORDER if e in sides and e != Expert.TEMPORAL)


def _time_paths(config: ModelConfig) -> set[Expert]:
    return {e for pair in config.pairs if config.embed_kind_for(pair) == EmbedKind.TIME for e in pair}


def _other(pair: tuple[Expert, Expert], side: Expert) -> Expert:
    return pair[1] if pair[0] == side else pair[0]


def _pair_of(config: ModelConfig, a: Expert, b: Expert) -> tuple[Expert, Expert]:
    for pair in config.variant_pairs:
        if set(pair) == {a, b}:
            return pair
    raise ContractError(f"{a.value} and {b.value} do not form a pair")


class Model:
    """Frozen experts with trainable adapters, B-CA exchanges, time MLP and fused head."""

    def __init__(
        self,
        config: ModelConfig,
        store: ParameterStore,
        embeds: dict[Expert, PatchEmbedParams],
        blocks: dict[Expert, list[ExpertBlockParams]],
        exchanges: list[ExchangeTopology],
        time_mlp: TimeIntervalMLP | None,
        head: HeadParams,
    ):
        self.config = config
        self.parameters = store
        self.embeds = embeds
        self.blocks = blocks
        self.exchanges = exchanges
        self.time_mlp = time_mlp
        self.head = head
        self._time_paths = _time_paths(config)

    def __repr__(self) -> str:
        return (
            f"Model(variant={self.config.variant.value}, depth={self.config.depth}, "
            f"paths={[p.value for p in self.config.paths]}, params={len(self.parameters)})"
        )

    @property
    def dtype(self) -> np.dtype:
        return self.parameters.dtype

    def astype(self, dtype) -> "Model":
        """Cast every parameter in place (float64 for tight gradient checks)."""
        self.parameters.astype(dtype)
        return self

    def trainable_parameters(self) -> list[Parameter]:
        return trainable_parameters(self)

    # forward pieces

    def tokenize(self, video: VideoBatch | None, audio: SpectrogramBatch | None) -> dict[Expert, TokenSequence]:
        """
        Token sequences of every active path.

        Raises:
            ContractError: If a modality an active path needs is missing
            DimensionError: If input geometry differs from the config
        """
        cfg = self.config
        seqs: dict[Expert, TokenSequence] = {}
        visual = [p for p in cfg.paths if p != Expert.AUDIO]
        if visual:
            if video is None:
                raise ContractError(f"{cfg.variant.value} needs a video batch for {[p.value for p in visual]}")
            expected = (cfg.frames, cfg.image_height, cfg.image_width, cfg.channels)
            if video.data.shape[1:] != expected:
                raise DimensionError(f"video clip {video.data.shape[1:]} does not match config {expected}")
        if Expert.SPATIAL in cfg.paths:
            e = self.embeds[Expert.SPATIAL]
            seqs[Expert.SPATIAL] = tokenize_spatial(video, cfg.patch_size, e.proj, e.pos, e.cls)
        if Expert.TEMPORAL in cfg.paths:
            e = self.embeds[Expert.TEMPORAL]
            seqs[Expert.TEMPORAL] = tokenize_temporal(video, cfg.patch_size, e.proj, e.pos)
        if Expert.AUDIO in cfg.paths:
            if audio is None:
                raise ContractError(f"{cfg.variant.value} needs a spectrogram batch for the audio path")
            expected = (cfg.spec_frames, cfg.mel_bins)
            if audio.data.shape[1:] != expected:
                raise DimensionError(f"spectrogram {audio.data.shape[1:]} does not match config {expected}")
            if video is not None and video.batch != audio.batch:
                raise ContractError(f"video batch {video.batch} and audio batch {audio.batch} differ")
            e = self.embeds[Expert.AUDIO]
            seqs[Expert.AUDIO] = tokenize_audio(audio, e.proj, e.pos, e.cls, cfg.audio_patch, cfg.audio_stride)
        return seqs

    def time_embeddings(self, seqs: dict[Expert, TokenSequence], frame_rate: float) -> dict[Expert, Tensor] | None:
        """Per-token time-embedding matrices of every time-embedded path."""
        if self.time_mlp is None:
            return None
        embeds = time_interval_embed(frame_intervals(self.config.temporal_frames, frame_rate), self.time_mlp)
        return {
            path: assign_time_embeddings(seqs[path], embeds, self.time_mlp.cls_rows.get(path))
            for path in seqs
            if path in self._time_paths
        }

    def encode(
        self,
        video: VideoBatch | None,
        audio: SpectrogramBatch | None = None,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        capture: AttentionCapture | None = None,
    ) -> dict[Expert, TokenSequence]:
        """
        Final-block tokens of every path.

        Args:
            video: Video batch (may be None only for an audio-only model)
            audio: Spectrogram batch, required when the audio path is active
            training: Enables drop-path on the residual branches
            rng: Drop-path stream, required when training with drop_path > 0
            capture: Optional dict receiving cross-attention weights keyed by (layer, direction)

        Returns:
            Dict mapping each active path to its final TokenSequence
        """
        cfg = self.config
        seqs = self.tokenize(video, audio)
        frame_rate = video.frame_rate if video is not None else 2.0 * cfg.temporal_frames / audio.duration_s
        time_embeds = self.time_embeddings(seqs, frame_rate)

        drop = None
        if training and cfg.drop_path > 0.0:
            if rng is None:
                raise ContractError("training with drop_path needs a random stream")
            drop = DropPath(cfg.drop_path, rng)

        for layer in range(1, cfg.depth + 1):
            ys = {}
            for path, seq in seqs.items():
                block = self.blocks[path][layer - 1]
                ys[path] = expert_attn_block(
                    seq,
                    block.attn,
                    block.adapter_attn,
                    block.ln_attn,
                    SELF_WINDOWS[path],
                    eps=cfg.ln_eps,
                    drop_path=drop,
                )
            if self.exchanges:
                buffers = None if capture is None else {}
                ys = exchange(
                    ys,
                    self.exchanges[layer - 1].directions.values(),
                    time_embeds=time_embeds,
                    eps=cfg.ln_eps,
                    capture=buffers,
                )
                if buffers:
                    for name, weights in buffers.items():
                        capture[(layer, name)] = weights[0]
            seqs = {}
            for path, y in ys.items():
                block = self.blocks[path][layer - 1]
                seqs[path] = ffn_block(y, block.ffn, block.adapter_ffn, block.ln_ffn, eps=cfg.ln_eps, drop_path=drop)
        return seqs

    def summaries(self, features: dict[Expert, TokenSequence]) -> dict[Expert, Tensor]:
        """Per-path summary [B, D]: mean frame class token, global average pool, or audio class token."""
        out = {}
        for path in self.config.fused_paths:
            seq = features[path]
            if path == Expert.SPATIAL:
                cls = getitem(seq.tokens, (slice(None), 0, slice(None)))
                out[path] = reshape(cls, (seq.batch, seq.frames, seq.dim)).mean(axis=1)
            elif path == Expert.TEMPORAL:
                out[path] = per_video(seq).mean(axis=1)
            else:
                out[path] = getitem(seq.tokens, (slice(None), 0, slice(None)))
        return out

    def classification_head(self, features: dict[Expert, TokenSequence]) -> Tensor:
        """logits = (Σ_path ADAP(LN(summary_path))) W + b."""
        fused = None
        for path, summary in self.summaries(features).items():
            normed = apply_layer_norm(summary, self.head.final_ln[path], self.config.ln_eps)
            delta = adapter_delta(normed, self.head.adapters[path])
            fused = delta if fused is None else fused + delta
        return self.head.classifier(fused)

    def forward(
        self,
        video: VideoBatch | None,
        audio: SpectrogramBatch | None = None,
        *,
        training: bool = False,
        rng: np.random.Generator | None = None,
        capture: AttentionCapture | None = None,
    ) -> Tensor:
        """Logits [B, num_classes]."""
        return self.classification_head(self.encode(video, audio, training=training, rng=rng, capture=capture))

    __call__ = forward

    def key_layouts(self) -> dict[Expert, KeyLayout]:
        """Per-video token layout of each path, as recorded alongside attention dumps."""
        cfg = self.config
        t, (gh, gw) = cfg.temporal_frames, cfg.grid
        layouts = {
            Expert.SPATIAL: KeyLayout(Expert.SPATIAL, t, cfg.num_patches + 1, gh, gw, True),
            Expert.TEMPORAL: KeyLayout(Expert.TEMPORAL, t, t * cfg.num_patches, gh, gw, False),
            Expert.AUDIO: KeyLayout(Expert.AUDIO, cfg.audio_grid[0], cfg.audio_patches + 1, *cfg.audio_grid, True),
        }
        return {p: layouts[p] for p in cfg.paths}


# Construction


def _build_embeds(store: ParameterStore, cfg: ModelConfig) -> dict[Expert, PatchEmbedParams]:
    dim, p, c = cfg.embed_dim, cfg.patch_size, cfg.channels
    embeds = {}
    if Expert.SPATIAL in cfg.paths:
        embeds[Expert.SPATIAL] = PatchEmbedParams(
            proj=store.linear("spatial.patch", p * p * c, dim, trainable=False, layer=0),
            pos=store.uniform("spatial.pos", (cfg.num_patches + 1, dim), dim, trainable=False, layer=0, decay=False),
            cls=store.uniform("spatial.cls", (dim,), dim, trainable=False, layer=0, decay=False),
        )
    if Expert.TEMPORAL in cfg.paths:
        tokens = cfg.temporal_frames * cfg.num_patches
        embeds[Expert.TEMPORAL] = PatchEmbedParams(
            proj=store.linear("temporal.patch", 2 * p * p * c, dim, trainable=False, layer=0),
            pos=store.uniform("temporal.pos", (tokens, dim), dim, trainable=False, layer=0, decay=False),
        )
    if Expert.AUDIO in cfg.paths:
        embeds[Expert.AUDIO] = PatchEmbedParams(
            proj=store.linear("audio.patch", cfg.audio_patch**2, dim, trainable=False, layer=0),
            pos=store.uniform("audio.pos", (cfg.audio_patches + 1, dim), dim, trainable=False, layer=0, decay=False),
            cls=store.uniform("audio.cls", (dim,), dim, trainable=False, layer=0, decay=False),
        )
    return embeds


def _build_block(store: ParameterStore, cfg: ModelConfig, path: Expert, layer: int) -> ExpertBlockParams:
    dim, prefix = cfg.embed_dim, f"{path.value}.block{layer}"
    return ExpertBlockParams(
        ln_attn=store.layer_norm(f"{prefix}.ln_attn", dim, trainable=False, layer=layer),
        attn=store.attention(f"{prefix}.attn", dim, cfg.heads, trainable=False, layer=layer),
        adapter_attn=store.adapter(f"{prefix}.adapter_attn", dim, cfg.adapter_dim, layer=layer),
        ln_ffn=store.layer_norm(f"{prefix}.ln_ffn", dim, trainable=False, layer=layer),
        ffn=FeedForwardParams(
            fc1=store.linear(f"{prefix}.ffn.fc1", dim, 4 * dim, trainable=False, layer=layer),
            fc2=store.linear(f"{prefix}.ffn.fc2", 4 * dim, dim, trainable=False, layer=layer),
        ),
        adapter_ffn=store.adapter(f"{prefix}.adapter_ffn", dim, cfg.adapter_dim, layer=layer),
    )


def _build_exchange(store: ParameterStore, cfg: ModelConfig, layer: int) -> ExchangeTopology:
    dim, d = cfg.embed_dim, cfg.bca_dim
    receivers = _receivers(cfg)

    projections = {}
    for e in _bca_experts(cfg):
        prefix = f"{e.value}.block{layer}.bca"
        w_up = None
        if e in receivers:
            w_up = store.constant(f"{prefix}.w_up", (d, dim), 0.0, trainable=True, layer=layer)
        projections[e] = BottleneckProjection(
            w_down=store.uniform(f"{prefix}.w_down", (dim, d), dim, trainable=True, layer=layer),
            ln=store.layer_norm(f"{prefix}.ln", d, trainable=True, layer=layer),
            w_up=w_up,
        )

    sources: dict[tuple[tuple[Expert, Expert], Expert], EmbedSource] = {}
    for pair in cfg.pairs:
        kind = cfg.embed_kind_for(pair)
        for side in pair:
            table = None
            if kind == EmbedKind.POSITIONAL:
                table = store.uniform(
                    f"{side.value}.block{layer}.bca.pos_{_other(pair, side).value}",
                    (cfg.tokens_per_video(side), d),
                    d,
                    trainable=True,
                    layer=layer,
                    decay=False,
                )
            sources[(pair, side)] = EmbedSource(kind=kind, table=table)

    directions = {}
    for direction in cfg.directions:
        query, key = direction.query, direction.key
        pair = _pair_of(cfg, query, key)
        directions[direction.name] = BcaParams(
            direction=direction,
            xattn=store.attention(
                f"{query.value}.block{layer}.bca.{direction.name}", d, cfg.bca_heads, trainable=True, layer=layer
            ),
            query_proj=projections[query],
            key_proj=projections[key],
            query_embed=sources[(pair, query)],
            key_embed=sources[(pair, key)],
            window=cfg.window_for(direction),
        )
    return ExchangeTopology(variant=cfg.variant, projections=projections, directions=directions)


def _build_time_mlp(store: ParameterStore, cfg: ModelConfig) -> TimeIntervalMLP | None:
    if not cfg.uses_time_embedding:
        return None
    hidden, d = cfg.time_hidden, cfg.bca_dim
    return TimeIntervalMLP(
        fc1=store.linear("time_mlp.fc1", 2, hidden, trainable=True, layer=1),
        fc2=store.linear("time_mlp.fc2", hidden, d, trainable=True, layer=1),
        cls_rows={
            path: store.uniform(f"time_mlp.cls_{path.value}", (d,), d, trainable=True, layer=1, decay=False)
            for path in _time_cls_paths(cfg)
        },
    )


def _build_head(store: ParameterStore, cfg: ModelConfig) -> HeadParams:
    dim, layer = cfg.embed_dim, cfg.depth + 1
    final_ln, adapters = {}, {}
    for path in cfg.fused_paths:
        final_ln[path] = store.layer_norm(f"head.{path.value}.ln", dim, trainable=True, layer=layer)
        adapters[path] = store.adapter(f"head.{path.value}.adapter", dim, cfg.adapter_dim, layer=layer)
    classifier = LinearParams(
        w=store.uniform("head.classifier.w", (dim, cfg.num_classes), dim, trainable=True, layer=layer),
        b=store.constant("head.classifier.b", (cfg.num_classes,), 0.0, trainable=True, layer=layer, decay=False),
    )
    return HeadParams(final_ln=final_ln, adapters=adapters, classifier=classifier)


def build(config: ModelConfig, init_weights: str | Path | None = None, dtype=np.float32) -> Model:
    """
    Construct a model deterministically from ``config.seed``.

    Args:
        config: Architecture descriptor
        init_weights: Optional checkpoint whose tensors replace the initial values (a subset is allowed)
        dtype: Parameter dtype

    Returns:
        Model with frozen experts and zero-initialised up-projections

    Raises:
        CheckpointError: If ``init_weights`` holds unknown or mismatched tensors
    """
    store = ParameterStore(config.seed, dtype)
    embeds = _build_embeds(store, config)
    layers = range(1, config.depth + 1)
    blocks = {path: [_build_block(store, config, path, layer) for layer in layers] for path in config.paths}
    exchanges = []
    if config.directions:
        exchanges = [_build_exchange(store, config, layer) for layer in layers]
    time_mlp = _build_time_mlp(store, config)
    head = _build_head(store, config)
    model = Model(config, store, embeds, blocks, exchanges, time_mlp, head)
    logger.debug(
        f"Built {config.variant.value}: {len(store)} tensors, {sum(p.size for p in store.trainable())} trainable values"
    )
    if init_weights is not None:
        load_state(model, init_weights)
    return model


def trainable_parameters(model: Model) -> list[Parameter]:
    """Trainable parameters in construction order; shared groups appear once."""
    return model.parameters.trainable()


def count_trainable(config: ModelConfig) -> int:
    """Closed-form number of trainable values for ``config``, without building the model."""
    dim, a, d, k = config.embed_dim, config.adapter_dim, config.bca_dim, config.num_classes
    total = len(config.paths) * config.depth * 2 * (2 * dim * a)

    per_block = 0
    receivers = _receivers(config)
    for e in _bca_experts(config):
        per_block += dim * d + 2 * d + (d * dim if e in receivers else 0)
    for pair in config.pairs:
        if config.embed_kind_for(pair) == EmbedKind.POSITIONAL:
            per_block += d * sum(config.tokens_per_video(side) for side in pair)
    per_block += len(config.directions) * 3 * d * d
    if config.directions:
        total += config.depth * per_block

    if config.uses_time_embedding:
        hidden = config.time_hidden
        total += 2 * hidden + hidden + hidden * d + d + d * len(_time_cls_paths(config))

    total += len(config.fused_paths) * (2 * dim + 2 * dim * a) + dim * k + k
    return total


def randomize_zero_inits(model: Model, seed: int, scale: float = 0.1) -> list[str]:
    """
    Give every all-zero trainable tensor small random values from stream ``perturb/<name>``.

    Zero up-projections make the adapters and exchanges inert, which hides their gradients;
    gradient checks and equivalence tests perturb them first.

    Returns:
        Names of the perturbed parameters
    """
    changed = []
    for p in model.parameters.trainable():
        if np.any(p.value.data):
            continue
        values = stream(seed, f"perturb/{p.name}").uniform(-scale, scale, size=p.shape)
        p.assign(values.astype(p.value.dtype))
        changed.append(p.name)
    return changed


def cast_copy(model: Model, dtype) -> Model:
    """Independent model with the same parameter values cast to ``dtype``."""
    other = build(model.config, dtype=dtype)
    for p in other.parameters:
        p.assign(model.parameters[p.name].value.data)
    return other


# Checkpoints


def save_checkpoint(model: Model, path: str | Path, names: list[str] | None = None) -> Path:
    """
    Write all parameters (or only ``names``) to an XAVT checkpoint.

    Raises:
        CheckpointError: If a requested name is not a model parameter
    """
    if names is not None:
        missing = sorted(set(names) - set(model.parameters.names()))
        if missing:
            raise CheckpointError(f"not model parameters: {', '.join(missing)}")
    selected = model.parameters if names is None else [model.parameters[n] for n in names]
    records = [TensorRecord(name=p.name, data=p.value.data, trainable=p.trainable) for p in selected]
    path = write_container(path, CHECKPOINT_MAGIC, records)
    logger.info(f"Saved {len(records)} tensors to {path}")
    return path


def load_state(model: Model, path: str | Path) -> list[str]:
    """
    Replace parameter values with the tensors of a checkpoint; absent names keep their values.

    Returns:
        Names that were loaded

    Raises:
        CheckpointError: Listing every unknown name and every shape mismatch
    """
    records = read_container(path, CHECKPOINT_MAGIC)
    unknown = [r.name for r in records if r.name not in model.parameters]
    mismatched = [
        f"{r.name} {tuple(r.data.shape)} != {model.parameters[r.name].shape}"
        for r in records
        if r.name in model.parameters and tuple(r.data.shape) != model.parameters[r.name].shape
    ]
    if unknown or mismatched:
        problems = [f"unknown: {name}" for name in unknown] + [f"shape mismatch: {m}" for m in mismatched]
        raise CheckpointError(f"{path} does not match the model: " + "; ".join(problems))
    for record in records:
        param = model.parameters[record.name]
        if record.trainable != param.trainable:
            logger.warning(f"{record.name}: checkpoint trainable flag {record.trainable} differs from the model's")
        param.assign(record.data)
    logger.info(f"Loaded {len(records)} tensors from {path}")
    return [r.name for r in records]


def load_checkpoint(path: str | Path, config: ModelConfig) -> Model:
    """Build ``config`` and load a checkpoint into it."""
    return build(config, init_weights=path)
