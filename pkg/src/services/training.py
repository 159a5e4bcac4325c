"""Training and evaluation: loss, optimizer, learning-rate schedule, multi-view inference, metrics."""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np
from sklearn.metrics import accuracy_score, f1_score

from src.lib.errors import ContractError
from src.lib.rng import child_seed, stream
from src.lib.tensor import Parameter, Tape, Tensor, no_grad, softmax_cross_entropy
from src.models.types import (
    CorruptionKind,
    CropPolicy,
    EvalMetrics,
    OptimConfig,
    Sample,
    Schedule,
    SpectrogramBatch,
    StepRecord,
    TrainJob,
    VideoBatch,
    ViewSpec,
)
from src.services.model import Model
from src.services.synthdata import corrupt

logger = logging.getLogger(__name__)

LogSink = Callable[[str], None]


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """
    Mean negative log-likelihood over the batch.

    Raises:
        ContractError: If labels are not one per row or fall outside [0, K)
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"need logits [B, K] and labels [B], got {logits.shape} and {labels.shape}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return softmax_cross_entropy(logits, labels, smoothing)


# Schedule and optimizer


def make_schedule(config: OptimConfig, num_samples: int) -> Schedule:
    """Optimizer-step schedule for ``num_samples`` per epoch."""
    if num_samples <= 0:
        raise ContractError("training set is empty")
    steps_per_epoch = math.ceil(num_samples / (config.batch_size * config.update_frequency))
    return Schedule(
        base_lr=config.base_lr,
        warmup_steps=config.warmup_epochs * steps_per_epoch,
        total_steps=config.epochs * steps_per_epoch,
    )


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0 to base_lr, then cosine annealing to 0 at ``total_steps``."""
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = 1.0 if span == 0 else min(1.0, (step - schedule.warmup_steps) / span)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def layer_scale(param: Parameter, depth: int, layer_decay: float) -> float:
    """Layer-wise learning-rate factor decay^(depth - layer): 1 at the last block, 1/decay at the head."""
    return layer_decay ** (depth - param.layer)


@dataclass
class OptimState:
    """Decoupled-weight-decay adaptive moments for the trainable parameters."""

    config: OptimConfig
    depth: int
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: Sequence[Parameter], config: OptimConfig, depth: int) -> "OptimState":
        state = cls(config=config, depth=depth)
        for p in params:
            if p.trainable:
                state.first[p.name] = np.zeros(p.shape, dtype=p.value.dtype)
                state.second[p.name] = np.zeros(p.shape, dtype=p.value.dtype)
        return state


def optimizer_step(state: OptimState, params: Sequence[Parameter], lr: float) -> None:
    """
    Apply one update to every trainable parameter; frozen ones are never written.

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    p <- p - lr * scale * (m_hat / (sqrt(v_hat) + eps) + wd * p)

    Raises:
        ContractError: If a trainable parameter has no gradient or no moments
    """
    cfg = state.config
    missing = [p.name for p in params if p.trainable and p.grad is None]
    if missing:
        raise ContractError(f"missing gradient for trainable parameters: {', '.join(missing)}")
    t = state.step + 1
    correction1 = 1.0 - cfg.beta1**t
    correction2 = 1.0 - cfg.beta2**t
    for p in params:
        if not p.trainable:
            continue
        if p.name not in state.first:
            raise ContractError(f"optimizer state has no moments for {p.name}")
        g = p.grad.data
        m = state.first[p.name] = cfg.beta1 * state.first[p.name] + (1.0 - cfg.beta1) * g
        v = state.second[p.name] = cfg.beta2 * state.second[p.name] + (1.0 - cfg.beta2) * g * g
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        if p.decay and cfg.weight_decay:
            update = update + cfg.weight_decay * p.value.data
        scale = lr * layer_scale(p, state.depth, cfg.layer_decay)
        p.assign(p.value.data - scale * update)
    state.step = t


# Batching


def collate(samples: Sequence[Sample]) -> tuple[VideoBatch, SpectrogramBatch, np.ndarray]:
    """Stack samples into one batch."""
    if not samples:
        raise ContractError("cannot collate an empty batch")
    video = VideoBatch(np.concatenate([s.video.data for s in samples]), samples[0].video.frame_rate)
    audio = SpectrogramBatch(np.concatenate([s.audio.data for s in samples]), samples[0].audio.duration_s)
    labels = np.array([s.label for s in samples], dtype=np.intp)
    return video, audio, labels


def train(
    model: Model,
    samples: Sequence[Sample],
    config: OptimConfig,
    *,
    seed: int = 0,
    sink: LogSink | None = None,
) -> TrainJob:
    """
    Train the trainable parameters of ``model`` on ``samples``.

    Each optimizer step accumulates gradients over ``update_frequency`` micro-batches
    and emits one ``step epoch lr loss top1`` line to ``sink``.

    Args:
        model: Model to train in place
        samples: Training set
        config: Optimizer and schedule hyperparameters
        seed: Root seed of the shuffle and drop-path streams
        sink: Receiver of the per-step log lines

    Returns:
        TrainJob with the per-step history
    """
    params = model.trainable_parameters()
    schedule = make_schedule(config, len(samples))
    state = OptimState.for_parameters(params, config, model.config.depth)
    shuffle = stream(seed, "data/shuffle")
    drop_rng = stream(seed, "drop_path")
    job = TrainJob(start_time=datetime.now())
    logger.info(
        f"Training {len(params)} tensors ({sum(p.size for p in params)} values) "
        f"for {config.epochs} epochs, {schedule.total_steps} steps"
    )

    for epoch in range(config.epochs):
        order = shuffle.permutation(len(samples))
        batches = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        for start in range(0, len(batches), config.update_frequency):
            group = batches[start : start + config.update_frequency]
            lr = lr_at(state.step, schedule)
            loss_sum, correct, seen = 0.0, 0, 0
            for indices in group:
                video, audio, labels = collate([samples[i] for i in indices])
                with Tape() as tape:
                    logits = model(video, audio, training=True, rng=drop_rng)
                    loss = cross_entropy(logits, labels, config.label_smoothing)
                    scaled = loss * (1.0 / len(group))
                tape.backward(scaled)
                loss_sum += loss.item() * len(indices)
                correct += int((logits.data.argmax(axis=1) == labels).sum())
                seen += len(indices)
            optimizer_step(state, params, lr)
            for p in params:
                p.zero_grad()
            record = StepRecord(step=state.step, epoch=epoch, lr=lr, loss=loss_sum / seen, top1=correct / seen)
            job.add_step(record)
            if sink is not None:
                sink(record.as_line())
        logger.info(f"Epoch {epoch + 1}/{config.epochs}: loss {job.final_loss:.4f}")

    job.end_time = datetime.now()
    logger.info(f"Training finished in {job.duration_ms} ms")
    return job


# Inference


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def view_starts(total: int, length: int, count: int) -> list[int]:
    """``count`` evenly spaced window starts covering [0, total - length]."""
    if total < length:
        raise ContractError(f"cannot take a window of {length} from an extent of {total}")
    return [int(round(x)) for x in np.linspace(0, total - length, count)]


def crop_offsets(height: int, width: int, crop_h: int, crop_w: int, views: ViewSpec) -> list[tuple[int, int]]:
    """(top, left) of every spatial crop: evenly spaced along the longer side, or centred."""
    if height < crop_h or width < crop_w:
        raise ContractError(f"cannot crop {crop_h}x{crop_w} from a {height}x{width} frame")
    top, left = (height - crop_h) // 2, (width - crop_w) // 2
    if views.crop_policy == CropPolicy.CENTER:
        return [(top, left)] * views.spatial_crops
    if width >= height:
        return [(top, x) for x in view_starts(width, crop_w, views.spatial_crops)]
    return [(y, left) for y in view_starts(height, crop_h, views.spatial_crops)]


def make_views(model: Model, sample: Sample, views: ViewSpec) -> tuple[VideoBatch, SpectrogramBatch]:
    """
    Batch of temporal_views x spatial_crops inputs cut from one sample.

    The audio window of each temporal view starts at the same relative position as its clip.

    Raises:
        ContractError: If the sample is too short or too small for the requested views
    """
    cfg = model.config
    video, spec = sample.video.data[0], sample.audio.data[0]
    total_frames, height, width = video.shape[:3]
    total_spec = spec.shape[0]
    if spec.shape[1] != cfg.mel_bins:
        raise ContractError(f"sample has {spec.shape[1]} mel bins, model expects {cfg.mel_bins}")
    offsets = crop_offsets(height, width, cfg.image_height, cfg.image_width, views)
    clips, specs = [], []
    for start in view_starts(total_frames, cfg.frames, views.temporal_views):
        audio_start = min(round(start * total_spec / total_frames), total_spec - cfg.spec_frames)
        if audio_start < 0:
            raise ContractError(f"sample spectrogram has {total_spec} frames, model expects {cfg.spec_frames}")
        for top, left in offsets:
            clips.append(video[start : start + cfg.frames, top : top + cfg.image_height, left : left + cfg.image_width])
            specs.append(spec[audio_start : audio_start + cfg.spec_frames])
    duration = cfg.frames / sample.video.frame_rate
    return VideoBatch(np.stack(clips), sample.video.frame_rate), SpectrogramBatch(np.stack(specs), duration)


def multi_view_predict(model: Model, sample: Sample, views: ViewSpec) -> np.ndarray:
    """Class probabilities averaged over every (temporal view, spatial crop) forward."""
    video, audio = make_views(model, sample, views)
    with no_grad():
        logits = model(video, audio)
    return softmax_rows(logits.data.astype(np.float64)).mean(axis=0)


def ensemble_predict(models: Sequence[Model], sample: Sample, views: ViewSpec) -> np.ndarray:
    """Late fusion: average of the multi-view probabilities of independently trained models."""
    if not models:
        raise ContractError("ensemble needs at least one model")
    return np.mean([multi_view_predict(m, sample, views) for m in models], axis=0)


def corrupt_sample(sample: Sample, kind: CorruptionKind, seed: int) -> Sample:
    audio = corrupt(sample.audio, kind, child_seed(seed, f"corrupt/{sample.sample_id}"))
    return Sample(sample_id=sample.sample_id, video=sample.video, audio=audio, label=sample.label)


def predict_dataset(
    models: Model | Sequence[Model],
    samples: Sequence[Sample],
    views: ViewSpec,
    corruption: CorruptionKind | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Probabilities [N, K] for every sample, optionally with corrupted audio."""
    ensemble = [models] if isinstance(models, Model) else list(models)
    rows = []
    for sample in samples:
        if corruption is not None:
            sample = corrupt_sample(sample, corruption, seed)
        rows.append(ensemble_predict(ensemble, sample, views))
    return np.stack(rows)


# Metrics


def metrics(preds: Sequence[int], labels: Sequence[int], num_classes: int | None = None) -> EvalMetrics:
    """
    Top-1 accuracy, per-class F1 and support-weighted F1.

    Raises:
        ContractError: On empty or length-mismatched inputs
    """
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ContractError(f"metrics need equal-length non-empty inputs, got {preds.shape} and {labels.shape}")
    classes = list(range(num_classes if num_classes is not None else int(max(preds.max(), labels.max())) + 1))
    per_class = f1_score(labels, preds, labels=classes, average=None, zero_division=0)
    weighted = f1_score(labels, preds, labels=classes, average="weighted", zero_division=0)
    return EvalMetrics(
        top1=float(accuracy_score(labels, preds)),
        per_class_f1=[float(v) for v in per_class],
        weighted_f1=float(weighted),
        num_samples=int(labels.size),
    )


def harmonic_mean(values: Sequence[float]) -> float:
    """
    n / Σ(1/a_i); 0 when any value is 0.

    Raises:
        ContractError: On empty input or negative values
    """
    values = [float(v) for v in values]
    if not values:
        raise ContractError("harmonic mean of an empty list")
    if any(v < 0 for v in values):
        raise ContractError("harmonic mean needs non-negative values")
    if any(v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


def evaluate(
    models: Model | Sequence[Model],
    samples: Sequence[Sample],
    views: ViewSpec,
    corruption: CorruptionKind | None = None,
    seed: int = 0,
) -> EvalMetrics:
    """Multi-view metrics of a model (or a late-fusion ensemble) on ``samples``."""
    probs = predict_dataset(models, samples, views, corruption, seed)
    labels = [s.label for s in samples]
    result = metrics(probs.argmax(axis=1), labels, probs.shape[1])
    logger.info(f"Evaluated {result.num_samples} samples: top1 {result.top1:.4f}")
    return result
