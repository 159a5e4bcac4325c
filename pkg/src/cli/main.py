"""CLI entry point for audio-visual expert transformers: data, training, evaluation, verification, analysis."""

import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from src.lib.config import RunConfig, dump_run_config, load_run_config
from src.lib.errors import CheckpointError, ConfigError, ContractError, VerificationError
from src.lib.gradcheck import NumericReference, grad_check
from src.lib.io_utils import CHECKPOINT_MAGIC, ensure_output_directory, read_container, setup_logging, tensor_checksum
from src.lib.rng import stream
from src.models.types import (
    SYNTH_PRESETS,
    CorruptionKind,
    CropPolicy,
    ModelConfig,
    SpectrogramBatch,
    SynthSpec,
    Variant,
    VideoBatch,
    ViewSpec,
)
from src.services.analysis import (
    capture_attention,
    entropy_curve,
    export_attention_map,
    load_dump,
    save_dump,
    write_curve,
)
from src.services.model import build, cast_copy, randomize_zero_inits, save_checkpoint
from src.services.synthdata import generate, load_dataset, write_dataset
from src.services.training import cross_entropy, evaluate, train

logger = logging.getLogger(__name__)

EXIT_UNEXPECTED = 1
EXIT_CONTRACT = 2
EXIT_VERIFICATION = 3

CHECKPOINT_NAME = "model.xavt"
TRAIN_LOG_NAME = "train.log"
CONFIG_NAME = "config.env"


@dataclass(frozen=True)
class GradCheckSettings:
    """Per-precision finite-difference step, error floor, absolute slack and pass bar."""

    dtype: type
    h: float
    floor: float
    atol: float
    tolerance: float


GRADCHECK_SETTINGS = {
    "64": GradCheckSettings(np.float64, h=1e-3, floor=1e-8, atol=1e-11, tolerance=1e-6),
    "32": GradCheckSettings(np.float32, h=1e-3, floor=1e-6, atol=1e-8, tolerance=1e-3),
}

_VARIANTS = click.Choice([v.value for v in Variant], case_sensitive=False)


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Map library exceptions onto the documented exit codes."""
    try:
        yield
    except (ContractError, ConfigError, CheckpointError, KeyError) as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_CONTRACT)
    except VerificationError as e:
        click.echo(f"Error: {e}", err=True)
        sys.exit(EXIT_VERIFICATION)
    except Exception as e:
        click.echo(f"Unexpected error: {e}", err=True)
        sys.exit(EXIT_UNEXPECTED)


def _run_config(config: str | None, **overrides) -> RunConfig:
    return load_run_config(config, overrides={k: v for k, v in overrides.items() if v is not None})


def _require(value: str | None, what: str) -> str:
    if not value:
        raise ConfigError(f"{what} is required (flag or config key)")
    return value


def _load_model(run: RunConfig, checkpoint: str | None):
    model = build(run.model, init_weights=checkpoint)
    if checkpoint is None:
        logger.warning("No checkpoint given; using freshly initialised weights")
    return model


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging")
def cli(verbose: bool):
    """Cross-attention audio-visual expert transformers (CAST / CAVA / CA2ST)."""
    setup_logging(logging.DEBUG if verbose else logging.INFO)


@cli.command()
@click.option(
    "--spec",
    "spec_name",
    default="xor2x2",
    show_default=True,
    type=click.Choice(sorted(SYNTH_PRESETS)),
    help="Synthetic dataset recipe",
)
@click.option("--seed", default=0, show_default=True, type=int, help="Dataset seed")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
@click.option("--samples-per-class", type=int, help="Samples per class (default: 32)")
@click.option("--preset", default="desk", show_default=True, help="Model preset whose clip geometry to match")
@click.option("--noise", type=float, help="Additive noise level (default: 0.05)")
def gen(spec_name: str, seed: int, out: str, samples_per_class: int | None, preset: str, noise: float | None):
    """
    Generate a synthetic audio-visual dataset.

    Writes one XAVC file per sample and an index.tsv of path<TAB>label lines.
    """
    with _exit_codes():
        geometry = ModelConfig.from_preset(preset)
        options = dict(SYNTH_PRESETS[spec_name])
        if samples_per_class is not None:
            options["samples_per_class"] = samples_per_class
        if noise is not None:
            options["noise"] = noise
        spec = SynthSpec(
            frames=geometry.frames,
            height=geometry.image_height,
            width=geometry.image_width,
            channels=geometry.channels,
            spec_frames=geometry.spec_frames,
            mel_bins=geometry.mel_bins,
            seed=seed,
            **options,
        )
        index = write_dataset(generate(spec), out)
        click.echo(f"Wrote {spec.total} samples ({spec.coupling.value}, {spec.num_classes} classes) to {index.parent}")
        click.echo(f"Index: {index}")


@cli.command("train")
@click.option("--config", "-c", type=click.Path(exists=True, dir_okay=False), help="key=value config file")
@click.option("--variant", type=_VARIANTS, help="Expert combination")
@click.option("--preset", help="Model geometry preset (desk, toy)")
@click.option("--epochs", type=int, help="Training epochs")
@click.option("--seed", type=int, help="Root seed for init, shuffling and drop-path")
@click.option("--index", "train_index", type=click.Path(exists=True, dir_okay=False), help="Training index file")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), help="Checkpoint to start from")
@click.option("--output", "-o", "output_dir", type=click.Path(file_okay=False), help="Output directory")
def train_cmd(
    config: str | None,
    variant: str | None,
    preset: str | None,
    epochs: int | None,
    seed: int | None,
    train_index: str | None,
    resume: str | None,
    output_dir: str | None,
):
    """
    Train adapters, B-CA modules and the head on a dataset index.

    Writes model.xavt, train.log (step, epoch, lr, loss, top1) and the effective
    config.env to the output directory.
    """
    with _exit_codes():
        run = _run_config(
            config,
            variant=variant,
            preset=preset,
            epochs=epochs,
            seed=seed,
            train_index=train_index,
            output_dir=output_dir,
        )
        out = ensure_output_directory(run.output_dir or "runs")
        samples = load_dataset(_require(run.train_index, "training index"), run.frame_rate)
        model = build(run.model, init_weights=resume)
        dump_run_config(run, out / CONFIG_NAME)

        with open(out / TRAIN_LOG_NAME, "w", encoding="utf-8") as log:

            def sink(line: str) -> None:
                click.echo(line)
                log.write(line + "\n")

            job = train(model, samples, run.optim, seed=run.seed, sink=sink)
        checkpoint = save_checkpoint(model, out / CHECKPOINT_NAME)

        click.echo(f"Trained {run.model.variant.value} for {job.epochs} epochs ({job.steps} steps)")
        click.echo(f"Final loss: {job.final_loss:.6f}")
        click.echo(f"Checkpoint: {checkpoint}")


@cli.command("eval")
@click.option(
    "--config",
    "-c",
    "configs",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Config file; give one per checkpoint for a mixed ensemble",
)
@click.option(
    "--checkpoint",
    "checkpoints",
    multiple=True,
    type=click.Path(exists=True, dir_okay=False),
    help="Checkpoint; repeat to average an ensemble",
)
@click.option("--index", "eval_index", type=click.Path(exists=True, dir_okay=False), help="Evaluation index file")
@click.option("--views", help="Temporal views x spatial crops, e.g. 2x3")
@click.option("--crop-policy", type=click.Choice([p.value for p in CropPolicy]), help="Spatial crop placement")
@click.option("--corrupt", help="Audio corruption, e.g. misalignment:1.5, dropout:0.2, gaussian:0.1, pink:0.1")
@click.option("--seed", default=0, show_default=True, type=int, help="Corruption seed")
def eval_cmd(
    configs: tuple[str, ...],
    checkpoints: tuple[str, ...],
    eval_index: str | None,
    views: str | None,
    crop_policy: str | None,
    corrupt: str | None,
    seed: int,
):
    """Multi-view evaluation of one model (or a late-fusion ensemble) over an index file."""
    with _exit_codes():
        if len(configs) > 1 and len(configs) != len(checkpoints):
            raise ConfigError(f"got {len(configs)} configs for {len(checkpoints)} checkpoints")
        runs = [_run_config(c, eval_index=eval_index) for c in configs] or [_run_config(None, eval_index=eval_index)]
        first = runs[0]
        view_spec = first.views
        if views is not None:
            view_spec = ViewSpec.parse(views, CropPolicy(crop_policy) if crop_policy else None)
        elif crop_policy is not None:
            view_spec = ViewSpec(view_spec.temporal_views, view_spec.spatial_crops, CropPolicy(crop_policy))

        members = list(checkpoints) or [None]
        if len(runs) == 1:
            runs = runs * len(members)
        models = [_load_model(run, ckpt) for run, ckpt in zip(runs, members, strict=True)]
        samples = load_dataset(_require(first.eval_index, "evaluation index"), first.frame_rate)
        corruption = CorruptionKind.parse(corrupt) if corrupt else None

        result = evaluate(models, samples, view_spec, corruption, seed)
        click.echo(f"samples\t{result.num_samples}")
        click.echo(f"views\t{view_spec.temporal_views}x{view_spec.spatial_crops}")
        click.echo(f"top1\t{result.top1:.6f}")
        click.echo(f"weighted_f1\t{result.weighted_f1:.6f}")
        for label, f1 in enumerate(result.per_class_f1):
            click.echo(f"f1[{label}]\t{f1:.6f}")


@cli.command()
@click.option("--variant", default="CA2ST", show_default=True, type=_VARIANTS, help="Expert combination")
@click.option("--toy", is_flag=True, help="Use the toy geometry (depth 2, D=32)")
@click.option("--precision", default="64", show_default=True, type=click.Choice(["32", "64"]), help="Float width")
@click.option("--h", "step", type=float, help="Finite-difference step (default: 1e-3)")
@click.option("--tolerance", type=float, help="Maximum relative error (default: 1e-6 at 64-bit, 1e-3 at 32-bit)")
@click.option("--max-elements", default=6, show_default=True, type=int, help="Entries checked per parameter")
@click.option("--seed", default=0, show_default=True, type=int, help="Seed for weights, inputs and sampling")
def gradcheck(
    variant: str,
    toy: bool,
    precision: str,
    step: float | None,
    tolerance: float | None,
    max_elements: int,
    seed: int,
):
    """
    Check analytic gradients of the full model against central differences.

    Analytic gradients come from the model at the chosen precision; the finite differences
    always run on a float64 copy. Exits with status 3 when the maximum relative error
    exceeds the tolerance.
    """
    with _exit_codes():
        settings = GRADCHECK_SETTINGS[precision]
        h = step if step is not None else settings.h
        tolerance = tolerance if tolerance is not None else settings.tolerance
        config = ModelConfig.from_preset("toy" if toy else "desk", variant=Variant(variant.upper()), seed=seed)
        model = build(config).astype(settings.dtype)
        randomize_zero_inits(model, seed)
        reference = cast_copy(model, np.float64)

        rng = stream(seed, "gradcheck/inputs")
        batch = 2
        clip = rng.random((batch, config.frames, config.image_height, config.image_width, config.channels))
        spectrogram = rng.random((batch, config.spec_frames, config.mel_bins))
        labels = np.arange(batch) % config.num_classes

        def loss_fn(m, dtype):
            video = VideoBatch(clip.astype(settings.dtype).astype(dtype))
            audio = SpectrogramBatch(spectrogram.astype(settings.dtype).astype(dtype), video.duration_s)
            return lambda _: cross_entropy(m(video, audio), labels)

        report = grad_check(
            loss_fn(model, settings.dtype),
            model.trainable_parameters(),
            h,
            floor=settings.floor,
            atol=settings.atol,
            order=4,
            max_elements=max_elements,
            seed=seed,
            reference=NumericReference(loss_fn(reference, np.float64), reference.trainable_parameters()),
        )
        for name in sorted(report.errors):
            click.echo(f"{name}\t{report.checked[name]}\t{report.errors[name]:.3e}")
        click.echo(f"max relative error {report.max_error:.3e} at {report.worst} (tolerance {tolerance:g})")
        if not report.passed(tolerance):
            raise VerificationError(f"gradient check failed: {report.max_error:.3e} > {tolerance:g}")
        click.echo("PASS")


@cli.command()
@click.option("--config", "-c", type=click.Path(exists=True, dir_okay=False), help="key=value config file")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option("--index", "eval_index", type=click.Path(exists=True, dir_okay=False), help="Dataset index file")
@click.option("--direction", required=True, help="Cross-attention direction, e.g. S2A")
@click.option("--limit", type=int, help="Use only the first N samples")
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Write the layer/ratio table here")
def entropy(
    config: str | None,
    checkpoint: str | None,
    eval_index: str | None,
    direction: str,
    limit: int | None,
    out: str | None,
):
    """Layer-wise cross-attention entropy ratio averaged over a dataset."""
    with _exit_codes():
        run = _run_config(config, eval_index=eval_index)
        model = _load_model(run, checkpoint)
        samples = load_dataset(_require(run.eval_index, "dataset index"), run.frame_rate)
        if limit is not None:
            samples = samples[:limit]
        curve = entropy_curve(model, samples, direction)
        if out:
            write_curve(curve, out)
        click.echo("layer\tratio")
        for layer, ratio in enumerate(curve, start=1):
            click.echo(f"{layer}\t{ratio:.6f}")


@cli.command()
@click.option("--config", "-c", type=click.Path(exists=True, dir_okay=False), help="key=value config file")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), help="Model checkpoint")
@click.option("--index", "eval_index", type=click.Path(exists=True, dir_okay=False), help="Dataset index file")
@click.option("--sample", "sample_number", default=0, show_default=True, type=int, help="Sample position in the index")
@click.option("--dump", "dump_path", type=click.Path(exists=True, dir_okay=False), help="Read an XAVA dump instead")
@click.option("--layer", required=True, type=int, help="Layer, 1-based")
@click.option("--direction", required=True, help="Cross-attention direction, e.g. S2A")
@click.option("--query", default=0, show_default=True, type=int, help="Query token (0 = class token)")
@click.option("--png", is_flag=True, help="Also render a PNG heatmap")
@click.option("--out", "-o", required=True, type=click.Path(file_okay=False), help="Output directory")
def attmap(
    config: str | None,
    checkpoint: str | None,
    eval_index: str | None,
    sample_number: int,
    dump_path: str | None,
    layer: int,
    direction: str,
    query: int,
    png: bool,
    out: str,
):
    """
    Export one query's attention over spatial keys as per-frame graymaps.

    Without --dump, the sample is run through the model and its dump is saved next to the maps.
    """
    with _exit_codes():
        if dump_path:
            dump = load_dump(dump_path)
        else:
            run = _run_config(config, eval_index=eval_index)
            model = _load_model(run, checkpoint)
            samples = load_dataset(_require(run.eval_index, "dataset index"), run.frame_rate)
            if not 0 <= sample_number < len(samples):
                raise ContractError(f"sample {sample_number} outside [0, {len(samples)})")
            dump = capture_attention(model, samples[sample_number])
            saved = save_dump(dump, ensure_output_directory(out) / f"{dump.sample_id}.xava")
            click.echo(f"Dump: {saved}")
        grids = export_attention_map(dump, layer, direction, out, query=query, png=png)
        peak = np.unravel_index(int(np.argmax(grids)), grids.shape)
        click.echo(f"Wrote {grids.shape[0]} maps of {grids.shape[1]}x{grids.shape[2]} to {out}")
        click.echo(f"Peak at frame {peak[0]}, cell ({peak[1]}, {peak[2]})")


@cli.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
def inspect(checkpoint: str):
    """List a checkpoint's tensors: name, shape, trainable flag and SHA-256 of the canonical bytes."""
    with _exit_codes():
        records = read_container(Path(checkpoint), CHECKPOINT_MAGIC)
        for record in records:
            shape = "x".join(str(n) for n in record.data.shape) or "scalar"
            trainable = "trainable" if record.trainable else "frozen"
            click.echo(f"{record.name}\t{shape}\t{trainable}\t{tensor_checksum(record.data)}")
        click.echo(f"{len(records)} tensors, {sum(r.data.size for r in records)} values")


if __name__ == "__main__":
    cli()
