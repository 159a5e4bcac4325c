"""Cross-attention analysis: layer-wise entropy ratio and attention-map export."""

import logging
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from scipy.special import entr

from src.lib.errors import ContractError
from src.lib.io_utils import (
    ATTENTION_MAGIC,
    TensorRecord,
    ensure_output_directory,
    read_container,
    write_container,
    write_pgm,
)
from src.lib.tensor import no_grad
from src.models.types import AttentionDump, Direction, Expert, KeyLayout, Sample
from src.services.model import Model

logger = logging.getLogger(__name__)


def row_entropy_ratio(weights: np.ndarray) -> float:
    """
    Mean of H(row) / ln(num_keys) over every row of ``weights`` [..., keys].

    H = -Σ w ln w with 0 ln 0 = 0. A single key counts as uniform.
    """
    keys = weights.shape[-1]
    if keys == 1:
        return 1.0
    entropy = entr(np.asarray(weights, dtype=np.float64)).sum(axis=-1)
    return float(np.clip(entropy.mean() / math.log(keys), 0.0, 1.0))


def entropy_ratio(dump: AttentionDump, layer: int, direction: str) -> float:
    """
    Entropy ratio of one (layer, direction) entry: 1 for uniform rows, 0 for one-hot rows.

    Raises:
        KeyError: If the dump has no such entry
    """
    return row_entropy_ratio(dump.get(layer, direction))


def capture_attention(model: Model, sample: Sample) -> AttentionDump:
    """Run one sample through ``model`` and record every cross-attention weight tensor."""
    if not model.exchanges:
        raise ContractError(f"{model.config.variant.value} with exchange disabled has no cross attention to record")
    capture: dict[tuple[int, str], np.ndarray] = {}
    with no_grad():
        model.encode(sample.video, sample.audio, capture=capture)
    weights = {key: np.asarray(w[0], dtype=np.float32) for key, w in capture.items()}
    return AttentionDump(sample_id=sample.sample_id, weights=weights, layouts=model.key_layouts())


def entropy_curve(model: Model, samples: Sequence[Sample], direction: str) -> list[float]:
    """
    Per-layer entropy ratio of ``direction`` averaged over ``samples``.

    Raises:
        ContractError: If the model has no such direction or ``samples`` is empty
    """
    name = Direction.parse(direction).name
    if name not in {d.name for d in model.config.directions}:
        raise ContractError(f"{model.config.variant.value} model has no {name} cross attention")
    if not samples:
        raise ContractError("entropy curve needs at least one sample")
    per_sample = []
    for sample in samples:
        dump = capture_attention(model, sample)
        per_sample.append([entropy_ratio(dump, layer, name) for layer in range(1, model.config.depth + 1)])
    curve = np.mean(per_sample, axis=0)
    logger.info(f"{name} entropy ratio over {len(samples)} samples: {np.round(curve, 4).tolist()}")
    return [float(v) for v in curve]


def write_curve(curve: Sequence[float], path: str | Path) -> Path:
    """Write a ``layer<TAB>ratio`` table, layers numbered from 1."""
    path = Path(path)
    lines = ["layer\tratio"] + [f"{layer}\t{ratio:.6f}" for layer, ratio in enumerate(curve, start=1)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# Dumps


def save_dump(dump: AttentionDump, path: str | Path) -> Path:
    """Write an XAVA container with ``layer{L}.{dir}`` weights and ``layout.{path}`` metadata."""
    records = [TensorRecord(f"layer{layer}.{name}", w) for (layer, name), w in dump.weights.items()]
    records += [TensorRecord(f"layout.{expert.value}", layout.as_array()) for expert, layout in dump.layouts.items()]
    return write_container(path, ATTENTION_MAGIC, records)


def load_dump(path: str | Path) -> AttentionDump:
    """
    Read an XAVA container; the sample id is the file stem.

    Raises:
        CheckpointError: If the container is malformed
        ContractError: If an entry name is not recognised
    """
    path = Path(path)
    weights, layouts = {}, {}
    for record in read_container(path, ATTENTION_MAGIC):
        prefix, _, rest = record.name.partition(".")
        if prefix == "layout":
            expert = Expert(rest)
            layouts[expert] = KeyLayout.from_array(expert, record.data)
        elif prefix.startswith("layer") and prefix[5:].isdigit():
            weights[(int(prefix[5:]), Direction.parse(rest).name)] = np.asarray(record.data)
        else:
            raise ContractError(f"{path}: unexpected entry {record.name}")
    return AttentionDump(sample_id=path.stem, weights=weights, layouts=layouts)


# Maps


def key_grid(weights: np.ndarray, layout: KeyLayout) -> np.ndarray:
    """
    Arrange one query's key weights [keys] as [frames, grid_h, grid_w].

    Raises:
        ContractError: If the key layout has no (frame, patch) structure
    """
    if layout.layout == Expert.AUDIO:
        raise ContractError("audio keys have no spatial (frame, patch) layout to map")
    per_frame = layout.grid_h * layout.grid_w
    if weights.size != layout.frames * (layout.tokens_per_row if layout.has_cls else per_frame):
        raise ContractError(f"{weights.size} key weights do not fit layout {layout}")
    frames = weights.reshape(layout.frames, -1)
    if layout.has_cls:
        frames = frames[:, 1:]
    return frames.reshape(layout.frames, layout.grid_h, layout.grid_w)


def _write_grid_table(path: Path, grids: np.ndarray) -> None:
    blocks = []
    for grid in grids:
        blocks.append("\n".join("\t".join(f"{v:.6f}" for v in row) for row in grid))
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


def _render_png(path: Path, grids: np.ndarray, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(grids), figsize=(2.5 * len(grids), 2.8), squeeze=False)
    for frame, (ax, grid) in enumerate(zip(axes[0], grids, strict=True)):
        ax.imshow(grid, cmap="YlOrRd", vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(f"frame {frame}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title, fontsize=11, weight="bold")
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def export_attention_map(
    dump: AttentionDump,
    layer: int,
    direction: str,
    out_dir: str | Path,
    query: int = 0,
    png: bool = False,
) -> np.ndarray:
    """
    Write the key attention of one query as per-frame graymaps and a numeric grid file.

    Weights are averaged over heads, class-token keys are dropped, and the grid is divided
    by its maximum over all frames. Query 0 is the class token for spatial and audio queries.

    Args:
        dump: Attention dump of one sample
        layer: Layer index, 1-based
        direction: Direction name such as ``S2A``
        out_dir: Output directory
        query: Query token index within the per-video flattened sequence
        png: Also render a heatmap with matplotlib

    Returns:
        Normalised grids [frames, grid_h, grid_w]

    Raises:
        ContractError: If the key side has no spatial layout or ``query`` is out of range
        KeyError: If the dump has no such entry
    """
    d = Direction.parse(direction)
    if d.key not in dump.layouts:
        raise ContractError(f"dump has no layout for {d.key.value} keys")
    weights = dump.get(layer, d.name)
    if not 0 <= query < weights.shape[1]:
        raise ContractError(f"query {query} outside [0, {weights.shape[1]})")
    grids = key_grid(weights[:, query, :].mean(axis=0), dump.layouts[d.key])
    peak = grids.max()
    if peak > 0:
        grids = grids / peak

    out = ensure_output_directory(out_dir)
    stem = f"{d.name}_layer{layer}"
    for frame, grid in enumerate(grids):
        write_pgm(out / f"{stem}_frame{frame}.pgm", grid)
    _write_grid_table(out / f"{stem}.tsv", grids)
    if png:
        _render_png(out / f"{stem}.png", grids, f"{d.name} layer {layer}, query {query}")
    logger.info(f"Wrote {len(grids)} {d.name} attention maps to {out}")
    return grids
