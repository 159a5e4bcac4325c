"""I/O utilities: directories, logging, and the little-endian binary containers.

Three on-disk formats share one reader/writer family:
    XAVC: one synthetic sample (video, spectrogram, label)
    XAVT: model checkpoint (named tensors with a trainable flag)
    XAVA: attention dump (named weight tensors, same layout as XAVT)
"""

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.lib.errors import CheckpointError, ContractError

logger = logging.getLogger(__name__)

CONTAINER_VERSION = 1
CHECKPOINT_MAGIC = b"XAVT"
ATTENTION_MAGIC = b"XAVA"
CLIP_MAGIC = b"XAVC"

_F32 = np.dtype("<f4")


def validate_input_file(input_path: str | Path) -> Path:
    """
    Validate that an input file exists.

    Args:
        input_path: Path to the file

    Returns:
        Resolved Path

    Raises:
        ContractError: If the path does not exist or is not a file
    """
    path = Path(input_path).resolve()
    if not path.exists():
        raise ContractError(f"Input file does not exist: {input_path}")
    if not path.is_file():
        raise ContractError(f"Input path is not a file: {input_path}")
    return path


def ensure_output_directory(output_dir: str | Path) -> Path:
    """
    Ensure the output directory exists, creating it if necessary.

    Args:
        output_dir: Path to output directory

    Returns:
        Path object for the created/existing directory

    Raises:
        ContractError: If the path exists but is not a directory
    """
    path = Path(output_dir).resolve()
    if path.exists() and not path.is_dir():
        raise ContractError(f"Output path exists but is not a directory: {output_dir}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def setup_logging(level: int = logging.INFO) -> None:
    """
    Configure logging for command-line runs.

    Args:
        level: Logging level (default: INFO)
    """
    logging.basicConfig(
        level=level,
        format="%(levelname)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def canonical_bytes(array: np.ndarray) -> bytes:
    """Row-major little-endian float32 bytes of ``array``."""
    return np.ascontiguousarray(array, dtype=_F32).tobytes()


def tensor_checksum(array: np.ndarray) -> str:
    return hashlib.sha256(canonical_bytes(array)).hexdigest()


# Named-tensor containers (XAVT / XAVA)


@dataclass
class TensorRecord:
    """One named tensor of a container."""

    name: str
    data: np.ndarray
    trainable: bool = False


def write_container(path: str | Path, magic: bytes, records: list[TensorRecord]) -> Path:
    """
    Write named tensors in lexicographic name order.

    Raises:
        CheckpointError: On duplicate names
    """
    names = [r.name for r in records]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise CheckpointError(f"duplicate tensor names: {', '.join(duplicates)}")

    chunks = [magic, struct.pack("<IQ", CONTAINER_VERSION, len(records))]
    for record in sorted(records, key=lambda r: r.name):
        name = record.name.encode("utf-8")
        data = np.asarray(record.data)
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<BI", int(record.trainable), data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(canonical_bytes(data))

    path = Path(path)
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Wrote {len(records)} tensors to {path}")
    return path


class _Reader:
    def __init__(self, blob: bytes, source: Path):
        self.blob = blob
        self.offset = 0
        self.source = source

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.blob):
            raise CheckpointError(f"{self.source}: truncated at byte {self.offset} (needed {size} more)")
        chunk = self.blob[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str | Path, magic: bytes) -> list[TensorRecord]:
    """
    Read a named-tensor container.

    Raises:
        CheckpointError: On bad magic, unsupported version, truncation, trailing bytes or duplicate names
    """
    path = Path(path)
    try:
        reader = _Reader(path.read_bytes(), path)
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e

    found = reader.take(len(magic))
    if found != magic:
        raise CheckpointError(f"{path}: bad magic {found!r}, expected {magic!r}")
    version, count = reader.unpack("<IQ")
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    records: list[TensorRecord] = []
    seen: set[str] = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        if name in seen:
            raise CheckpointError(f"{path}: duplicate tensor name {name}")
        seen.add(name)
        trainable, rank = reader.unpack("<BI")
        shape = reader.unpack(f"<{rank}Q")
        data = np.frombuffer(reader.take(4 * math.prod(shape)), dtype=_F32).reshape(shape)
        records.append(TensorRecord(name=name, data=data.astype(np.float32), trainable=bool(trainable)))
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path}: {len(reader.blob) - reader.offset} trailing bytes after {count} tensors")
    return records


# Synthetic sample files (XAVC)


def write_clip(path: str | Path, video: np.ndarray, spectrogram: np.ndarray, label: int) -> Path:
    """Write one sample: video [2T, H, W, C], spectrogram [T_spec, mel_bins], label."""
    if video.ndim != 4 or spectrogram.ndim != 2:
        raise ContractError(
            f"clip needs video [2T,H,W,C] and spectrogram [T,F]; got {video.shape}, {spectrogram.shape}"
        )
    header = struct.pack("<I7Q", CONTAINER_VERSION, 1, *video.shape, *spectrogram.shape)
    path = Path(path)
    path.write_bytes(
        CLIP_MAGIC + header + canonical_bytes(video) + canonical_bytes(spectrogram) + struct.pack("<I", label)
    )
    return path


def read_clip(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    """
    Read one XAVC sample.

    Returns:
        Tuple of (video [2T, H, W, C], spectrogram [T_spec, mel_bins], label)

    Raises:
        CheckpointError: On bad magic, version, batch count or size
    """
    path = Path(path)
    try:
        reader = _Reader(path.read_bytes(), path)
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    found = reader.take(4)
    if found != CLIP_MAGIC:
        raise CheckpointError(f"{path}: bad magic {found!r}, expected {CLIP_MAGIC!r}")
    version, batch, frames, height, width, channels, spec_frames, mel_bins = reader.unpack("<I7Q")
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if batch != 1:
        raise CheckpointError(f"{path}: clip files hold one sample, header says {batch}")
    video_shape = (frames, height, width, channels)
    video = np.frombuffer(reader.take(4 * math.prod(video_shape)), dtype=_F32).reshape(video_shape)
    spec = np.frombuffer(reader.take(4 * spec_frames * mel_bins), dtype=_F32).reshape(spec_frames, mel_bins)
    (label,) = reader.unpack("<I")
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path}: trailing bytes after label")
    return video.astype(np.float32), spec.astype(np.float32), int(label)


def write_index(path: str | Path, rows: list[tuple[str, int]]) -> Path:
    """Write ``path<TAB>label`` lines."""
    path = Path(path)
    path.write_text("".join(f"{name}\t{label}\n" for name, label in rows), encoding="utf-8")
    return path


def read_index(path: str | Path) -> list[tuple[Path, int]]:
    """
    Read an index file; relative sample paths resolve against the index's directory.

    Raises:
        ContractError: If the file is missing or a line is malformed
    """
    index = validate_input_file(path)
    rows = []
    for number, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ContractError(f"{index}:{number}: expected 'path<TAB>label', got {line!r}")
        try:
            label = int(parts[1])
        except ValueError as e:
            raise ContractError(f"{index}:{number}: label is not an integer: {parts[1]!r}") from e
        rows.append((index.parent / parts[0], label))
    return rows


# Attention-map images


def write_pgm(path: str | Path, grid: np.ndarray) -> Path:
    """Write a binary portable graymap (P5, maxval 255) from a [0, 1] grid."""
    if grid.ndim != 2:
        raise ContractError(f"graymap needs a 2-D grid, got {grid.shape}")
    pixels = np.rint(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a graymap written by :func:`write_pgm` (one header field per line)."""
    parts = Path(path).read_bytes().split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise ContractError(f"{path} is not a binary graymap")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3][: width * height], dtype=np.uint8).reshape(height, width)
