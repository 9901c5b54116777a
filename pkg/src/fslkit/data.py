"""Dataset ingestion, synthetic data generation, and episode sampling.

Samples live on disk as "FSLT" tensor files (see :func:`write_tensor`)
referenced by a JSON manifest that assigns every class to exactly one of
the train/val/test splits. Episodes are sampled deterministically: the
stream for episode ``e`` of an evaluation run is derived by hashing
``(seed, e)``, so parallel or out-of-order evaluation sees identical
episodes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError, TruncatedFileError

FSLT_MAGIC = b"FSLT"
FSLT_VERSION = 1
FSLT_DTYPE_F64 = 1
_MAX_NDIM = 8
_MAX_ELEMENTS = 100_000_000

SPLITS = ("train", "val", "test")
STRIPE_AMPLITUDE = 0.5
_BLOB_GRID = 4


# ----------------------------------------------------------------------
# FSLT tensor files
# ----------------------------------------------------------------------


def write_tensor(path: Path | str, array: np.ndarray) -> None:
    """Write a float64 array: magic, version, dtype code, reserved pad,
    u32 ndim, u32 extents, then the row-major little-endian payload."""
    array = np.asarray(array, dtype=np.float64)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FSLT_MAGIC)
        fh.write(struct.pack("<BBBB", FSLT_VERSION, FSLT_DTYPE_F64, 0, 0))
        fh.write(struct.pack("<I", array.ndim))
        for extent in array.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(array.astype("<f8", copy=False).tobytes())


def _read_exact(fh, count: int, path: Path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"{path}: file ends inside a {count}-byte field")
    return buf


def _read_header(fh, path: Path) -> tuple[int, ...]:
    magic = _read_exact(fh, 4, path)
    if magic != FSLT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    version, dtype, r0, r1 = struct.unpack("<BBBB", _read_exact(fh, 4, path))
    if version != FSLT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != FSLT_DTYPE_F64:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if r0 != 0 or r1 != 0:
        raise FormatError(f"{path}: reserved header bytes must be zero")
    (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
    if ndim > _MAX_NDIM:
        raise FormatError(f"{path}: implausible ndim {ndim}")
    shape = []
    total = 1
    for _ in range(ndim):
        (extent,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if extent < 1:
            raise FormatError(f"{path}: zero extent in shape")
        shape.append(extent)
        total *= extent
    if total > _MAX_ELEMENTS:
        raise FormatError(f"{path}: declared size {total} exceeds the element cap")
    return tuple(shape)


def read_tensor_shape(path: Path | str) -> tuple[int, ...]:
    """Decode only the header of a tensor file."""
    path = Path(path)
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def read_tensor(path: Path | str) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        shape = _read_header(fh, path)
        count = int(np.prod(shape)) if shape else 1
        payload = _read_exact(fh, count * 8, path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


# ----------------------------------------------------------------------
# dataset index
# ----------------------------------------------------------------------


@dataclass
class SampleRecord:
    path: Path
    class_id: int
    byte_length: int


@dataclass
class DatasetIndex:
    """Validated class-keyed view over a manifest's tensor files."""

    root: Path
    name: str
    image_shape: tuple[int, int, int]
    class_names: list[str]
    splits: dict[str, list[str]]
    samples: dict[str, list[SampleRecord]]
    _cache: dict[Path, np.ndarray] = field(default_factory=dict, repr=False)

    def split_classes(self, split: str) -> list[str]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.splits[split]

    def load(self, record: SampleRecord) -> np.ndarray:
        cached = self._cache.get(record.path)
        if cached is None:
            cached = read_tensor(record.path)
            self._cache[record.path] = cached
        return cached


def load_dataset(manifest_path: Path | str) -> DatasetIndex:
    """Parse and fully validate a manifest.

    Rejects split overlaps, classes without a split or without samples,
    and any tensor file whose shape disagrees with the manifest.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    for key in ("name", "image_shape", "splits", "classes"):
        if key not in doc:
            raise FormatError(f"{manifest_path}: missing manifest key {key!r}")
    shape = tuple(int(v) for v in doc["image_shape"])
    if len(shape) != 3 or any(v < 1 for v in shape):
        raise FormatError(f"{manifest_path}: image_shape must be [C, H, W]")

    splits_doc = doc["splits"]
    for split in SPLITS:
        if split not in splits_doc:
            raise FormatError(f"{manifest_path}: splits must include {split!r}")
    assignment: dict[str, str] = {}
    for split in SPLITS:
        for cls in splits_doc[split]:
            if cls in assignment:
                raise FormatError(
                    f"{manifest_path}: class {cls!r} appears in splits "
                    f"{assignment[cls]!r} and {split!r}"
                )
            assignment[cls] = split

    classes_doc = doc["classes"]
    class_names = list(classes_doc.keys())
    for cls in class_names:
        if cls not in assignment:
            raise FormatError(f"{manifest_path}: class {cls!r} has no split assignment")
    for cls in assignment:
        if cls not in classes_doc:
            raise FormatError(f"{manifest_path}: split references unknown class {cls!r}")

    root = manifest_path.parent
    samples: dict[str, list[SampleRecord]] = {}
    for class_id, cls in enumerate(class_names):
        rel_paths = classes_doc[cls]
        if not rel_paths:
            raise FormatError(f"{manifest_path}: class {cls!r} has no samples")
        records = []
        for rel in rel_paths:
            path = root / rel
            if not path.is_file():
                raise FileNotFoundError(f"missing sample file: {path}")
            file_shape = read_tensor_shape(path)
            if file_shape != shape:
                raise FormatError(
                    f"{path}: shape {file_shape} does not match dataset shape {shape}"
                )
            records.append(SampleRecord(path, class_id, path.stat().st_size))
        samples[cls] = records

    splits = {split: list(splits_doc[split]) for split in SPLITS}
    return DatasetIndex(
        root=root,
        name=str(doc["name"]),
        image_shape=shape,
        class_names=class_names,
        splits=splits,
        samples=samples,
    )


# ----------------------------------------------------------------------
# synthetic aliasing-pair dataset
# ----------------------------------------------------------------------


def _bilinear_np(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-numpy half-pixel bilinear resize of a (C, H, W) array."""
    c, h, w = arr.shape

    def grid(src, dst):
        coords = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        coords = np.clip(coords, 0.0, src - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, coords - lo

    y0, y1, fy = grid(h, out_h)
    x0, x1, fx = grid(w, out_w)
    rows = arr[:, y0, :] + fy[:, None] * (arr[:, y1, :] - arr[:, y0, :])
    return rows[:, :, x0] + fx * (rows[:, :, x1] - rows[:, :, x0])


def _stripe_field(size: int, orientation: int) -> np.ndarray:
    """Single-pixel-period stripes: alternating columns (orientation 0) or
    alternating rows (orientation 1). Either orientation averages to zero
    over any aligned 2x2 window, so 2x bilinear downsampling erases it."""
    alt = STRIPE_AMPLITUDE * np.where(np.arange(size) % 2 == 0, 1.0, -1.0)
    if orientation == 0:
        return np.broadcast_to(alt[None, :], (size, size)).copy()
    return np.broadcast_to(alt[:, None], (size, size)).copy()


def generate_synthetic(
    out_dir: Path | str,
    num_classes: int = 40,
    samples_per_class: int = 20,
    image_size: int = 32,
    noise_sigma: float = 0.05,
    seed: int = 0,
) -> Path:
    """Write an aliasing-pair dataset and return its manifest path.

    Classes come in pairs: both members share one random smooth blob (the
    low-frequency content) and differ only in a single-pixel-period stripe
    pattern, one member striped along each image axis. Bilinear 2x
    downsampling cancels the stripes exactly, so downsampled pair members
    collapse onto each other while full-resolution images stay far apart.
    Splits are assigned at pair granularity (roughly 64/16/20 percent of
    classes) so every split keeps its aliasing structure.
    """
    if num_classes < 6 or num_classes % 2 != 0:
        raise ValueError("num_classes must be an even number >= 6 (pairs across 3 splits)")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be positive")
    if image_size < 16 or image_size % 4 != 0:
        raise ValueError("image_size must be >= 16 and divisible by 4")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")

    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    rng = np.random.default_rng(seed)
    num_pairs = num_classes // 2

    class_names = [f"class{i:03d}" for i in range(num_classes)]
    classes_doc: dict[str, list[str]] = {}
    for pair in range(num_pairs):
        coarse = rng.uniform(0.0, 1.0, size=(3, _BLOB_GRID, _BLOB_GRID))
        blob = _bilinear_np(coarse, image_size, image_size)
        for orientation in (0, 1):
            cls = class_names[2 * pair + orientation]
            pattern = _stripe_field(image_size, orientation)[None, :, :]
            cls_dir = data_dir / cls
            cls_dir.mkdir(parents=True, exist_ok=True)
            rel_paths = []
            for j in range(samples_per_class):
                sample = blob + pattern + rng.normal(0.0, noise_sigma, size=(3, image_size, image_size))
                rel = f"data/{cls}/sample{j:03d}.fslt"
                write_tensor(out_dir / rel, sample)
                rel_paths.append(rel)
            classes_doc[cls] = rel_paths

    train_pairs = max(1, round(0.64 * num_pairs))
    val_pairs = max(1, round(0.16 * num_pairs))
    if train_pairs + val_pairs >= num_pairs:
        train_pairs = num_pairs - val_pairs - 1
    splits_doc = {
        "train": class_names[: 2 * train_pairs],
        "val": class_names[2 * train_pairs : 2 * (train_pairs + val_pairs)],
        "test": class_names[2 * (train_pairs + val_pairs) :],
    }

    manifest = {
        "name": f"synthetic-pairs-c{num_classes}-s{samples_per_class}-{image_size}px",
        "image_shape": [3, image_size, image_size],
        "splits": splits_doc,
        "classes": classes_doc,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


# ----------------------------------------------------------------------
# episode sampling
# ----------------------------------------------------------------------


@dataclass
class Episode:
    """One N-way K-shot task with episode-local labels in [0, way)."""

    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    way: int
    shot: int
    query_per_class: int
    class_names: list[str]


def derive_episode_seed(seed: int, episode_index: int) -> int:
    """Independent, order-free stream for episode ``episode_index``."""
    return int(np.random.SeedSequence((seed, episode_index)).generate_state(1)[0])


def sample_episode_refs(
    index: DatasetIndex,
    split: str,
    way: int,
    shot: int,
    query: int,
    rng_seed: int,
) -> tuple[list[str], list[list[SampleRecord]], list[list[SampleRecord]]]:
    """Choose classes and per-class support/query records without loading
    any tensor data. Fully determined by the arguments."""
    if way < 1 or shot < 1 or query < 0:
        raise ValueError("way and shot must be >= 1 and query >= 0")
    classes = index.split_classes(split)
    if len(classes) < way:
        raise CapacityError(
            f"split {split!r} has {len(classes)} classes; {way}-way episodes need {way}"
        )
    rng = np.random.default_rng(rng_seed)
    chosen = [classes[i] for i in rng.choice(len(classes), size=way, replace=False)]
    support_refs, query_refs = [], []
    for cls in chosen:
        records = index.samples[cls]
        if len(records) < shot + query:
            raise CapacityError(
                f"class {cls!r} has {len(records)} samples; needs {shot + query} "
                f"for {shot}-shot/{query}-query"
            )
        perm = rng.permutation(len(records))
        support_refs.append([records[i] for i in perm[:shot]])
        query_refs.append([records[i] for i in perm[shot : shot + query]])
    return chosen, support_refs, query_refs


def sample_episode(
    index: DatasetIndex,
    split: str,
    way: int,
    shot: int,
    query: int,
    rng_seed: int,
) -> Episode:
    """Sample and load one episode. Support and query index sets are
    disjoint within every class; episode-local labels follow the order in
    which classes were drawn."""
    chosen, support_refs, query_refs = sample_episode_refs(
        index, split, way, shot, query, rng_seed
    )
    support_images, support_labels = [], []
    query_images, query_labels = [], []
    for label, (sup, que) in enumerate(zip(support_refs, query_refs)):
        for rec in sup:
            support_images.append(index.load(rec))
            support_labels.append(label)
        for rec in que:
            query_images.append(index.load(rec))
            query_labels.append(label)
    return Episode(
        support_images=np.stack(support_images),
        support_labels=np.asarray(support_labels, dtype=np.int64),
        query_images=np.stack(query_images) if query_images else np.empty((0, *index.image_shape)),
        query_labels=np.asarray(query_labels, dtype=np.int64),
        way=way,
        shot=shot,
        query_per_class=query,
        class_names=chosen,
    )
