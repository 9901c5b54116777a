"""Binary checkpoint serialization ("FSCK" format).

Layout: magic ``FSCK``, u8 version, u8 stage tag (1=backbone, 2=joint,
3=finetune), u32 LE block count, then per block a u16 LE name length, the
name bytes, u32 LE ndim, u32 LE extents, and the float64 LE payload; the
file ends with a u64 LE FNV-1a checksum over all payload bytes in block
order. Run metadata (seed, epoch, validation accuracy, resize geometry)
travels as reserved scalar blocks under the ``meta.`` prefix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedFileError

FSCK_MAGIC = b"FSCK"
FSCK_VERSION = 1
STAGE_TO_TAG = {"backbone": 1, "joint": 2, "finetune": 3}
TAG_TO_STAGE = {v: k for k, v in STAGE_TO_TAG.items()}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_MAX_BLOCKS = 65536
_MAX_NDIM = 8
_MAX_ELEMENTS = 100_000_000

# parameter-block prefixes that must be present for each stage tag;
# resizer and head blocks are optional (a run may bypass the resizer)
_REQUIRED_PREFIXES = {
    "backbone": ("backbone.", "metric."),
    "joint": ("backbone.", "metric."),
    "finetune": ("backbone.", "metric."),
}


def fnv1a(data: bytes, state: int = _FNV_OFFSET) -> int:
    for byte in data:
        state = ((state ^ byte) * _FNV_PRIME) & _MASK64
    return state


@dataclass
class Checkpoint:
    """Named parameter arrays plus the run metadata that produced them."""

    stage: str
    blocks: dict[str, np.ndarray]
    seed: int
    epoch: int
    val_accuracy: float
    version: int = field(default=FSCK_VERSION)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            stage=self.stage,
            blocks={k: v.copy() for k, v in self.blocks.items()},
            seed=self.seed,
            epoch=self.epoch,
            val_accuracy=self.val_accuracy,
            version=self.version,
        )


def _meta_blocks(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {
        "meta.seed": np.float64(ckpt.seed),
        "meta.epoch": np.float64(ckpt.epoch),
        "meta.val_accuracy": np.float64(ckpt.val_accuracy),
    }


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    if ckpt.stage not in STAGE_TO_TAG:
        raise FormatError(f"unknown stage {ckpt.stage!r}")
    blocks = dict(_meta_blocks(ckpt))
    blocks.update(ckpt.blocks)
    path = Path(path)
    checksum = _FNV_OFFSET
    with open(path, "wb") as fh:
        fh.write(FSCK_MAGIC)
        fh.write(struct.pack("<BB", FSCK_VERSION, STAGE_TO_TAG[ckpt.stage]))
        fh.write(struct.pack("<I", len(blocks)))
        for name, array in blocks.items():
            array = np.asarray(array, dtype=np.float64)
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", array.ndim))
            for extent in array.shape:
                fh.write(struct.pack("<I", extent))
            payload = array.astype("<f8", copy=False).tobytes()
            fh.write(payload)
            checksum = fnv1a(payload, checksum)
        fh.write(struct.pack("<Q", checksum))


def _read_exact(fh, count: int, path: Path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"{path}: file ends inside a {count}-byte field")
    return buf


def load_checkpoint(path: Path | str) -> Checkpoint:
    """Parse and validate a checkpoint; no partial state escapes on error."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path)
        if magic != FSCK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, tag = struct.unpack("<BB", _read_exact(fh, 2, path))
        if version != FSCK_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if tag not in TAG_TO_STAGE:
            raise FormatError(f"{path}: unknown stage tag {tag}")
        stage = TAG_TO_STAGE[tag]
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if count > _MAX_BLOCKS:
            raise FormatError(f"{path}: implausible block count {count}")
        blocks: dict[str, np.ndarray] = {}
        checksum = _FNV_OFFSET
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
            try:
                name = _read_exact(fh, name_len, path).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"{path}: block name is not UTF-8") from exc
            if name in blocks:
                raise FormatError(f"{path}: duplicate block {name!r}")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            if ndim > _MAX_NDIM:
                raise FormatError(f"{path}: implausible ndim {ndim} in block {name!r}")
            shape = []
            total = 1
            for _ in range(ndim):
                (extent,) = struct.unpack("<I", _read_exact(fh, 4, path))
                if extent < 1:
                    raise FormatError(f"{path}: zero extent in block {name!r}")
                shape.append(extent)
                total *= extent
            if total > _MAX_ELEMENTS:
                raise FormatError(f"{path}: block {name!r} declares {total} elements")
            payload = _read_exact(fh, total * 8, path)
            checksum = fnv1a(payload, checksum)
            blocks[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        (declared,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        if declared != checksum:
            raise FormatError(f"{path}: payload checksum mismatch")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after checksum")

    for key in ("meta.seed", "meta.epoch", "meta.val_accuracy"):
        if key not in blocks:
            raise FormatError(f"{path}: missing metadata block {key!r}")
    for prefix in _REQUIRED_PREFIXES[stage]:
        if not any(name.startswith(prefix) for name in blocks):
            raise FormatError(f"{path}: stage {stage!r} requires {prefix}* blocks")
    seed = int(blocks.pop("meta.seed"))
    epoch = int(blocks.pop("meta.epoch"))
    val_accuracy = float(blocks.pop("meta.val_accuracy"))
    return Checkpoint(
        stage=stage,
        blocks=blocks,
        seed=seed,
        epoch=epoch,
        val_accuracy=val_accuracy,
        version=version,
    )
