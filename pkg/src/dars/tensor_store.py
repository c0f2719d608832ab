"""On-disk tensor format, dataset manifests, and validated in-memory volumes.

File layout (all little-endian, independent of host byte order):

    bytes 0..8    magic "DARSTEN1"
    byte  8       dtype code: 0=u8, 1=u16, 2=f32
    byte  9       rank (2 or 3)
    next rank*8   dims as u64
    rest          payload, row-major

The format is deliberately minimal: any training pipeline can emit it with a
dozen lines of code and round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    DimsError,
    FormatError,
    IoError,
    ManifestError,
    ShapeError,
    TruncationError,
)

MAGIC = b"DARSTEN1"
IGNORE = 255

#: probability volumes tolerate this much drift in per-pixel channel sums
#: (upstream softmax in reduced precision is not exactly normalized)
PROB_SUM_TOL = 1e-4

_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_CODE_FOR_KIND = {"uint8": 0, "uint16": 1, "float32": 2}

# guard against allocating on garbage headers; generous for desk-scale data
_MAX_ELEMENTS = 1 << 33


def _as_supported(values: np.ndarray) -> tuple[int, np.ndarray]:
    """Return (dtype_code, contiguous little-endian view) or raise FormatError."""
    arr = np.ascontiguousarray(values)
    code = _CODE_FOR_KIND.get(arr.dtype.name)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; use u8, u16, or f32")
    return code, arr.astype(_DTYPE_CODES[code], copy=False)


def write_tensor(values: np.ndarray, path: str | Path) -> None:
    """Write an array in the tensor format above. Rank must be 2 or 3."""
    code, arr = _as_supported(values)
    if arr.ndim not in (2, 3):
        raise DimsError(f"rank {arr.ndim} not supported; need 2 or 3")
    if any(d < 1 for d in arr.shape):
        raise DimsError(f"zero-sized dimension in shape {arr.shape}")
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        _atomic_write_bytes(Path(path), header + arr.tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file, validating magic, dtype, rank, dims, and payload size."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 2:
        raise TruncationError(f"{path}: file shorter than fixed header")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    code, rank = struct.unpack_from("<BB", blob, len(MAGIC))
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if rank not in (2, 3):
        raise DimsError(f"{path}: rank {rank} not supported; need 2 or 3")
    dims_off = len(MAGIC) + 2
    if len(blob) < dims_off + 8 * rank:
        raise TruncationError(f"{path}: header truncated before dims")
    dims = struct.unpack_from(f"<{rank}Q", blob, dims_off)
    if any(d < 1 for d in dims):
        raise DimsError(f"{path}: zero-sized dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimsError(f"{path}: dims {dims} overflow the element budget")
    dtype = _DTYPE_CODES[code]
    payload = blob[dims_off + 8 * rank :]
    expected = count * dtype.itemsize
    if len(payload) < expected:
        raise TruncationError(
            f"{path}: payload {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via temp file + rename so readers never observe partial files."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    try:
        _atomic_write_bytes(Path(path), text.encode("utf-8"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def atomic_write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class LabelMap:
    """H×W class-index map. 255 marks pixels excluded from every count and loss."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got shape {v.shape}")
        if v.dtype != np.uint8:
            raise ShapeError(f"label map must be uint8, got {v.dtype}")
        if not (0 < self.num_classes <= IGNORE):
            raise ShapeError(f"num_classes {self.num_classes} outside 1..{IGNORE}")
        bad = (v >= self.num_classes) & (v != IGNORE)
        if bad.any():
            raise ShapeError(
                f"label values >= {self.num_classes} present (not {IGNORE})"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ProbabilityVolume:
    """C×H×W per-pixel class probabilities (softmax output)."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ShapeError(f"probability volume must be 3-D, got {v.shape}")
        if v.dtype != np.float32:
            raise ShapeError(f"probability volume must be float32, got {v.dtype}")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ShapeError("probabilities outside [0, 1]")
        sums = v.sum(axis=0, dtype=np.float64)
        err = np.abs(sums - 1.0).max()
        if err > PROB_SUM_TOL:
            raise ShapeError(f"channel sums off by {err:.2e} > {PROB_SUM_TOL}")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LogitVolume:
    """C×H×W unnormalized scores, kept so temperature scaling stays possible."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ShapeError(f"logit volume must be 3-D, got {v.shape}")
        if v.dtype != np.float32:
            raise ShapeError(f"logit volume must be float32, got {v.dtype}")
        if not np.isfinite(v).all():
            raise ShapeError("logits contain non-finite values")

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: Path | None = None
    label_path: Path | None = None
    prob_path: Path | None = None
    logit_path: Path | None = None


@dataclass
class DatasetManifest:
    """A validated set of per-image artifact paths sharing one class count."""

    num_classes: int
    ignore_value: int
    entries: list[ManifestEntry] = field(default_factory=list)
    path: Path | None = None  # where this manifest was loaded from, if anywhere

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def entry(self, image_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise ManifestError(f"no entry {image_id!r} in manifest")

    def load_label(self, entry: ManifestEntry) -> LabelMap:
        if entry.label_path is None:
            raise ManifestError(f"entry {entry.image_id!r} has no label_path")
        return LabelMap(read_tensor(entry.label_path), self.num_classes)

    def load_probs(self, entry: ManifestEntry) -> ProbabilityVolume:
        if entry.prob_path is None:
            raise ManifestError(f"entry {entry.image_id!r} has no prob_path")
        return ProbabilityVolume(read_tensor(entry.prob_path))

    def load_logits(self, entry: ManifestEntry) -> LogitVolume:
        if entry.logit_path is None:
            raise ManifestError(f"entry {entry.image_id!r} has no logit_path")
        return LogitVolume(read_tensor(entry.logit_path))

    def load_image(self, entry: ManifestEntry) -> np.ndarray:
        if entry.image_path is None:
            raise ManifestError(f"entry {entry.image_id!r} has no image_path")
        img = read_tensor(entry.image_path)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ManifestError(
                f"image {entry.image_path} must be 3×H×W, got {img.shape}"
            )
        return img

    def labels(self) -> Iterable[LabelMap]:
        for e in self.entries:
            yield self.load_label(e)

    def to_json_obj(self, relative_to: Path | None = None) -> dict:
        def rel(p: Path | None):
            if p is None:
                return None
            if relative_to is not None:
                try:
                    return os.path.relpath(p, relative_to)
                except ValueError:
                    pass
            return str(p)

        entries = []
        for e in self.entries:
            rec = {"image_id": e.image_id}
            for key, p in (
                ("image_path", e.image_path),
                ("label_path", e.label_path),
                ("prob_path", e.prob_path),
                ("logit_path", e.logit_path),
            ):
                if p is not None:
                    rec[key] = rel(p)
            entries.append(rec)
        return {
            "num_classes": self.num_classes,
            "ignore_value": self.ignore_value,
            "entries": entries,
        }


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write manifest JSON with entry paths stored relative to its directory."""
    path = Path(path)
    atomic_write_json(path, manifest.to_json_obj(relative_to=path.parent))
    manifest.path = path


def load_manifest(path: str | Path, validate: bool = True) -> DatasetManifest:
    """Parse and eagerly validate a manifest JSON document.

    Relative entry paths resolve against the manifest's directory. With
    validate=True every referenced tensor is parsed once so that shape or
    format problems surface here rather than mid-pipeline.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("num_classes", "ignore_value", "entries"):
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    num_classes = int(doc["num_classes"])
    ignore_value = int(doc["ignore_value"])
    if ignore_value != IGNORE:
        raise ManifestError(f"{path}: ignore_value must be {IGNORE}")
    if not (0 < num_classes <= IGNORE):
        raise ManifestError(f"{path}: num_classes {num_classes} outside 1..{IGNORE}")

    root = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for rec in doc["entries"]:
        image_id = rec.get("image_id")
        if not isinstance(image_id, str) or not image_id:
            raise ManifestError(f"{path}: entry without a string image_id")
        if image_id in seen:
            raise ManifestError(f"{path}: duplicate image_id {image_id!r}")
        seen.add(image_id)

        def resolve(key: str) -> Path | None:
            raw = rec.get(key)
            if raw is None:
                return None
            p = Path(raw)
            if not p.is_absolute():
                p = root / p
            if not p.exists():
                raise ManifestError(f"{path}: {key} {raw!r} does not exist")
            return p

        entries.append(
            ManifestEntry(
                image_id=image_id,
                image_path=resolve("image_path"),
                label_path=resolve("label_path"),
                prob_path=resolve("prob_path"),
                logit_path=resolve("logit_path"),
            )
        )

    manifest = DatasetManifest(num_classes, ignore_value, entries, path=path)
    if validate:
        _validate_entries(manifest)
    return manifest


def _validate_entries(manifest: DatasetManifest) -> None:
    """Parse every referenced file and cross-check class counts and shapes."""
    for e in manifest.entries:
        shapes: dict[str, tuple[int, int]] = {}
        if e.label_path is not None:
            try:
                lm = manifest.load_label(e)
            except ShapeError as exc:
                raise ManifestError(f"{e.image_id}: bad label file: {exc}") from exc
            shapes["label"] = (lm.height, lm.width)
        if e.prob_path is not None:
            try:
                pv = manifest.load_probs(e)
            except ShapeError as exc:
                raise ManifestError(f"{e.image_id}: bad prob file: {exc}") from exc
            if pv.num_classes != manifest.num_classes:
                raise ManifestError(
                    f"{e.image_id}: prob volume has C={pv.num_classes}, "
                    f"manifest says {manifest.num_classes}"
                )
            shapes["prob"] = (pv.height, pv.width)
        if e.logit_path is not None:
            try:
                lv = manifest.load_logits(e)
            except ShapeError as exc:
                raise ManifestError(f"{e.image_id}: bad logit file: {exc}") from exc
            if lv.num_classes != manifest.num_classes:
                raise ManifestError(
                    f"{e.image_id}: logit volume has C={lv.num_classes}, "
                    f"manifest says {manifest.num_classes}"
                )
            shapes["logit"] = lv.values.shape[1:]
        if e.image_path is not None:
            img = manifest.load_image(e)
            shapes["image"] = img.shape[1:]
        if len(set(shapes.values())) > 1:
            raise ManifestError(f"{e.image_id}: mismatched H×W across files {shapes}")


def total_pixels(manifest: DatasetManifest) -> int:
    """Count pixels across all entries (reads one header-bearing file each)."""
    total = 0
    for e in manifest.entries:
        for p in (e.prob_path, e.logit_path, e.label_path, e.image_path):
            if p is not None:
                arr = read_tensor(p)
                total += arr.shape[-1] * arr.shape[-2]
                break
        else:
            raise ManifestError(f"{e.image_id}: entry references no files")
    return total
