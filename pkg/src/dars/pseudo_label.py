"""Pseudo-label generation engines.

Three methods produce label maps from per-pixel class probabilities:

* ``dars``: per-class thresholds chosen so the pseudo-label distribution
  matches a target distribution, then exact-count random sampling to shave
  the overshoot that confidence ties cause.
* ``st``: one global confidence threshold sized to the labeling ratio.
* ``cbst``: per-class thresholds keeping the top alpha% of each class's
  own predicted pixels (preserves whatever bias the predictions have).

All three are two-pass streaming algorithms over (argmax class, max
confidence) maps; nothing here ever needs the full probability volumes in
memory at once.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .calibration import apply_temperature
from .distribution import (
    ClassDistribution,
    DesiredCounts,
    desired_counts,
    kl_divergence,
    round_half_up,
)
from .errors import ConsistencyError, EmptyResultError, ShapeError
from .tensor_store import (
    IGNORE,
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    ProbabilityVolume,
    atomic_write_json,
    atomic_write_text,
    save_manifest,
    write_tensor,
)

#: threshold meaning "label nothing of this class"; above any probability
NO_LABEL_THRESHOLD = 2.0


# ---------------------------------------------------------------------------
# deterministic keyed hashing


def stable_hash64(*parts) -> int:
    """64-bit hash of a tuple of strings/ints; stable across runs and hosts."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized; input must be uint64."""
    x = x.astype(np.uint64, copy=True)
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_CLASS_SALT = np.uint64(0xD6E8FEB86659FD93)


def _pixel_keys(seed: int, image_id: str, pixel_indices: np.ndarray, cls: int) -> np.ndarray:
    """Pseudorandom u64 per pixel, a pure function of (seed, image, pixel, class)."""
    base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(stable_hash64(image_id)))
    idx = pixel_indices.astype(np.uint64)
    with np.errstate(over="ignore"):
        mixed = base ^ (idx * _GAMMA) ^ (np.uint64(cls + 1) * _CLASS_SALT)
    return _mix64(mixed)


@dataclass(frozen=True)
class SamplingKey:
    """Identity of one candidate pixel in the deterministic sampling order."""

    seed: int
    image_id: str
    pixel_index: int
    cls: int

    @property
    def value(self) -> int:
        return int(_pixel_keys(self.seed, self.image_id, np.array([self.pixel_index]), self.cls)[0])


# ---------------------------------------------------------------------------
# prediction caches


@dataclass(frozen=True)
class PredictionMap:
    """Argmax class and max confidence per pixel for one image."""

    image_id: str
    classes: np.ndarray  # uint8 H×W
    confidence: np.ndarray  # float32 H×W

    @classmethod
    def from_probs(cls, image_id: str, probs: ProbabilityVolume) -> "PredictionMap":
        v = probs.values
        return cls(
            image_id=image_id,
            classes=v.argmax(axis=0).astype(np.uint8),
            confidence=v.max(axis=0),
        )

    @property
    def pixels(self) -> int:
        return self.classes.size


def load_predictions(
    manifest: DatasetManifest, temperature: float | None = None
) -> list[PredictionMap]:
    """Reduce each entry's probabilities (or tempered logits) to a PredictionMap."""
    out = []
    for e in manifest.entries:
        if temperature is None:
            pv = manifest.load_probs(e)
        else:
            pv = apply_temperature(manifest.load_logits(e), temperature)
        if pv.num_classes != manifest.num_classes:
            raise ShapeError(f"{e.image_id}: C mismatch")
        out.append(PredictionMap.from_probs(e.image_id, pv))
    return out


def _class_pools(predictions: Sequence[PredictionMap], num_classes: int) -> list[np.ndarray]:
    """Confidence pool per class: max-confidences of pixels argmax-predicted there."""
    parts: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
    for pm in predictions:
        flat_cls = pm.classes.ravel()
        flat_conf = pm.confidence.ravel()
        order = np.argsort(flat_cls, kind="stable")
        sorted_cls = flat_cls[order]
        bounds = np.searchsorted(sorted_cls, np.arange(num_classes + 1))
        conf_sorted = flat_conf[order]
        for j in range(num_classes):
            if bounds[j + 1] > bounds[j]:
                parts[j].append(conf_sorted[bounds[j] : bounds[j + 1]])
    empty = np.empty(0, dtype=np.float32)
    return [np.concatenate(p) if p else empty for p in parts]


def _merge_pools(pool_lists: Sequence[list[np.ndarray]]) -> list[np.ndarray]:
    """Associative merge of per-shard pools; any order yields the same multiset."""
    num_classes = len(pool_lists[0])
    return [
        np.concatenate([pools[j] for pools in pool_lists]) for j in range(num_classes)
    ]


# ---------------------------------------------------------------------------
# threshold plans


@dataclass(frozen=True)
class ThresholdPlan:
    """Everything the labeling pass needs: thresholds, budgets, sampling ratios."""

    t: np.ndarray  # float64, len C; NO_LABEL_THRESHOLD disables a class
    n: np.ndarray  # int64 desired counts
    n_tilde: np.ndarray  # int64 candidates surviving thresholding
    s: np.ndarray  # float64 sampling ratio actually applied, in (0, 1]
    deficient: np.ndarray  # bool, true where candidates < desired
    alpha: float
    total_pixels: int

    @property
    def num_classes(self) -> int:
        return len(self.t)

    def keep_counts(self) -> np.ndarray:
        return np.minimum(self.n, self.n_tilde)


def _plan_from_pools(
    pools: Sequence[np.ndarray], n: np.ndarray, alpha: float, total_pixels: int
) -> ThresholdPlan:
    """Exact k-th order statistic per class; matches a full descending sort."""
    C = len(pools)
    t = np.full(C, NO_LABEL_THRESHOLD, dtype=np.float64)
    n_tilde = np.zeros(C, dtype=np.int64)
    s = np.ones(C, dtype=np.float64)
    deficient = np.zeros(C, dtype=bool)
    for j in range(C):
        pool = pools[j]
        k = int(n[j])
        m = pool.size
        if k == 0:
            continue
        if m == 0:
            deficient[j] = True
            continue
        if m >= k:
            # n_j-th largest == (m-k)-th smallest; introselect is exact
            t[j] = float(np.partition(pool, m - k)[m - k])
            n_tilde[j] = int((pool >= t[j]).sum())
            s[j] = k / n_tilde[j]
        else:
            deficient[j] = True
            t[j] = float(pool.min())
            n_tilde[j] = m
    return ThresholdPlan(
        t=t,
        n=np.asarray(n, dtype=np.int64),
        n_tilde=n_tilde,
        s=s,
        deficient=deficient,
        alpha=float(alpha),
        total_pixels=int(total_pixels),
    )


def compute_thresholds(
    probs: Iterable[tuple[str, ProbabilityVolume]], n: DesiredCounts
) -> ThresholdPlan:
    """Per-class confidence thresholds hitting the desired counts.

    t_j is the exact n_j-th largest max-confidence among pixels argmax-
    predicted as class j. Ties straddling the cut leave n_tilde >= n; classes
    with fewer candidates than desired are flagged deficient, with t_j at the
    minimum candidate confidence so every candidate survives.
    """
    predictions = [PredictionMap.from_probs(i, pv) for i, pv in probs]
    if not predictions:
        raise EmptyResultError("no probability volumes supplied")
    pools = _class_pools(predictions, len(n.n))
    total = sum(pm.pixels for pm in predictions)
    return _plan_from_pools(pools, n.n, n.alpha, total)


def _apply_plan(pm: PredictionMap, plan: ThresholdPlan) -> np.ndarray:
    """uint8 label map: argmax class where confidence clears its threshold."""
    thresholds = plan.t[pm.classes]
    keep = pm.confidence >= thresholds
    return np.where(keep, pm.classes, np.uint8(IGNORE)).astype(np.uint8)


def apply_thresholds(probs: ProbabilityVolume, plan: ThresholdPlan) -> LabelMap:
    """Label each pixel argmax-j if its confidence >= t_j, else ignore."""
    if probs.num_classes != plan.num_classes:
        raise ShapeError(
            f"volume has C={probs.num_classes}, plan has C={plan.num_classes}"
        )
    pm = PredictionMap.from_probs("", probs)
    return LabelMap(_apply_plan(pm, plan), plan.num_classes)


# ---------------------------------------------------------------------------
# exact-count random sampling


def sample_exact(
    candidates: Mapping[str, LabelMap] | Sequence[tuple[str, LabelMap]],
    plan: ThresholdPlan,
    seed: int,
) -> dict[str, LabelMap]:
    """Keep exactly min(n_j, n_tilde_j) candidates per class, rest to ignore.

    The kept pixels are those with the smallest keyed pseudorandom values, so
    the outcome is a pure function of (candidate contents, plan, seed) and
    independent of image order or shard layout.
    """
    items = list(candidates.items()) if isinstance(candidates, Mapping) else list(candidates)
    C = plan.num_classes
    flats = [lm.values.ravel().copy() for _, lm in items]
    counts = np.zeros(C, dtype=np.int64)
    for flat in flats:
        counts += np.bincount(flat[flat != IGNORE], minlength=C)
    if not np.array_equal(counts, plan.n_tilde):
        raise ConsistencyError(
            f"candidate counts {counts.tolist()} do not match plan "
            f"{plan.n_tilde.tolist()}"
        )
    img_hashes = np.array([stable_hash64(i) for i, _ in items], dtype=np.uint64)
    keep_counts = plan.keep_counts()
    for j in range(C):
        keep = int(keep_counts[j])
        m = int(plan.n_tilde[j])
        if keep >= m:
            continue
        keys_l, hash_l, idx_l, slot_l = [], [], [], []
        for slot, ((image_id, _), flat) in enumerate(zip(items, flats)):
            idx = np.flatnonzero(flat == j)
            if idx.size == 0:
                continue
            keys_l.append(_pixel_keys(seed, image_id, idx, j))
            hash_l.append(np.full(idx.size, img_hashes[slot]))
            idx_l.append(idx)
            slot_l.append(np.full(idx.size, slot, dtype=np.int64))
        keys = np.concatenate(keys_l)
        hashes = np.concatenate(hash_l)
        idxs = np.concatenate(idx_l)
        slots = np.concatenate(slot_l)
        # total order (key, image hash, pixel index); input order cannot matter
        order = np.lexsort((idxs, hashes, keys))
        drop = order[keep:]
        drop_slots = slots[drop]
        drop_idx = idxs[drop]
        o = np.argsort(drop_slots, kind="stable")
        uniq, starts = np.unique(drop_slots[o], return_index=True)
        for slot, chunk in zip(uniq, np.split(drop_idx[o], starts[1:])):
            flats[slot][chunk] = IGNORE
    return {
        image_id: LabelMap(flat.reshape(lm.values.shape), C)
        for (image_id, lm), flat in zip(items, flats)
    }


# ---------------------------------------------------------------------------
# results and full methods


@dataclass
class PseudoLabelResult:
    """Labels plus the plan and summary statistics behind them."""

    method: str
    alpha: float
    seed: int | None
    labels: dict[str, LabelMap]
    plan: ThresholdPlan
    realized: ClassDistribution
    kl_to_target: float | None
    labeled_fraction: float

    def to_report_obj(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "seed": self.seed,
            "thresholds": [float(x) for x in self.plan.t],
            "n": [int(x) for x in self.plan.n],
            "n_tilde": [int(x) for x in self.plan.n_tilde],
            "s": [float(x) for x in self.plan.s],
            "deficient": [bool(x) for x in self.plan.deficient],
            "realized_freqs": [float(x) for x in self.realized.freqs],
            "kl_to_target": self.kl_to_target,
            "labeled_fraction": self.labeled_fraction,
        }


def _realized_distribution(labels: Mapping[str, LabelMap], C: int) -> ClassDistribution:
    counts = np.zeros(C, dtype=np.int64)
    for lm in labels.values():
        flat = lm.values.ravel()
        counts += np.bincount(flat[flat != IGNORE], minlength=C)
    if counts.sum() == 0:
        raise EmptyResultError("no pixels survived labeling")
    return ClassDistribution.from_counts(counts)


def _kl_report_value(target, realized: ClassDistribution) -> float | None:
    """KL(target || realized); falls back to the smoothed value when infinite."""
    if target is None:
        return None
    kl = kl_divergence(target, realized)
    if not np.isfinite(kl):
        kl = kl_divergence(target, realized, smooth=True)
    return float(kl)


def _result_from_labels(
    method: str,
    alpha: float,
    seed: int | None,
    labels: dict[str, LabelMap],
    plan: ThresholdPlan,
    target,
) -> PseudoLabelResult:
    realized = _realized_distribution(labels, plan.num_classes)
    return PseudoLabelResult(
        method=method,
        alpha=alpha,
        seed=seed,
        labels=labels,
        plan=plan,
        realized=realized,
        kl_to_target=_kl_report_value(target, realized),
        labeled_fraction=realized.total / plan.total_pixels,
    )


def dars_from_predictions(
    predictions: Sequence[PredictionMap],
    target,
    alpha: float,
    seed: int,
    num_classes: int,
    shard_sizes: Sequence[int] | None = None,
) -> PseudoLabelResult:
    """Distribution alignment + exact random sampling over prediction maps.

    shard_sizes optionally partitions the prediction list; per-shard pools are
    merged associatively, which changes nothing about the result and exists so
    the sharding contract stays exercised.
    """
    if not predictions:
        raise EmptyResultError("no predictions supplied")
    tf = target.freqs if isinstance(target, ClassDistribution) else np.asarray(target, float)
    if len(tf) != num_classes:
        raise ShapeError(f"target has {len(tf)} classes, corpus has {num_classes}")
    total = sum(pm.pixels for pm in predictions)
    n = desired_counts(target, alpha, total)
    if shard_sizes is None:
        pools = _class_pools(predictions, num_classes)
    else:
        if sum(shard_sizes) != len(predictions):
            raise ConsistencyError("shard sizes do not cover the prediction list")
        shard_pools = []
        at = 0
        for size in shard_sizes:
            shard_pools.append(_class_pools(predictions[at : at + size], num_classes))
            at += size
        pools = _merge_pools(shard_pools)
    plan = _plan_from_pools(pools, n.n, alpha, total)
    candidates = {pm.image_id: LabelMap(_apply_plan(pm, plan), num_classes) for pm in predictions}
    labels = sample_exact(candidates, plan, seed)
    return _result_from_labels("dars", alpha, seed, labels, plan, target)


def st_from_predictions(
    predictions: Sequence[PredictionMap],
    alpha: float,
    num_classes: int,
    target=None,
) -> PseudoLabelResult:
    """Single global confidence threshold sized to alpha% of all pixels."""
    if not predictions:
        raise EmptyResultError("no predictions supplied")
    if not (0.0 < alpha <= 100.0):
        raise ShapeError(f"alpha {alpha} outside (0, 100]")
    total = sum(pm.pixels for pm in predictions)
    all_conf = np.concatenate([pm.confidence.ravel() for pm in predictions])
    k = round_half_up(alpha / 100.0 * total)
    if k <= 0:
        raise EmptyResultError(f"alpha={alpha} selects zero pixels")
    t_star = float(np.partition(all_conf, total - k)[total - k])
    t = np.full(num_classes, t_star, dtype=np.float64)
    labels = {}
    counts = np.zeros(num_classes, dtype=np.int64)
    for pm in predictions:
        out = np.where(pm.confidence >= t_star, pm.classes, np.uint8(IGNORE)).astype(np.uint8)
        labels[pm.image_id] = LabelMap(out, num_classes)
        flat = out.ravel()
        counts += np.bincount(flat[flat != IGNORE], minlength=num_classes)
    plan = ThresholdPlan(
        t=t,
        n=counts.copy(),
        n_tilde=counts.copy(),
        s=np.ones(num_classes),
        deficient=np.zeros(num_classes, dtype=bool),
        alpha=float(alpha),
        total_pixels=total,
    )
    return _result_from_labels("st", alpha, None, labels, plan, target)


def cbst_from_predictions(
    predictions: Sequence[PredictionMap],
    alpha: float,
    num_classes: int,
    target=None,
) -> PseudoLabelResult:
    """Per-class top alpha% of that class's own predicted pixels, no sampling."""
    if not predictions:
        raise EmptyResultError("no predictions supplied")
    if not (0.0 < alpha <= 100.0):
        raise ShapeError(f"alpha {alpha} outside (0, 100]")
    total = sum(pm.pixels for pm in predictions)
    pools = _class_pools(predictions, num_classes)
    n = np.array(
        [round_half_up(alpha / 100.0 * pool.size) for pool in pools], dtype=np.int64
    )
    plan = _plan_from_pools(pools, n, alpha, total)
    # thresholding only: ties overshoot n_j and stay (the bias this method keeps)
    labels = {pm.image_id: LabelMap(_apply_plan(pm, plan), num_classes) for pm in predictions}
    return _result_from_labels("cbst", alpha, None, labels, plan, target)


# ---------------------------------------------------------------------------
# manifest-level entry points


def _shard_sizes(n_entries: int, shards: int) -> list[int]:
    shards = max(1, min(shards, n_entries))
    base, extra = divmod(n_entries, shards)
    return [base + (1 if i < extra else 0) for i in range(shards)]


def dars_label(
    unlabeled: DatasetManifest,
    target,
    alpha: float,
    seed: int,
    temperature: float | None = None,
    shards: int = 1,
) -> PseudoLabelResult:
    """Run distribution alignment + random sampling over a prediction manifest."""
    predictions = load_predictions(unlabeled, temperature)
    return dars_from_predictions(
        predictions,
        target,
        alpha,
        seed,
        unlabeled.num_classes,
        shard_sizes=_shard_sizes(len(predictions), shards),
    )


def st_label(
    unlabeled: DatasetManifest,
    alpha: float,
    target=None,
    temperature: float | None = None,
) -> PseudoLabelResult:
    predictions = load_predictions(unlabeled, temperature)
    return st_from_predictions(predictions, alpha, unlabeled.num_classes, target)


def cbst_label(
    unlabeled: DatasetManifest,
    alpha: float,
    target=None,
    temperature: float | None = None,
) -> PseudoLabelResult:
    predictions = load_predictions(unlabeled, temperature)
    return cbst_from_predictions(predictions, alpha, unlabeled.num_classes, target)


# ---------------------------------------------------------------------------
# artifacts


def write_pseudo_labels(
    result: PseudoLabelResult,
    out_dir,
    source: DatasetManifest | None = None,
) -> DatasetManifest:
    """Write one label tensor per image plus a pseudo-label manifest.

    When the source manifest is given, its image paths are carried over so the
    output manifest can feed training directly.
    """
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    num_classes = result.plan.num_classes
    for image_id in sorted(result.labels):
        lm = result.labels[image_id]
        label_path = out_dir / f"{image_id}.labels.dten"
        write_tensor(lm.values, label_path)
        image_path = None
        if source is not None:
            image_path = source.entry(image_id).image_path
        entries.append(
            ManifestEntry(image_id=image_id, image_path=image_path, label_path=label_path)
        )
    manifest = DatasetManifest(num_classes, IGNORE, entries)
    save_manifest(manifest, out_dir / "pseudo_manifest.json")
    return manifest


def write_label_report(result: PseudoLabelResult, path) -> None:
    atomic_write_json(path, result.to_report_obj())


def write_label_report_csv(result: PseudoLabelResult, path, target=None) -> None:
    """Per-class table: threshold, budget, candidates, realized frequency."""
    rows = ["class,threshold,n,n_tilde,s,deficient,realized_count,realized_freq,target_freq"]
    tf = None
    if target is not None:
        tf = target.freqs if isinstance(target, ClassDistribution) else np.asarray(target, float)
    plan = result.plan
    for j in range(plan.num_classes):
        target_str = f"{tf[j]:.9g}" if tf is not None else ""
        rows.append(
            f"{j},{plan.t[j]:.9g},{plan.n[j]},{plan.n_tilde[j]},{plan.s[j]:.9g},"
            f"{int(plan.deficient[j])},{result.realized.counts[j]},"
            f"{result.realized.freqs[j]:.9g},{target_str}"
        )
    atomic_write_text(path, "\n".join(rows) + "\n")
