"""Minimal trainable per-pixel classifier: linear softmax over six features.

Features are the three color channels, both normalized image coordinates,
and a constant. That is deliberately weak: the model inherits the class
prior of whatever it is trained on, which is exactly the bias the labeling
engines are supposed to repair. Gradients are closed-form and cheap to check
against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .calibration import softmax_channels
from .distribution import round_half_up
from .errors import ConfigError, EmptyDatasetError, IoError, ShapeError
from .scenegen import Scene
from .tensor_store import (
    IGNORE,
    DatasetManifest,
    LabelMap,
    LogitVolume,
    ManifestEntry,
    ProbabilityVolume,
    atomic_write_json,
    read_tensor,
    save_manifest,
    write_tensor,
)

FEATURE_DIM = 6


def extract_features(features: np.ndarray) -> np.ndarray:
    """3×H×W colors -> 6×H×W [r, g, b, x/(W-1), y/(H-1), 1] in float64."""
    if features.ndim != 3 or features.shape[0] != 3:
        raise ShapeError(f"expected 3×H×W features, got {features.shape}")
    _, H, W = features.shape
    xs = np.zeros(W) if W == 1 else np.arange(W) / (W - 1)
    ys = np.zeros(H) if H == 1 else np.arange(H) / (H - 1)
    out = np.empty((FEATURE_DIM, H, W), dtype=np.float64)
    out[:3] = features.astype(np.float64)
    out[3] = np.broadcast_to(xs, (H, W))
    out[4] = np.broadcast_to(ys[:, None], (H, W))
    out[5] = 1.0
    return out


@dataclass
class LinearPixelModel:
    weights: np.ndarray  # C×F float64
    bias: np.ndarray  # C float64

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != FEATURE_DIM:
            raise ShapeError(f"weights must be C×{FEATURE_DIM}, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must match weight rows")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ShapeError("non-finite parameters")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, num_classes: int) -> "LinearPixelModel":
        return cls(np.zeros((num_classes, FEATURE_DIM)), np.zeros(num_classes))

    def copy(self) -> "LinearPixelModel":
        return LinearPixelModel(self.weights.copy(), self.bias.copy())


def init_from_labeled(labeled: "DatasetManifest", priors: str = "uniform") -> LinearPixelModel:
    """Warm start: diagonal-Gaussian class model fitted on the labeled pixels.

    Plain gradient descent from zeros needs thousands of epochs before rare
    classes carve out decision regions (their gradient mass scales with class
    frequency while the optimum sits at large weight norms). Fitting
    per-class feature means with pooled per-feature variances gives the
    equivalent linear scores w_j = mu_j / var, b_j = -|mu_j|^2 / (2 var),
    a sane starting point that descent then refines. With priors="uniform"
    (default) the class-frequency term is left out of the biases and learned
    by descent instead; priors="empirical" folds log class frequencies in.
    Uses only labeled data; fully deterministic.
    """
    if priors not in ("uniform", "empirical"):
        raise ConfigError(f"unknown priors mode {priors!r}")
    C = labeled.num_classes
    sums = np.zeros((C, FEATURE_DIM))
    sqsums = np.zeros(FEATURE_DIM)
    counts = np.zeros(C, dtype=np.int64)
    for e in labeled.entries:
        img = labeled.load_image(e)
        lm = labeled.load_label(e)
        X = extract_features(img).reshape(FEATURE_DIM, -1).T
        y = lm.values.ravel()
        mask = y != IGNORE
        X, y = X[mask], y[mask].astype(np.int64)
        np.add.at(sums, y, X)
        sqsums += (X**2).sum(axis=0)
        counts += np.bincount(y, minlength=C)
    if counts.sum() == 0:
        raise EmptyDatasetError("no labeled pixels")
    total = counts.sum()
    mu = sums / np.maximum(counts, 1)[:, None]
    # pooled within-class variance per feature, floored so the constant
    # channel (variance 0) stays harmless
    var = sqsums / total - ((counts / total)[:, None] * mu * mu).sum(axis=0)
    var = np.maximum(var, 1e-3)
    weights = mu / var
    bias = -0.5 * (mu * mu / var).sum(axis=1)
    if priors == "empirical":
        bias = bias + np.log(np.maximum(counts / total, 1e-12))
    return LinearPixelModel(weights, bias)


def forward(model: LinearPixelModel, features: np.ndarray) -> tuple[LogitVolume, ProbabilityVolume]:
    """Per-pixel logits W·f + b and their softmax, stored as float32 volumes."""
    if features.ndim != 3 or features.shape[0] != FEATURE_DIM:
        raise ShapeError(f"expected {FEATURE_DIM}×H×W features, got {features.shape}")
    _, H, W = features.shape
    logits = np.tensordot(model.weights, features, axes=([1], [0]))
    logits += model.bias[:, None, None]
    probs = softmax_channels(logits)
    return (
        LogitVolume(logits.astype(np.float32)),
        ProbabilityVolume(np.clip(probs, 0.0, 1.0).astype(np.float32)),
    )


@dataclass
class TrainConfig:
    learning_rate: float = 5.0
    epochs: int = 20
    batch_size: int = 8
    l2: float = 1e-6
    seed: int = 0
    scale_range: tuple[float, float] | None = None  # random-scale augmentation

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.scale_range is not None:
            lo, hi = self.scale_range
            if not (0 < lo <= hi):
                raise ConfigError(f"bad scale range {self.scale_range}")

    def to_json_obj(self) -> dict:
        obj = {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "l2": self.l2,
            "seed": self.seed,
        }
        if self.scale_range is not None:
            obj["scale_range"] = list(self.scale_range)
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TrainConfig":
        rng = obj.get("scale_range")
        return cls(
            learning_rate=float(obj.get("learning_rate", 5.0)),
            epochs=int(obj.get("epochs", 20)),
            batch_size=int(obj.get("batch_size", 8)),
            l2=float(obj.get("l2", 1e-6)),
            seed=int(obj.get("seed", 0)),
            scale_range=tuple(rng) if rng is not None else None,
        )


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(arr: np.ndarray, nh: int, nw: int) -> np.ndarray:
    C, H, W = arr.shape
    if (nh, nw) == (H, W):
        return arr.copy()
    ys = (np.arange(nh) + 0.5) * (H / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (W / nw) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    a = arr[:, y0[:, None], x0[None, :]].astype(np.float64)
    b = arr[:, y0[:, None], x1[None, :]].astype(np.float64)
    c = arr[:, y1[:, None], x0[None, :]].astype(np.float64)
    d = arr[:, y1[:, None], x1[None, :]].astype(np.float64)
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return (top * (1 - fy) + bot * fy).astype(arr.dtype)


def _resize_nearest(arr: np.ndarray, nh: int, nw: int) -> np.ndarray:
    H, W = arr.shape
    if (nh, nw) == (H, W):
        return arr.copy()
    yi = np.clip(np.floor((np.arange(nh) + 0.5) * (H / nh)).astype(np.int64), 0, H - 1)
    xi = np.clip(np.floor((np.arange(nw) + 0.5) * (W / nw)).astype(np.int64), 0, W - 1)
    return arr[yi[:, None], xi[None, :]]


def augment_random_scale(
    scene: Scene, scale_range: tuple[float, float], rng: np.random.Generator
) -> Scene:
    """Rescale by a uniform draw, then random-crop/pad back to the input size.

    Features pad with zeros, labels with the ignore value; labels resize by
    nearest neighbor so no new class values appear. scale_range (1, 1) is the
    identity.
    """
    lo, hi = scale_range
    if not (0 < lo <= hi):
        raise ConfigError(f"bad scale range {scale_range}")
    H, W = scene.labels.height, scene.labels.width
    s = float(rng.uniform(lo, hi))
    nh, nw = round_half_up(s * H), round_half_up(s * W)
    if nh < 1 or nw < 1:
        raise ConfigError(f"scale {s} collapses a {H}×{W} image")
    if (nh, nw) == (H, W):
        return scene
    feats = _resize_bilinear(scene.features, nh, nw)
    labels = _resize_nearest(scene.labels.values, nh, nw)

    out_feats = np.zeros((3, H, W), dtype=scene.features.dtype)
    out_labels = np.full((H, W), IGNORE, dtype=np.uint8)
    # vertical then horizontal; each axis crops or pads independently
    if nh > H:
        y0 = int(rng.integers(0, nh - H + 1))
        feats, labels = feats[:, y0 : y0 + H, :], labels[y0 : y0 + H, :]
        ty, th = 0, H
    else:
        ty = int(rng.integers(0, H - nh + 1)) if nh < H else 0
        th = nh
    if nw > W:
        x0 = int(rng.integers(0, nw - W + 1))
        feats, labels = feats[:, :, x0 : x0 + W], labels[:, x0 : x0 + W]
        tx, tw = 0, W
    else:
        tx = int(rng.integers(0, W - nw + 1)) if nw < W else 0
        tw = nw
    out_feats[:, ty : ty + th, tx : tx + tw] = feats
    out_labels[ty : ty + th, tx : tx + tw] = labels
    return Scene(out_feats, LabelMap(out_labels, scene.labels.num_classes))


# ---------------------------------------------------------------------------
# objective


def pixels_from(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """(N×F features, N labels) over the scene's non-ignore pixels."""
    feats = extract_features(scene.features)
    X = feats.reshape(FEATURE_DIM, -1).T
    y = scene.labels.values.ravel()
    mask = y != IGNORE
    return X[mask], y[mask].astype(np.int64)


def objective_and_grad(
    model: LinearPixelModel,
    labeled_batch: list[tuple[np.ndarray, np.ndarray]],
    pseudo_batch: list[tuple[np.ndarray, np.ndarray]],
    l2: float,
) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Loss terms and exact gradients for one step.

    Each term is the mean over its images of the per-image mean cross-entropy
    over non-ignore pixels; the L2 term is 0.5*l2*||W||^2 (bias unpenalized).
    Returns (labeled_loss, pseudo_loss, dW, db); pseudo_loss is nan when the
    pseudo batch is empty.
    """
    C = model.num_classes
    dW = l2 * model.weights
    db = np.zeros(C)
    losses = []
    for batch in (labeled_batch, pseudo_batch):
        images = [(X, y) for X, y in batch if len(y) > 0]
        if not images:
            losses.append(float("nan"))
            continue
        # one weighted pass over the concatenated pixels equals the mean of
        # per-image means; w_p = 1 / (#images * #pixels of p's image)
        X = np.concatenate([x for x, _ in images])
        y = np.concatenate([yi for _, yi in images])
        w = np.concatenate(
            [np.full(len(yi), 1.0 / (len(images) * len(yi))) for _, yi in images]
        )
        z = X @ model.weights.T + model.bias
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        sez = ez.sum(axis=1, keepdims=True)
        logp = z - zmax - np.log(sez)
        rows = np.arange(len(y))
        losses.append(float(-(w * logp[rows, y]).sum()))
        g = ez / sez
        g[rows, y] -= 1.0
        g *= w[:, None]
        dW += g.T @ X
        db += g.sum(axis=0)
    return losses[0], losses[1], dW, db


def total_objective(
    model: LinearPixelModel,
    labeled_batch: list[tuple[np.ndarray, np.ndarray]],
    pseudo_batch: list[tuple[np.ndarray, np.ndarray]],
    l2: float,
) -> float:
    """Scalar objective matching objective_and_grad's gradients."""
    lab, pse, _, _ = objective_and_grad(model, labeled_batch, pseudo_batch, l2)
    reg = 0.5 * l2 * float((model.weights**2).sum())
    total = reg
    if not np.isnan(lab):
        total += lab
    if not np.isnan(pse):
        total += pse
    return total


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: LinearPixelModel
    #: rows {epoch, labeled_loss, pseudo_loss, total_loss}; epoch 0 is the
    #: pre-update evaluation pass, so traces start at the incoming model
    loss_trace: list[dict]


def _scene_cache(manifest: DatasetManifest) -> dict[str, Scene]:
    cache = {}
    for e in manifest.entries:
        img = manifest.load_image(e)
        lm = manifest.load_label(e)
        if img.shape[1:] != lm.values.shape:
            raise ShapeError(f"{e.image_id}: image/label shape mismatch")
        cache[e.image_id] = Scene(img, lm)
    return cache


def train(
    model: LinearPixelModel,
    labeled: DatasetManifest,
    pseudo: DatasetManifest | None,
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch gradient descent on the labeled + pseudo objective.

    Each step draws batch_size labeled images (cycled as needed) and, when a
    pseudo manifest is present, batch_size pseudo images; an epoch visits
    every image of the larger set once. Augmentation re-draws per image per
    visit. Deterministic for a fixed (model, manifests, cfg).
    """
    if not labeled.entries:
        raise EmptyDatasetError("labeled manifest has no entries")
    if labeled.num_classes != model.num_classes:
        raise ShapeError("model and labeled manifest disagree on C")
    if pseudo is not None and not pseudo.entries:
        pseudo = None
    if pseudo is not None and pseudo.num_classes != model.num_classes:
        raise ShapeError("model and pseudo manifest disagree on C")

    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    lab_cache = _scene_cache(labeled)
    lab_ids = sorted(lab_cache)
    pseudo_cache = _scene_cache(pseudo) if pseudo is not None else {}
    pseudo_ids = sorted(pseudo_cache)

    def make_batch(ids: list[str], cache: dict[str, Scene]) -> list:
        batch = []
        for image_id in ids:
            scene = cache[image_id]
            if cfg.scale_range is not None:
                scene = augment_random_scale(scene, cfg.scale_range, rng)
            batch.append(pixels_from(scene))
        return batch

    n_steps = -(-max(len(pseudo_ids), len(lab_ids)) // cfg.batch_size)
    trace: list[dict] = []
    for epoch in range(cfg.epochs + 1):
        lab_order = [lab_ids[i] for i in rng.permutation(len(lab_ids))]
        pseudo_order = [pseudo_ids[i] for i in rng.permutation(len(pseudo_ids))]
        lab_at = 0
        lab_losses, pseudo_losses = [], []
        for step in range(n_steps):
            lab_batch_ids = []
            for _ in range(min(cfg.batch_size, len(lab_ids))):
                lab_batch_ids.append(lab_order[lab_at % len(lab_order)])
                lab_at += 1
            pseudo_batch_ids = pseudo_order[
                step * cfg.batch_size : (step + 1) * cfg.batch_size
            ]
            lab_loss, pse_loss, dW, db = objective_and_grad(
                model,
                make_batch(lab_batch_ids, lab_cache),
                make_batch(pseudo_batch_ids, pseudo_cache),
                cfg.l2,
            )
            if epoch > 0:
                model.weights -= cfg.learning_rate * dW
                model.bias -= cfg.learning_rate * db
            if not np.isnan(lab_loss):
                lab_losses.append(lab_loss)
            if not np.isnan(pse_loss):
                pseudo_losses.append(pse_loss)
        lab_mean = float(np.mean(lab_losses)) if lab_losses else float("nan")
        pse_mean = float(np.mean(pseudo_losses)) if pseudo_losses else float("nan")
        total = (0.0 if np.isnan(lab_mean) else lab_mean) + (
            0.0 if np.isnan(pse_mean) else pse_mean
        )
        trace.append(
            {
                "epoch": epoch,
                "labeled_loss": lab_mean,
                "pseudo_loss": pse_mean,
                "total_loss": total,
            }
        )
    return TrainResult(model=model, loss_trace=trace)


# ---------------------------------------------------------------------------
# prediction and serialization


def predict_corpus(
    model: LinearPixelModel, manifest: DatasetManifest, out_dir
) -> DatasetManifest:
    """Write logit and probability volumes for every entry; returns a manifest
    that keeps image and label paths so downstream steps can chain."""
    out_dir = Path(out_dir)
    entries = []
    for e in manifest.entries:
        feats = extract_features(manifest.load_image(e))
        logits, probs = forward(model, feats)
        logit_path = out_dir / f"{e.image_id}.logits.dten"
        prob_path = out_dir / f"{e.image_id}.probs.dten"
        write_tensor(logits.values, logit_path)
        write_tensor(probs.values, prob_path)
        entries.append(
            replace(e, logit_path=logit_path, prob_path=prob_path)
        )
    out = DatasetManifest(manifest.num_classes, IGNORE, entries)
    save_manifest(out, out_dir / "predictions.json")
    return out


def save_model(
    model: LinearPixelModel, out_dir, seed: int | None = None, epochs_trained: int = 0
) -> None:
    out_dir = Path(out_dir)
    write_tensor(model.weights.astype(np.float32), out_dir / "weights.dten")
    write_tensor(model.bias.astype(np.float32).reshape(-1, 1), out_dir / "bias.dten")
    atomic_write_json(
        out_dir / "meta.json",
        {
            "feature_dim": FEATURE_DIM,
            "num_classes": model.num_classes,
            "seed": seed,
            "epochs_trained": epochs_trained,
        },
    )


def load_model(model_dir) -> LinearPixelModel:
    model_dir = Path(model_dir)
    try:
        meta = json.loads((model_dir / "meta.json").read_text())
    except OSError as exc:
        raise IoError(f"cannot read model metadata: {exc}") from exc
    weights = read_tensor(model_dir / "weights.dten").astype(np.float64)
    bias = read_tensor(model_dir / "bias.dten").astype(np.float64).ravel()
    model = LinearPixelModel(weights, bias)
    if model.num_classes != int(meta["num_classes"]):
        raise IoError("model metadata disagrees with tensor shapes")
    return model
