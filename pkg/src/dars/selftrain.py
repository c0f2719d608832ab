"""Iterative self-training rounds plus all evaluation metrics.

Round 0 trains a supervised model on the labeled set. Each later round turns
the previous student into a teacher, labels the unlabeled corpus with the
configured method (distribution-aligned sampling or a baseline), and trains
a new student on labeled plus pseudo-labeled data. A progressive schedule
may raise the labeling ratio and widen the random-scale range between
rounds, which keeps the pseudo data informative. Artifacts for round k land
in <run>/round_k/.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import figures
from .calibration import apply_temperature, fit_temperature
from .distribution import ClassDistribution, label_frequencies
from .errors import ConfigError, EmptyDistributionError, IoError, ShapeError
from .pseudo_label import (
    PredictionMap,
    PseudoLabelResult,
    cbst_from_predictions,
    dars_from_predictions,
    st_from_predictions,
    stable_hash64,
    write_label_report,
    write_label_report_csv,
    write_pseudo_labels,
)
from .scenegen import (
    PRESET_GROUPS,
    PRESET_TAIL_CLASSES,
    DatasetBundle,
    SceneConfig,
    generate_dataset,
)
from .tensor_store import (
    IGNORE,
    DatasetManifest,
    LabelMap,
    atomic_write_json,
    atomic_write_text,
    load_manifest,
)
from .toymodel import (
    LinearPixelModel,
    TrainConfig,
    extract_features,
    forward,
    init_from_labeled,
    save_model,
    train,
)

METHODS = ("st", "cbst", "dars")


def schedule_scale_range(
    base: tuple[float, float], beta_min: float, beta_max: float
) -> tuple[float, float]:
    """Widen a scale range: [(1-beta_min)*lo, (1+beta_max)*hi]."""
    lo, hi = base
    if not (0 < lo <= hi):
        raise ConfigError(f"bad base scale range {base}")
    if beta_min < 0 or beta_max < 0:
        raise ConfigError("betas must be >= 0")
    if beta_min >= 1:
        raise ConfigError(f"beta_min {beta_min} would collapse the lower bound")
    return ((1.0 - beta_min) * lo, (1.0 + beta_max) * hi)


@dataclass(frozen=True)
class RoundSpec:
    k: int
    epochs: int
    alpha: float = 0.0  # labeling ratio in percent; unused at k=0
    beta_min: float = 0.0
    beta_max: float = 0.0
    method: str | None = None  # one of METHODS; None only at k=0
    use_ts: bool = False

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RoundSpec":
        return cls(
            k=int(obj["k"]),
            epochs=int(obj["epochs"]),
            alpha=float(obj.get("alpha", 0.0)),
            beta_min=float(obj.get("beta_min", 0.0)),
            beta_max=float(obj.get("beta_max", 0.0)),
            method=obj.get("method"),
            use_ts=bool(obj.get("use_ts", False)),
        )


@dataclass
class RoundSchedule:
    rounds: list[RoundSpec]
    base_scale: tuple[float, float] = (0.25, 1.0)

    def __post_init__(self):
        if not self.rounds:
            raise ConfigError("schedule has no rounds")
        ks = [r.k for r in self.rounds]
        if ks != list(range(len(ks))):
            raise ConfigError(f"round indices must be 0,1,2,... got {ks}")
        first = self.rounds[0]
        if first.method is not None or first.alpha:
            raise ConfigError("round 0 is supervised pre-training; no labeling")
        alphas = [r.alpha for r in self.rounds[1:]]
        if any(later < earlier for earlier, later in zip(alphas, alphas[1:])):
            raise ConfigError(f"labeling ratios must not decrease: {alphas}")
        for r in self.rounds[1:]:
            if r.method not in METHODS:
                raise ConfigError(f"round {r.k}: unknown method {r.method!r}")
            if not (0 < r.alpha <= 100):
                raise ConfigError(f"round {r.k}: alpha {r.alpha} outside (0,100]")
            if r.beta_min < 0 or r.beta_max < 0:
                raise ConfigError(f"round {r.k}: negative beta")
        lo, hi = self.base_scale
        if not (0 < lo <= hi):
            raise ConfigError(f"bad base scale range {self.base_scale}")

    def scale_range(self, spec: RoundSpec) -> tuple[float, float]:
        # betas are relative to the base range, not compounded across rounds
        return schedule_scale_range(self.base_scale, spec.beta_min, spec.beta_max)


# ---------------------------------------------------------------------------
# evaluation


def default_size_bin_edges(
    widths: Sequence[int] = (16, 128, 1024), bins_per_width: int = 10
) -> list[float]:
    """Bucket edges for accuracy-by-size: several widths, N buckets each."""
    edges = [0.0]
    for w in widths:
        for _ in range(bins_per_width):
            edges.append(edges[-1] + w)
    edges.append(float("inf"))
    return edges


@dataclass
class EvalReport:
    confusion: np.ndarray  # C×C, rows=truth, cols=prediction
    per_class_iou: np.ndarray  # float64, NaN where the class is absent from truth
    miou: float
    tail_miou: float
    accuracy_by_size: list[dict]
    group_means: dict[str, float]

    def to_json_obj(self) -> dict:
        def none_if_nan(x: float):
            return None if np.isnan(x) else float(x)

        buckets = []
        for b in self.accuracy_by_size:
            b = dict(b)
            if not np.isfinite(b["hi"]):
                b["hi"] = None
            buckets.append(b)
        return {
            "confusion": self.confusion.tolist(),
            "per_class_iou": [none_if_nan(x) for x in self.per_class_iou],
            "miou": none_if_nan(self.miou),
            "tail_miou": none_if_nan(self.tail_miou),
            "accuracy_by_size": buckets,
            "group_means": {k: none_if_nan(v) for k, v in self.group_means.items()},
        }


def _group_names(groups: Sequence[Sequence[int]]) -> list[str]:
    from .scenegen import GROUP_NAMES

    if len(groups) == len(GROUP_NAMES) and all(
        tuple(g) == tuple(p) for g, p in zip(groups, PRESET_GROUPS)
    ):
        return list(GROUP_NAMES)
    return [f"group_{i}" for i in range(len(groups))]


def resolve_tail_classes(tail_classes: Sequence[int] | None, num_classes: int) -> tuple:
    if tail_classes is None:
        if num_classes == len(PRESET_GROUPS[0]) * len(PRESET_GROUPS):
            return PRESET_TAIL_CLASSES
        return tuple(range(1, num_classes))
    tail = tuple(int(j) for j in tail_classes)
    if any(not 0 <= j < num_classes for j in tail):
        raise ShapeError(f"tail class indices out of range for C={num_classes}")
    return tail


def resolve_groups(groups: Sequence[Sequence[int]] | None, num_classes: int) -> tuple:
    if groups is None:
        if num_classes == len(PRESET_GROUPS[0]) * len(PRESET_GROUPS):
            return PRESET_GROUPS
        return (tuple(range(num_classes)),)
    out = tuple(tuple(int(j) for j in g) for g in groups)
    if any(not 0 <= j < num_classes for g in out for j in g):
        raise ShapeError(f"group class indices out of range for C={num_classes}")
    return out


def evaluate_maps(
    pred: Mapping[str, LabelMap],
    truth: Mapping[str, LabelMap],
    num_classes: int,
    tail_classes: Sequence[int] | None = None,
    size_bin_edges: Sequence[float] | None = None,
    groups: Sequence[Sequence[int]] | None = None,
) -> EvalReport:
    """Confusion, IoU, tail mIoU, accuracy-by-component-size, group means.

    Pixels ignored in the truth never count. Pixels the prediction leaves
    ignored are also excluded from the confusion matrix (relevant when
    auditing pseudo-label quality rather than dense predictions). Components
    use 4-connectivity on the truth map, per class, per image. Defaults when
    tail_classes/groups are omitted: the 20-class preset layout when C
    matches it, else all-but-class-0 as tail and one group of all classes.
    """
    if set(pred) != set(truth):
        raise ShapeError("prediction and truth image sets differ")
    C = num_classes
    tail_classes = resolve_tail_classes(tail_classes, C)
    groups = resolve_groups(groups, C)
    edges = list(size_bin_edges) if size_bin_edges is not None else default_size_bin_edges()
    confusion = np.zeros((C, C), dtype=np.int64)
    n_buckets = len(edges) - 1
    bucket_pixels = np.zeros(n_buckets, dtype=np.int64)
    bucket_correct = np.zeros(n_buckets, dtype=np.int64)
    bucket_components = np.zeros(n_buckets, dtype=np.int64)
    for image_id in sorted(truth):
        t = truth[image_id].values
        p = pred[image_id].values
        if t.shape != p.shape:
            raise ShapeError(f"{image_id}: truth {t.shape} vs pred {p.shape}")
        mask = (t != IGNORE) & (p != IGNORE)
        confusion += np.bincount(
            (t[mask].astype(np.int64) * C + p[mask]), minlength=C * C
        ).reshape(C, C)
        correct = t == p
        for j in np.unique(t[t != IGNORE]):
            comp, n_comp = ndimage.label(t == j)  # default structure = 4-connectivity
            if n_comp == 0:
                continue
            areas = ndimage.sum_labels(np.ones_like(comp), comp, np.arange(1, n_comp + 1))
            hits = ndimage.sum_labels(correct, comp, np.arange(1, n_comp + 1))
            which = np.clip(np.searchsorted(edges, areas, side="right") - 1, 0, n_buckets - 1)
            np.add.at(bucket_pixels, which, areas.astype(np.int64))
            np.add.at(bucket_correct, which, hits.astype(np.int64))
            np.add.at(bucket_components, which, 1)

    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    present = confusion.sum(axis=1) > 0
    if not present.any():
        raise EmptyDistributionError("no countable truth pixels")
    denom = tp + fp + fn
    # IoU is defined wherever the class appears in truth or prediction;
    # mIoU averages only over classes present in the truth
    iou = np.full(C, np.nan)
    computable = denom > 0
    iou[computable] = tp[computable] / denom[computable]
    miou = float(np.mean(iou[present]))
    tail = [j for j in tail_classes if present[j]]
    tail_miou = float(np.mean(iou[tail])) if tail else float("nan")
    groups_means = {}
    for name, members in zip(_group_names(groups), groups):
        vals = [iou[j] for j in members if present[j]]
        groups_means[name] = float(np.mean(vals)) if vals else float("nan")
    buckets = []
    for b in range(n_buckets):
        buckets.append(
            {
                "lo": edges[b],
                "hi": edges[b + 1],
                "components": int(bucket_components[b]),
                "pixels": int(bucket_pixels[b]),
                "accuracy": (
                    float(bucket_correct[b] / bucket_pixels[b])
                    if bucket_pixels[b]
                    else None
                ),
            }
        )
    return EvalReport(
        confusion=confusion,
        per_class_iou=iou,
        miou=miou,
        tail_miou=tail_miou,
        accuracy_by_size=buckets,
        group_means=groups_means,
    )


def evaluate(
    pred_manifest: DatasetManifest,
    truth_manifest: DatasetManifest,
    tail_classes: Sequence[int] | None = None,
    size_bin_edges: Sequence[float] | None = None,
    groups: Sequence[Sequence[int]] | None = None,
) -> EvalReport:
    if pred_manifest.num_classes != truth_manifest.num_classes:
        raise ShapeError("manifests disagree on C")
    pred = {e.image_id: pred_manifest.load_label(e) for e in pred_manifest.entries}
    truth = {e.image_id: truth_manifest.load_label(e) for e in truth_manifest.entries}
    return evaluate_maps(
        pred, truth, truth_manifest.num_classes, tail_classes, size_bin_edges, groups
    )


# ---------------------------------------------------------------------------
# pipeline configuration


@dataclass
class Corpora:
    labeled: DatasetManifest
    unlabeled: DatasetManifest
    test: DatasetManifest
    unlabeled_truth: DatasetManifest | None = None


@dataclass
class PipelineConfig:
    schedule: RoundSchedule
    train: TrainConfig
    seed: int = 0
    scene: SceneConfig | None = None
    splits: tuple[int, int, int] = (64, 256, 32)
    corpus_paths: dict | None = None  # manifest paths when data already exists
    target: str | list = "labeled"  # "labeled" or explicit per-class frequencies
    tail_classes: tuple | None = None  # None: resolved against C at run time
    groups: tuple | None = None

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PipelineConfig":
        schedule = RoundSchedule(
            rounds=[RoundSpec.from_json_obj(r) for r in obj["rounds"]],
            base_scale=tuple(obj.get("base_scale", (0.25, 1.0))),
        )
        scene = obj.get("scene")
        tail = obj.get("tail_classes")
        groups = obj.get("groups")
        return cls(
            schedule=schedule,
            train=TrainConfig.from_json_obj(obj.get("train", {})),
            seed=int(obj.get("seed", 0)),
            scene=SceneConfig.from_json_obj(scene) if scene is not None else None,
            splits=tuple(obj.get("splits", (64, 256, 32))),
            corpus_paths=obj.get("corpus"),
            target=obj.get("target", "labeled"),
            tail_classes=tuple(tail) if tail is not None else None,
            groups=tuple(tuple(g) for g in groups) if groups is not None else None,
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_json_obj(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: bad pipeline config ({exc})") from exc


@dataclass
class RoundState:
    k: int
    teacher: LinearPixelModel | None
    student: LinearPixelModel
    scale_range: tuple[float, float]
    pseudo_manifest: DatasetManifest | None
    pseudo_result: PseudoLabelResult | None
    loss_trace: list[dict]
    eval_report: EvalReport


@dataclass
class PipelineResult:
    rounds: list[RoundState]
    final_model: LinearPixelModel
    run_dir: Path

    @property
    def reports(self) -> list[EvalReport]:
        return [r.eval_report for r in self.rounds]


# ---------------------------------------------------------------------------
# running


def _predict_maps(model: LinearPixelModel, manifest: DatasetManifest) -> dict[str, LabelMap]:
    """Dense argmax predictions for evaluation."""
    out = {}
    for e in manifest.entries:
        feats = extract_features(manifest.load_image(e))
        _, probs = forward(model, feats)
        out[e.image_id] = LabelMap(
            probs.values.argmax(axis=0).astype(np.uint8), manifest.num_classes
        )
    return out


def _teacher_predictions(
    model: LinearPixelModel,
    manifest: DatasetManifest,
    temperature: float | None,
) -> list[PredictionMap]:
    """Teacher predictions reduced to (class, confidence), float32-quantized."""
    preds = []
    for e in manifest.entries:
        feats = extract_features(manifest.load_image(e))
        logits, probs = forward(model, feats)
        if temperature is not None:
            probs = apply_temperature(logits, temperature)
        preds.append(PredictionMap.from_probs(e.image_id, probs))
    return preds


def _fit_ts_on_labeled(model: LinearPixelModel, labeled: DatasetManifest) -> float:
    logits, labels = [], []
    for e in labeled.entries:
        lv, _ = forward(model, extract_features(labeled.load_image(e)))
        logits.append(lv)
        labels.append(labeled.load_label(e))
    return fit_temperature(logits, labels).value


def write_loss_trace(trace: list[dict], path) -> None:
    rows = ["epoch,labeled_loss,pseudo_loss,total_loss"]
    for row in trace:
        rows.append(
            f"{row['epoch']},{row['labeled_loss']:.9g},"
            f"{row['pseudo_loss']:.9g},{row['total_loss']:.9g}"
        )
    atomic_write_text(path, "\n".join(rows) + "\n")


def write_eval_report(report: EvalReport, path) -> None:
    atomic_write_json(path, report.to_json_obj())


def write_eval_csv(report: EvalReport, path) -> None:
    rows = ["class,iou"]
    for j, v in enumerate(report.per_class_iou):
        rows.append(f"{j},{'' if np.isnan(v) else f'{v:.9g}'}")
    atomic_write_text(path, "\n".join(rows) + "\n")


def _label_with_method(
    spec: RoundSpec,
    predictions: list[PredictionMap],
    target,
    num_classes: int,
    seed: int,
) -> PseudoLabelResult:
    if spec.method == "dars":
        return dars_from_predictions(predictions, target, spec.alpha, seed, num_classes)
    if spec.method == "st":
        return st_from_predictions(predictions, spec.alpha, num_classes, target)
    if spec.method == "cbst":
        return cbst_from_predictions(predictions, spec.alpha, num_classes, target)
    raise ConfigError(f"unknown method {spec.method!r}")


def run_round(
    state: RoundState,
    spec: RoundSpec,
    schedule: RoundSchedule,
    corpora: Corpora,
    cfg: PipelineConfig,
    target,
    round_dir: Path,
    render_figures: bool = True,
) -> RoundState:
    """One self-training round: predict, pseudo-label, train student, evaluate."""
    teacher = state.student
    scale_range = schedule.scale_range(spec)
    temperature = _fit_ts_on_labeled(teacher, corpora.labeled) if spec.use_ts else None
    predictions = _teacher_predictions(teacher, corpora.unlabeled, temperature)
    label_seed = stable_hash64(cfg.seed, "label", spec.k) & 0x7FFFFFFFFFFFFFFF
    result = _label_with_method(
        spec, predictions, target, corpora.labeled.num_classes, label_seed
    )
    pseudo_manifest = write_pseudo_labels(result, round_dir / "pseudo", corpora.unlabeled)
    write_label_report(result, round_dir / "pseudo_report.json")
    write_label_report_csv(result, round_dir / "pseudo_report.csv", target)

    train_cfg = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        epochs=spec.epochs,
        batch_size=cfg.train.batch_size,
        l2=cfg.train.l2,
        seed=stable_hash64(cfg.seed, "train", spec.k) & 0x7FFFFFFFFFFFFFFF,
        scale_range=scale_range,
    )
    trained = train(teacher, corpora.labeled, pseudo_manifest, train_cfg)
    write_loss_trace(trained.loss_trace, round_dir / "loss_trace.csv")
    save_model(trained.model, round_dir / "model", seed=train_cfg.seed, epochs_trained=spec.epochs)

    report = evaluate_maps(
        _predict_maps(trained.model, corpora.test),
        {e.image_id: corpora.test.load_label(e) for e in corpora.test.entries},
        corpora.test.num_classes,
        cfg.tail_classes,
        None,
        cfg.groups,
    )
    write_eval_report(report, round_dir / "eval.json")
    write_eval_csv(report, round_dir / "eval.csv")
    if render_figures:
        figures.render_round_figures(round_dir, target)
    return RoundState(
        k=spec.k,
        teacher=teacher,
        student=trained.model,
        scale_range=scale_range,
        pseudo_manifest=pseudo_manifest,
        pseudo_result=result,
        loss_trace=trained.loss_trace,
        eval_report=report,
    )


def _resolve_corpora(cfg: PipelineConfig, run_dir: Path) -> tuple[Corpora, ClassDistribution]:
    if cfg.scene is not None:
        n_l, n_u, n_t = cfg.splits
        bundle: DatasetBundle = generate_dataset(cfg.scene, n_l, n_u, n_t, run_dir / "data")
        corpora = Corpora(bundle.labeled, bundle.unlabeled, bundle.test, bundle.unlabeled_truth)
        labeled_dist = bundle.labeled_distribution
    elif cfg.corpus_paths is not None:
        paths = cfg.corpus_paths
        truth = paths.get("unlabeled_truth")
        corpora = Corpora(
            labeled=load_manifest(paths["labeled"]),
            unlabeled=load_manifest(paths["unlabeled"]),
            test=load_manifest(paths["test"]),
            unlabeled_truth=load_manifest(truth) if truth else None,
        )
        labeled_dist = label_frequencies(
            list(corpora.labeled.labels()), corpora.labeled.num_classes
        )
    else:
        raise ConfigError("pipeline config needs either a scene or corpus paths")
    return corpora, labeled_dist


def run_pipeline(cfg: PipelineConfig, out_dir, render_figures: bool = True) -> PipelineResult:
    """Round 0 pre-training plus every scheduled self-training round.

    Fully deterministic for a fixed config: corpus generation, labeling, and
    training all derive their randomness from cfg.seed.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    corpora, labeled_dist = _resolve_corpora(cfg, run_dir)
    if cfg.target == "labeled":
        target = labeled_dist
    else:
        target = np.asarray(cfg.target, dtype=np.float64)
        if target.shape != (corpora.labeled.num_classes,):
            raise ConfigError("explicit target length does not match C")

    spec0 = cfg.schedule.rounds[0]
    round0_dir = run_dir / "round_0"
    cfg0 = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        epochs=spec0.epochs,
        batch_size=cfg.train.batch_size,
        l2=cfg.train.l2,
        seed=stable_hash64(cfg.seed, "train", 0) & 0x7FFFFFFFFFFFFFFF,
        scale_range=cfg.schedule.scale_range(spec0),
    )
    trained0 = train(init_from_labeled(corpora.labeled), corpora.labeled, None, cfg0)
    write_loss_trace(trained0.loss_trace, round0_dir / "loss_trace.csv")
    save_model(trained0.model, round0_dir / "model", seed=cfg0.seed, epochs_trained=spec0.epochs)
    report0 = evaluate_maps(
        _predict_maps(trained0.model, corpora.test),
        {e.image_id: corpora.test.load_label(e) for e in corpora.test.entries},
        corpora.test.num_classes,
        cfg.tail_classes,
        None,
        cfg.groups,
    )
    write_eval_report(report0, round0_dir / "eval.json")
    write_eval_csv(report0, round0_dir / "eval.csv")
    if render_figures:
        figures.render_round_figures(round0_dir, target)

    state = RoundState(
        k=0,
        teacher=None,
        student=trained0.model,
        scale_range=cfg0.scale_range,
        pseudo_manifest=None,
        pseudo_result=None,
        loss_trace=trained0.loss_trace,
        eval_report=report0,
    )
    states = [state]
    for spec in cfg.schedule.rounds[1:]:
        state = run_round(
            state,
            spec,
            cfg.schedule,
            corpora,
            cfg,
            target,
            run_dir / f"round_{spec.k}",
            render_figures=render_figures,
        )
        states.append(state)
    summary = {
        "seed": cfg.seed,
        "rounds": [
            {
                "k": s.k,
                "miou": s.eval_report.miou,
                "tail_miou": s.eval_report.tail_miou,
                "kl_to_target": None if s.pseudo_result is None else s.pseudo_result.kl_to_target,
                "labeled_fraction": None
                if s.pseudo_result is None
                else s.pseudo_result.labeled_fraction,
            }
            for s in states
        ],
    }
    atomic_write_json(run_dir / "summary.json", summary)
    return PipelineResult(rounds=states, final_model=states[-1].student, run_dir=run_dir)
