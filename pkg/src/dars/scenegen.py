"""Deterministic synthetic long-tailed scene generator.

Scenes are a background color field with axis-aligned square patches painted
over it, one optional patch per foreground class, later class indices
painting over earlier ones. Per-pixel Gaussian color noise makes the ideal
classifier imperfect, so prediction confidences have real structure. Because
placement is uniform and classes draw independently, the expected per-class
pixel frequencies have a closed form (expected_frequencies), which makes the
generator checkable against itself.

Classes are laid out in four groups crossing occurrence frequency with patch
size (frequent/rare x large/small), which is what produces the long tail.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .distribution import ClassDistribution, label_frequencies
from .errors import ConfigError, IoError
from .tensor_store import (
    IGNORE,
    DatasetManifest,
    LabelMap,
    ManifestEntry,
    atomic_write_json,
    save_manifest,
    write_tensor,
)


@dataclass
class SceneConfig:
    num_classes: int
    height: int
    width: int
    occurrence: np.ndarray  # per-class probability a scene contains the class
    size_min: np.ndarray  # per-class patch area, fraction of image area
    size_max: np.ndarray
    colors: np.ndarray  # C×3 archetypes in [0,1]
    noise_sigma: float
    background_class: int
    seed: int

    def __post_init__(self):
        self.occurrence = np.asarray(self.occurrence, dtype=np.float64)
        self.size_min = np.asarray(self.size_min, dtype=np.float64)
        self.size_max = np.asarray(self.size_max, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        C = self.num_classes
        if not (0 < C <= IGNORE):
            raise ConfigError(f"num_classes {C} outside 1..{IGNORE}")
        if self.height < 1 or self.width < 1:
            raise ConfigError("image size must be positive")
        for name, arr, length in (
            ("occurrence", self.occurrence, C),
            ("size_min", self.size_min, C),
            ("size_max", self.size_max, C),
        ):
            if arr.shape != (length,):
                raise ConfigError(f"{name} must have length {length}")
        if self.colors.shape != (C, 3):
            raise ConfigError(f"colors must be {C}×3")
        if ((self.occurrence < 0) | (self.occurrence > 1)).any():
            raise ConfigError("occurrence outside [0,1]")
        if ((self.size_min <= 0) | (self.size_max > 1)).any() or (
            self.size_min > self.size_max
        ).any():
            raise ConfigError("size fractions must satisfy 0 < min <= max <= 1")
        if not (0 <= self.background_class < C):
            raise ConfigError(f"background_class {self.background_class} out of range")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_json_obj(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "height": self.height,
            "width": self.width,
            "occurrence": self.occurrence.tolist(),
            "size_min": self.size_min.tolist(),
            "size_max": self.size_max.tolist(),
            "colors": self.colors.tolist(),
            "noise_sigma": self.noise_sigma,
            "background_class": self.background_class,
            "seed": self.seed,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SceneConfig":
        return cls(
            num_classes=int(obj["num_classes"]),
            height=int(obj["height"]),
            width=int(obj["width"]),
            occurrence=obj["occurrence"],
            size_min=obj["size_min"],
            size_max=obj["size_max"],
            colors=obj["colors"],
            noise_sigma=float(obj["noise_sigma"]),
            background_class=int(obj["background_class"]),
            seed=int(obj["seed"]),
        )

    @classmethod
    def load(cls, path) -> "SceneConfig":
        try:
            return cls.from_json_obj(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: bad scene config ({exc})") from exc


@dataclass(frozen=True)
class Scene:
    features: np.ndarray  # 3×H×W float32 in [0,1]
    labels: LabelMap


# Twenty archetypes: ten mutually distant base colors for the frequent
# classes, ten shades at distance ~0.25 from one base each so every rare
# class is genuinely confusable with exactly one frequent neighbor under
# noise, while staying far from everything else. The pair distance is sized
# so a prior-biased classifier under-predicts the rare partner without its
# decision region vanishing outright.
_PRESET_COLORS = [
    [0.10, 0.10, 0.12],  # 0 background, dark
    [0.90, 0.12, 0.12],  # 1 red
    [0.10, 0.88, 0.12],  # 2 green
    [0.12, 0.15, 0.90],  # 3 blue
    [0.90, 0.85, 0.12],  # 4 yellow
    [0.88, 0.12, 0.88],  # 5 magenta
    [0.10, 0.85, 0.88],  # 6 cyan
    [0.88, 0.88, 0.90],  # 7 near-white
    [0.50, 0.45, 0.55],  # 8 mid violet-gray
    [0.90, 0.50, 0.12],  # 9 orange
    [0.72, 0.22, 0.12],  # 10 near 1
    [0.26, 0.70, 0.16],  # 11 near 2
    [0.30, 0.25, 0.74],  # 12 near 3
    [0.72, 0.70, 0.20],  # 13 near 4
    [0.70, 0.25, 0.72],  # 14 near 5
    [0.25, 0.68, 0.75],  # 15 near 6
    [0.70, 0.75, 0.75],  # 16 near 7
    [0.38, 0.30, 0.40],  # 17 near 8
    [0.93, 0.46, 0.38],  # 18 near 9
    [0.10, 0.42, 0.40],  # 19 near 0
]

GROUP_NAMES = ("frequent_large", "frequent_small", "rare_large", "rare_small")
#: class indices per group in the default preset
PRESET_GROUPS = (
    tuple(range(0, 5)),
    tuple(range(5, 10)),
    tuple(range(10, 15)),
    tuple(range(15, 20)),
)
#: everything outside the frequent-large group; these carry the long tail
PRESET_TAIL_CLASSES = tuple(range(5, 20))


def default_preset(seed: int = 20_240_001) -> SceneConfig:
    """20 classes, 128×128, four groups crossing frequent/rare with large/small."""
    frequent, rare = 0.9, 0.15
    large, small = (0.05, 0.15), (0.002, 0.01)
    occurrence = np.empty(20)
    size_min = np.empty(20)
    size_max = np.empty(20)
    for group, occ, (lo, hi) in zip(
        PRESET_GROUPS, (frequent, frequent, rare, rare), (large, small, large, small)
    ):
        for j in group:
            occurrence[j] = occ
            size_min[j] = lo
            size_max[j] = hi
    return SceneConfig(
        num_classes=20,
        height=128,
        width=128,
        occurrence=occurrence,
        size_min=size_min,
        size_max=size_max,
        colors=np.array(_PRESET_COLORS),
        noise_sigma=0.10,
        background_class=0,
        seed=seed,
    )


def _side_from_area(area_px: float, max_side: int) -> int:
    # half-up rounding keeps the generator and the analytic oracle on one rule
    side = int(math.floor(math.sqrt(max(area_px, 0.0)) + 0.5))
    return min(max(side, 1), max_side)


def _foreground_order(cfg: SceneConfig) -> list[int]:
    return [j for j in range(cfg.num_classes) if j != cfg.background_class]


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    """Scene number `index`; a pure function of (cfg.seed, index)."""
    rng = np.random.default_rng((cfg.seed, index))
    H, W = cfg.height, cfg.width
    labels = np.full((H, W), cfg.background_class, dtype=np.uint8)
    occur = rng.random(cfg.num_classes) < cfg.occurrence
    occur[cfg.background_class] = False
    max_side = min(H, W)
    for j in _foreground_order(cfg):
        if not occur[j]:
            continue
        area_frac = rng.uniform(cfg.size_min[j], cfg.size_max[j])
        side = _side_from_area(area_frac * H * W, max_side)
        y0 = int(rng.integers(0, H - side + 1))
        x0 = int(rng.integers(0, W - side + 1))
        labels[y0 : y0 + side, x0 : x0 + side] = j
    features = cfg.colors[labels].transpose(2, 0, 1).copy()
    if cfg.noise_sigma > 0:
        features += rng.normal(0.0, cfg.noise_sigma, features.shape)
    np.clip(features, 0.0, 1.0, out=features)
    return Scene(
        features=features.astype(np.float32),
        labels=LabelMap(labels, cfg.num_classes),
    )


def _side_distribution(cfg: SceneConfig, j: int) -> dict[int, float]:
    """Exact distribution of the integer patch side for class j."""
    H, W = cfg.height, cfg.width
    lo = cfg.size_min[j] * H * W
    hi = cfg.size_max[j] * H * W
    max_side = min(H, W)
    if hi <= lo:
        return {_side_from_area(lo, max_side): 1.0}
    dist: dict[int, float] = {}
    for k in range(1, max_side + 1):
        a0 = 0.0 if k == 1 else (k - 0.5) ** 2
        a1 = math.inf if k == max_side else (k + 0.5) ** 2
        overlap = max(0.0, min(hi, a1) - max(lo, a0))
        if overlap > 0:
            dist[k] = overlap / (hi - lo)
    return dist


def _coverage_probability(cfg: SceneConfig, j: int) -> np.ndarray:
    """P(class-j patch covers pixel (y,x)), exact, as an H×W array."""
    H, W = cfg.height, cfg.width
    cov = np.zeros((H, W))
    xs = np.arange(W)
    ys = np.arange(H)
    for side, p in _side_distribution(cfg, j).items():
        cx = np.minimum(xs, W - side) - np.maximum(0, xs - side + 1) + 1
        cy = np.minimum(ys, H - side) - np.maximum(0, ys - side + 1) + 1
        cov += p * np.outer(
            np.clip(cy, 0, None) / (H - side + 1),
            np.clip(cx, 0, None) / (W - side + 1),
        )
    return cov * cfg.occurrence[j]


def expected_frequencies(cfg: SceneConfig) -> np.ndarray:
    """Exact expected per-class pixel frequencies of generated scenes.

    Uses the independence of per-class draws: a pixel shows class j iff j's
    patch covers it and no later-painted class covers it.
    """
    C = cfg.num_classes
    freq = np.zeros(C)
    survive = np.ones((cfg.height, cfg.width))
    for j in reversed(_foreground_order(cfg)):
        cov = _coverage_probability(cfg, j)
        freq[j] = float((cov * survive).mean())
        survive *= 1.0 - cov
    freq[cfg.background_class] = float(survive.mean())
    return freq


@dataclass
class DatasetBundle:
    labeled: DatasetManifest
    unlabeled: DatasetManifest
    test: DatasetManifest
    unlabeled_truth: DatasetManifest
    labeled_distribution: ClassDistribution
    root: Path


def generate_dataset(
    cfg: SceneConfig,
    n_labeled: int,
    n_unlabeled: int,
    n_test: int,
    out_dir,
) -> DatasetBundle:
    """Write labeled/unlabeled/test corpora plus the held-out truth oracle.

    The unlabeled manifest carries no label paths; the true labels go into a
    separate manifest so evaluation and deficiency analysis stay possible.
    """
    if min(n_labeled, n_unlabeled, n_test) < 1:
        raise ConfigError("all split sizes must be >= 1")
    root = Path(out_dir)
    splits = (
        ("labeled", n_labeled, True),
        ("unlabeled", n_unlabeled, False),
        ("test", n_test, True),
    )
    manifests: dict[str, DatasetManifest] = {}
    truth_entries: list[ManifestEntry] = []
    labeled_maps: list[LabelMap] = []
    index = 0
    for split, count, with_labels in splits:
        entries = []
        for i in range(count):
            image_id = f"{split}_{i:04d}"
            scene = generate_scene(cfg, index)
            index += 1
            image_path = root / split / f"{image_id}.image.dten"
            write_tensor(scene.features, image_path)
            label_path = root / (split if with_labels else "unlabeled_truth")
            label_path = label_path / f"{image_id}.labels.dten"
            write_tensor(scene.labels.values, label_path)
            entry = ManifestEntry(
                image_id=image_id,
                image_path=image_path,
                label_path=label_path if with_labels else None,
            )
            entries.append(entry)
            if not with_labels:
                truth_entries.append(
                    ManifestEntry(image_id=image_id, image_path=image_path, label_path=label_path)
                )
            if split == "labeled":
                labeled_maps.append(scene.labels)
        manifests[split] = DatasetManifest(cfg.num_classes, IGNORE, entries)
        save_manifest(manifests[split], root / f"{split}.json")
    truth = DatasetManifest(cfg.num_classes, IGNORE, truth_entries)
    save_manifest(truth, root / "unlabeled_truth.json")
    labeled_dist = label_frequencies(labeled_maps, cfg.num_classes)
    atomic_write_json(root / "target.json", labeled_dist.to_json_obj())
    atomic_write_json(root / "scene_config.json", cfg.to_json_obj())
    return DatasetBundle(
        labeled=manifests["labeled"],
        unlabeled=manifests["unlabeled"],
        test=manifests["test"],
        unlabeled_truth=truth,
        labeled_distribution=labeled_dist,
        root=root,
    )
