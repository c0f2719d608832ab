import numpy as np
import pytest

from dars.tensor_store import IGNORE, DatasetManifest, LabelMap, ManifestEntry, ProbabilityVolume, save_manifest, write_tensor


def prob_volume(per_pixel, num_classes=None):
    """Build a ProbabilityVolume from an H×W list of per-pixel class probabilities."""
    arr = np.asarray(per_pixel, dtype=np.float32)  # H×W×C
    if arr.ndim == 2:
        arr = arr[None, :, :]
    return ProbabilityVolume(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def volume_with_confidences(confidences, cls=0, num_classes=2):
    """A volume whose pixels all argmax to `cls` with the given max probabilities.

    Confidences must exceed 1/num_classes so the argmax lands on `cls`; the
    remaining mass spreads evenly over the other classes.
    """
    conf = np.asarray(confidences, dtype=np.float32).reshape(1, -1)
    rest = (1.0 - conf) / (num_classes - 1)
    vol = np.repeat(rest[None, :, :], num_classes, axis=0)
    vol[cls] = conf
    return ProbabilityVolume(vol.astype(np.float32))


def label_map(rows, num_classes):
    return LabelMap(np.asarray(rows, dtype=np.uint8), num_classes)


def write_label_manifest(tmp_path, maps, num_classes, name="labels.json"):
    """Write label maps as tensors plus a manifest referencing them."""
    entries = []
    for i, lm in enumerate(maps):
        p = tmp_path / f"img_{i:03d}.labels.dten"
        write_tensor(np.asarray(lm.values if isinstance(lm, LabelMap) else lm, dtype=np.uint8), p)
        entries.append(ManifestEntry(image_id=f"img_{i:03d}", label_path=p))
    manifest = DatasetManifest(num_classes, IGNORE, entries)
    save_manifest(manifest, tmp_path / name)
    return manifest


def write_prob_manifest(tmp_path, volumes, num_classes, name="preds.json"):
    """Write probability volumes as tensors plus a manifest referencing them."""
    entries = []
    for i, pv in enumerate(volumes):
        p = tmp_path / f"img_{i:03d}.probs.dten"
        write_tensor(pv.values if isinstance(pv, ProbabilityVolume) else np.asarray(pv, np.float32), p)
        entries.append(ManifestEntry(image_id=f"img_{i:03d}", prob_path=p))
    manifest = DatasetManifest(num_classes, IGNORE, entries)
    save_manifest(manifest, tmp_path / name)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
