"""Distribution-aligned pseudo-label generation and a desk-scale self-training lab.

The package converts biased per-pixel class-probability predictions into
pseudo-label maps whose class distribution matches a target exactly
(per-class order-statistic thresholds plus exact-count keyed random
sampling), alongside single-threshold and class-balanced baselines, a
temperature-scaling calibrator, a synthetic long-tailed scene generator, a
linear per-pixel classifier, and an iterative self-training driver with a
progressive labeling/augmentation schedule.
"""

from .calibration import Temperature, apply_temperature, fit_temperature, mean_nll
from .distribution import (
    ClassDistribution,
    DesiredCounts,
    desired_counts,
    kl_divergence,
    label_frequencies,
    pred_frequencies,
)
from .errors import DarsError
from .pseudo_label import (
    PredictionMap,
    PseudoLabelResult,
    SamplingKey,
    ThresholdPlan,
    apply_thresholds,
    cbst_label,
    compute_thresholds,
    dars_label,
    sample_exact,
    st_label,
)
from .scenegen import Scene, SceneConfig, default_preset, expected_frequencies, generate_dataset, generate_scene
from .selftrain import (
    EvalReport,
    PipelineConfig,
    RoundSchedule,
    RoundSpec,
    evaluate,
    run_pipeline,
    schedule_scale_range,
)
from .tensor_store import (
    IGNORE,
    DatasetManifest,
    LabelMap,
    LogitVolume,
    ProbabilityVolume,
    load_manifest,
    read_tensor,
    save_manifest,
    write_tensor,
)
from .toymodel import (
    LinearPixelModel,
    TrainConfig,
    augment_random_scale,
    extract_features,
    forward,
    predict_corpus,
    train,
)

__version__ = "0.1.0"
