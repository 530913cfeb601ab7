"""Class-structured batch sampling and budget-calibrated training utilities.

The package covers the full loop around imbalanced slice-level segmentation
experiments: dataset modeling with per-slice class presence (corpus), random
/ weighted / episodic batch samplers (samplers), iteration-budget arithmetic
and schedule calibration (budget), Dice / HD95 metrics (metrics), CT label
refinement (refine), synthetic dataset generation (synth), and a small
deterministic trainer tying them together (toytrain).  The `epibatch` CLI
exposes each piece.
"""

__version__ = "0.1.0"

from .budget import (
    BudgetWarning,
    CalibratedSchedule,
    EarlyStopState,
    FixedPlan,
    ScheduleSpec,
    calibrate,
    early_stop_update,
    fixed_budget,
    iterations_per_epoch,
    lr_at,
)
from .corpus import (
    ClassCatalog,
    Dataset,
    DatasetError,
    ImageVolume,
    LabelVolume,
    SliceRecord,
    SliceTable,
    SplitSpec,
    Splits,
    VolumeStore,
    load_dataset,
    make_splits,
    prevalence_report,
)
from .formats import PayloadError, read_payload, write_payload
from .metrics import EvalReport, boundary_mask, dice_score, evaluate_pair, hd95, surface_distances
from .refine import (
    HuRange,
    RefineConfig,
    compose_imat,
    compose_residual_muscle,
    compose_vat,
    crop_longitudinal,
    hu_threshold,
    hu_window_normalize,
    refine_masks,
    remove_small_components,
)
from .samplers import (
    Batch,
    Episode,
    EpisodicSampler,
    RandomSampler,
    SamplerConfig,
    WeightedSampler,
    exposure_audit,
    make_sampler,
    weighted_probabilities,
)
from .synth import ClassSpec, SynthSpec, generate, paperlike_spec
from .toytrain import (
    OptimState,
    ToyModel,
    ToySegmenter,
    TrainLog,
    TrainResult,
    loss,
    optimizer_step,
    predict_labels,
    train,
)

__all__ = [
    "__version__",
    "BudgetWarning",
    "CalibratedSchedule",
    "EarlyStopState",
    "FixedPlan",
    "ScheduleSpec",
    "calibrate",
    "early_stop_update",
    "fixed_budget",
    "iterations_per_epoch",
    "lr_at",
    "ClassCatalog",
    "Dataset",
    "DatasetError",
    "ImageVolume",
    "LabelVolume",
    "SliceRecord",
    "SliceTable",
    "SplitSpec",
    "Splits",
    "VolumeStore",
    "load_dataset",
    "make_splits",
    "prevalence_report",
    "PayloadError",
    "read_payload",
    "write_payload",
    "EvalReport",
    "boundary_mask",
    "dice_score",
    "evaluate_pair",
    "hd95",
    "surface_distances",
    "HuRange",
    "RefineConfig",
    "compose_imat",
    "compose_residual_muscle",
    "compose_vat",
    "crop_longitudinal",
    "hu_threshold",
    "hu_window_normalize",
    "refine_masks",
    "remove_small_components",
    "Batch",
    "Episode",
    "EpisodicSampler",
    "RandomSampler",
    "SamplerConfig",
    "WeightedSampler",
    "exposure_audit",
    "make_sampler",
    "weighted_probabilities",
    "ClassSpec",
    "SynthSpec",
    "generate",
    "paperlike_spec",
    "OptimState",
    "ToyModel",
    "ToySegmenter",
    "TrainLog",
    "TrainResult",
    "loss",
    "optimizer_step",
    "predict_labels",
    "train",
]
