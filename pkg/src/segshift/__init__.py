"""Segment-local distribution shift adaptation for tabular data."""

__version__ = "0.1.0"

from .data import (
    BinaryLabelShiftSpec,
    CovariateShiftSpec,
    DataError,
    Dataset,
    MulticlassLabelShiftSpec,
    SplitPlan,
    SyntheticConfig,
    TaskKind,
    construct_shift,
    kfold_plan,
    load_csv,
    simulate_local_covshift,
    split_base_tune,
    write_csv,
)
from .evalcv import CvGrid, SegmentReport, cross_validate, metric, per_segment_report
from .learners import (
    GBTConfig,
    GBTModel,
    LinearModel,
    LossKind,
    cluster_base_config,
    fit_gbt,
    fit_linear,
    refine_config,
)
from .mr import (
    BaseEnsemble,
    DRModel,
    MRConfig,
    MRModel,
    Stage1Model,
    fit_base_ensemble,
    fit_dr,
    fit_mr,
    fit_stage1,
    fit_stage2,
)
from .segmentation import (
    ClusterAssignment,
    KernelSpec,
    SegmentDistanceMatrix,
    choose_num_clusters,
    cluster_segments,
    median_bandwidth,
    mmd_unbiased,
    segment_distance_matrix,
)
from .weights import (
    ClassWeightVector,
    WeightVector,
    expand_class_weights,
    fit_bbse,
    fit_discriminative_weights,
    fit_kmm,
    uniform_weights,
)

__all__ = [
    "__version__",
    "BaseEnsemble",
    "BinaryLabelShiftSpec",
    "ClassWeightVector",
    "ClusterAssignment",
    "CovariateShiftSpec",
    "CvGrid",
    "DRModel",
    "DataError",
    "Dataset",
    "GBTConfig",
    "GBTModel",
    "KernelSpec",
    "LinearModel",
    "LossKind",
    "MRConfig",
    "MRModel",
    "MulticlassLabelShiftSpec",
    "SegmentDistanceMatrix",
    "SegmentReport",
    "SplitPlan",
    "Stage1Model",
    "SyntheticConfig",
    "TaskKind",
    "WeightVector",
    "choose_num_clusters",
    "cluster_base_config",
    "cluster_segments",
    "construct_shift",
    "cross_validate",
    "expand_class_weights",
    "fit_base_ensemble",
    "fit_bbse",
    "fit_discriminative_weights",
    "fit_dr",
    "fit_gbt",
    "fit_kmm",
    "fit_linear",
    "fit_mr",
    "fit_stage1",
    "fit_stage2",
    "kfold_plan",
    "load_csv",
    "median_bandwidth",
    "metric",
    "mmd_unbiased",
    "per_segment_report",
    "refine_config",
    "segment_distance_matrix",
    "simulate_local_covshift",
    "split_base_tune",
    "uniform_weights",
    "write_csv",
]
