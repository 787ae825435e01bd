"""pcreval: label-free mAP estimation for object detectors.

Scores unlabeled test sets from the relationship between pre- and post-NMS
detections, regresses the scores against true mAP on a meta-dataset, and
ships a deterministic synthetic meta-dataset generator plus a ground-truth
mAP oracle for validation.
"""

from .detection import (
    CandidateBox,
    FinalPrediction,
    GroundTruthBox,
    ImageRecord,
    associate,
    nms,
    prepare_record,
    read_dump,
    write_dump,
)
from .errors import DataError, NumericalError
from .evaluation import ApReport, evaluate_map
from .geometry import Box, center_closeness, iou, merge_boxes
from .regression import (
    EvalReport,
    MetaSample,
    RegressionModel,
    fit,
    fit_piecewise,
    leave_one_out,
    loo_by_severity,
    predict,
    statistics,
)
from .scoring import (
    DatasetSummary,
    ImageScores,
    PcrParams,
    baseline_scores,
    image_consistency,
    image_reliability,
    score_image,
    sigma_c,
    sigma_r,
    summarize,
)
from .synth import (
    DegradationParams,
    SceneParams,
    SourceSpec,
    build_meta,
    default_source_bank,
    generate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "ApReport",
    "Box",
    "CandidateBox",
    "DataError",
    "DatasetSummary",
    "DegradationParams",
    "EvalReport",
    "FinalPrediction",
    "GroundTruthBox",
    "ImageRecord",
    "ImageScores",
    "MetaSample",
    "NumericalError",
    "PcrParams",
    "RegressionModel",
    "SceneParams",
    "SourceSpec",
    "associate",
    "baseline_scores",
    "build_meta",
    "center_closeness",
    "default_source_bank",
    "evaluate_map",
    "fit",
    "fit_piecewise",
    "generate_dataset",
    "image_consistency",
    "image_reliability",
    "iou",
    "leave_one_out",
    "loo_by_severity",
    "merge_boxes",
    "nms",
    "predict",
    "prepare_record",
    "read_dump",
    "score_image",
    "sigma_c",
    "sigma_r",
    "statistics",
    "summarize",
    "write_dump",
]
