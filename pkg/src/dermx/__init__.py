"""dermx: skin-lesion classification with explainable saliency maps.

Library layout mirrors the pipeline: :mod:`dermx.dataset` (ingestion,
stratified split, archives), :mod:`dermx.augment`, :mod:`dermx.models`,
:mod:`dermx.training`, :mod:`dermx.metrics`, :mod:`dermx.xai` and the
``dermx`` CLI in :mod:`dermx.cli`. :class:`dermx.LesionClassifier` is the
sklearn-style entry point.
"""

from .augment import AugmentationPolicy, RandomAugmenter, TransformSpec, apply_transform, sample_transform
from .dataset import (
    LesionRecord,
    Partition,
    SplitManifest,
    export_archive,
    load_and_resize,
    load_archive,
    parse_metadata,
    stratified_split,
)
from .errors import DermxError
from .estimator import LesionClassifier
from .labels import CLASS_NAMES, NUM_CLASSES, ClassLabel
from .metrics import (
    ClassificationReport,
    confusion_matrix,
    per_class_counts,
    report_from_predictions,
    weighted_report,
)
from .models import ModelConfig, ModelHandle, TABLE_CONFIGS, build_classifier, list_layers, load_checkpoint
from .training import EpochStat, TrainingResult, plateau_lr_step, select_best, train
from .xai import (
    SaliencyMap,
    SaliencyMethod,
    faster_score_cam,
    render_overlay,
    score_cam,
    smoothgrad,
    vanilla_gradient,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "RandomAugmenter", "TransformSpec", "apply_transform",
    "sample_transform", "LesionRecord", "Partition", "SplitManifest", "export_archive",
    "load_and_resize", "load_archive", "parse_metadata", "stratified_split", "DermxError",
    "LesionClassifier", "CLASS_NAMES", "NUM_CLASSES", "ClassLabel", "ClassificationReport",
    "confusion_matrix", "per_class_counts", "report_from_predictions", "weighted_report",
    "ModelConfig", "ModelHandle", "TABLE_CONFIGS", "build_classifier", "list_layers",
    "load_checkpoint", "EpochStat", "TrainingResult", "plateau_lr_step", "select_best",
    "train", "SaliencyMap", "SaliencyMethod", "faster_score_cam", "render_overlay",
    "score_cam", "smoothgrad", "vanilla_gradient", "__version__",
]
