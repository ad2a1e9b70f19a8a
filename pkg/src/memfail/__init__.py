"""DRAM uncorrectable-error prediction from correctable-error logs."""

from .bitmap import SpatialBitStats, merge_bitmaps, spatial_features
from .evaluate import EvaluationReport, IndicatorScorer, Timeline, compute_alarms, evaluate, metrics, virr
from .faults import FaultReport, FaultThresholds, classify_faults, exclusive_faults
from .features import (
    FEATURE_NAMES, Dataset, FeatureVector, WindowConfig, build_dataset, build_feature_vector,
    label_samples, oversample, select_features,
)
from .ingest import CEEvent, DimmSpec, ErrorBitmap, MemoryAddress, UEEvent, load_dimm_specs, parse_events
from .model import Hyperparams, TreeEnsemble, classify, predict_proba, train
from .risk import DEFAULT_RULES, RiskyPatternRule, match_rules, windowed_indicators
from .synthgen import GeneratorConfig, generate

__version__ = "0.1.0"

__all__ = [
    "CEEvent", "DEFAULT_RULES", "Dataset", "DimmSpec", "ErrorBitmap", "EvaluationReport", "FEATURE_NAMES",
    "FaultReport", "FaultThresholds", "FeatureVector", "GeneratorConfig", "Hyperparams", "IndicatorScorer",
    "MemoryAddress", "RiskyPatternRule", "SpatialBitStats", "Timeline", "TreeEnsemble", "UEEvent",
    "WindowConfig", "build_dataset", "build_feature_vector", "classify", "classify_faults", "compute_alarms",
    "evaluate", "exclusive_faults", "generate", "label_samples", "load_dimm_specs", "match_rules",
    "merge_bitmaps", "metrics", "oversample", "parse_events", "predict_proba", "select_features",
    "spatial_features", "train", "virr", "windowed_indicators",
]
