from evalign.metrics.chair import ChairResult, chair
from evalign.metrics.cider import CiderResult, CiderSpec, cider
from evalign.metrics.scoring import (
    Aggregate,
    AbstentionResult,
    ItmResult,
    abstention_metrics,
    aggregate,
    itm_accuracy,
    normalize_answer,
)
from evalign.metrics.vocabulary import (
    ObjectVocabulary,
    build_vocabulary,
    extract_objects,
    load_vocabulary,
    singularize,
)

__all__ = [
    "Aggregate",
    "AbstentionResult",
    "ChairResult",
    "CiderResult",
    "CiderSpec",
    "ItmResult",
    "ObjectVocabulary",
    "abstention_metrics",
    "aggregate",
    "build_vocabulary",
    "chair",
    "cider",
    "extract_objects",
    "itm_accuracy",
    "load_vocabulary",
    "normalize_answer",
    "singularize",
]
