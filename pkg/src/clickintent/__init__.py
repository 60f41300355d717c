"""Purchase-intent prediction from clickstream sessions with small numpy networks."""

from .evalx import evaluate, roc_auc, select_threshold, top_k_predictions
from .models import (
    ConcatSequentialClassifier,
    FfnnClassifier,
    LstmClassifier,
    RnnClassifier,
)

__version__ = "0.1.0"

__all__ = [
    "ConcatSequentialClassifier",
    "FfnnClassifier",
    "LstmClassifier",
    "RnnClassifier",
    "evaluate",
    "roc_auc",
    "select_threshold",
    "top_k_predictions",
]
