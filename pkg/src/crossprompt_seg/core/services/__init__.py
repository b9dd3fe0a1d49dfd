"""Services package for crossprompt-seg.

Exposes the training and evaluation services.
"""

from crossprompt_seg.core.services.evaluation_service import (
    EvaluationBranch,
    EvaluationMode,
    EvaluationResult,
    EvaluationService,
)
from crossprompt_seg.core.services.training_service import (
    TrainingData,
    TrainingResult,
    TrainingService,
)

__all__ = [
    "EvaluationBranch",
    "EvaluationMode",
    "EvaluationResult",
    "EvaluationService",
    "TrainingData",
    "TrainingResult",
    "TrainingService",
]
