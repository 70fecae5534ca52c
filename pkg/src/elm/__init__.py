"""Elastic language-model architecture search.

A desk-scale, dependency-light implementation of constraint-aware
transformer architecture search: an elastic weight-sharing supernet
(six candidate blocks per layer), PCA-guided FFN dimension growth,
CKA-guided attention-head reduction, relational knowledge distillation,
and evolutionary search under a hard parameter ceiling, all on a
hand-written numpy autograd core.
"""

from .config import SearchConfig
from .genome import ArchGenome, ModelDims, ParamBudget, count_params
from .pipeline import run_search, train_final

__version__ = "0.1.0"

__all__ = [
    "ArchGenome",
    "ModelDims",
    "ParamBudget",
    "SearchConfig",
    "count_params",
    "run_search",
    "train_final",
    "__version__",
]
