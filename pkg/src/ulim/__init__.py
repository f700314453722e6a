"""Long-term multi-interest retrieval.

Dual-interest user encoder, a pointer-generator next-category network,
category-partitioned item indexes with cascaded search, and an offline
evaluation harness over a synthetic behavior generator.
"""

from .config import RunConfig
from .datamodel import BehaviorData, BehaviorEvent, Catalog, UserHistory
from .dual_interest import DualInterestModel, train
from .pgin import PGIN, train_pgin
from .retrieval import IndexSet, build_indexes, cascaded_retrieve

__version__ = "0.1.0"

__all__ = [
    "BehaviorData", "BehaviorEvent", "Catalog", "DualInterestModel", "IndexSet", "PGIN", "RunConfig",
    "UserHistory", "build_indexes", "cascaded_retrieve", "train", "train_pgin",
]
