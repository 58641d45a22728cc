"""Maximum inner-product indexes over key vectors."""

from .base import SearchResult
from .flat import FlatIndex, exact_knn, flat_build, flat_search
from .ivf import IVFIndex, default_nlist, ivf_build, ivf_search, kmeans
from .oodgraph import (
    EntryStrategy,
    OODGraph,
    OODGraphBuildParams,
    OODSearchParams,
    PruneMetric,
    ood_build,
    ood_search,
)

__all__ = [
    "SearchResult",
    "FlatIndex", "exact_knn", "flat_build", "flat_search",
    "IVFIndex", "default_nlist", "ivf_build", "ivf_search", "kmeans",
    "EntryStrategy", "OODGraph", "OODGraphBuildParams", "OODSearchParams",
    "PruneMetric", "ood_build", "ood_search",
]
