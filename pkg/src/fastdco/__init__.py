"""Cheap distance comparisons for approximate nearest-neighbour search.

Vectors are rotated (PCA or random) so that a prefix of coordinates carries
most of the variance; candidate points are rejected from a search's result
queue from that prefix alone when a bound or a learned linear test says they
cannot beat the current threshold.
"""

from . import _backend
from .dco import DcoStrategy
from .index import (HnswIndex, IvfIndex, SearchResult, hnsw_build, hnsw_search, ivf_build,
                    ivf_search, load_index, save_index)
from .transform import Rotor, fit_pca, fit_random_rotor
from .vecio import brute_force_knn, read_fvecs, read_ivecs, write_fvecs, write_ivecs

__version__ = "0.1.0"

available_backends = _backend.available

__all__ = [
    "DcoStrategy",
    "HnswIndex",
    "IvfIndex",
    "SearchResult",
    "Rotor",
    "brute_force_knn",
    "fit_pca",
    "fit_random_rotor",
    "hnsw_build",
    "hnsw_search",
    "ivf_build",
    "ivf_search",
    "load_index",
    "save_index",
    "read_fvecs",
    "read_ivecs",
    "write_fvecs",
    "write_ivecs",
    "available_backends",
]
