from __future__ import annotations

import os

from .common import SearchResult
from .hnsw import HnswIndex, hnsw_build, hnsw_search, load_hnsw, save_hnsw
from .ivf import IvfIndex, ivf_build, ivf_candidates, ivf_search, load_ivf, save_ivf


def load_index(path: os.PathLike | str):
    """Load an IVF or HNSW index, dispatching on the file magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"FDIV":
        return load_ivf(path)
    if magic == b"FDHN":
        return load_hnsw(path)
    raise ValueError(f"{path}: not an index file")


def save_index(index, path: os.PathLike | str) -> None:
    if isinstance(index, IvfIndex):
        save_ivf(index, path)
    elif isinstance(index, HnswIndex):
        save_hnsw(index, path)
    else:
        raise TypeError(f"cannot save {type(index).__name__}")


__all__ = [
    "SearchResult",
    "IvfIndex",
    "ivf_build",
    "ivf_candidates",
    "ivf_search",
    "save_ivf",
    "load_ivf",
    "HnswIndex",
    "hnsw_build",
    "hnsw_search",
    "save_hnsw",
    "load_hnsw",
    "load_index",
    "save_index",
]
