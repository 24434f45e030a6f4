"""Cosine-similarity retrieval over global descriptors.

The index is exact brute-force by default (the intended scale is thousands
of frames); an inverted-file mode with a k-means coarse quantizer is
available for headroom.  Ranking is deterministic: descending score with
ties broken by ascending frame id.  Two-stage retrieval re-ranks the
global-descriptor shortlist by refinement-descriptor cosine.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional

import numpy as np

from mprf import dataio
from mprf.geometry import l2_normalize

Shortlist = list[tuple[int, float]]

DEFAULT_SHORTLIST = 20
DEFAULT_RERANK = 10
DEFAULT_IVF_PROBE = 4

UNIT_NORM_TOL = 1e-6


def _checked_unit(descriptor: np.ndarray, what: str) -> np.ndarray:
    vec = np.asarray(descriptor, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError(f"{what} must be a 1-D vector")
    unit, zero = l2_normalize(vec)
    if zero:
        raise ValueError(f"{what} has zero norm")
    if abs(np.linalg.norm(vec) - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"{what} is not unit-norm")
    return unit


def _ranked(ids: np.ndarray, scores: np.ndarray, k: int) -> Shortlist:
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


class DescriptorIndex:
    """Searchable store of (frame_id, unit global descriptor)."""

    def __init__(self, mode: str = "exact", n_lists: Optional[int] = None,
                 n_probe: int = DEFAULT_IVF_PROBE):
        if mode not in ("exact", "ivf"):
            raise ValueError(f"unknown index mode {mode!r}")
        self.mode = mode
        self.n_lists = n_lists
        self.n_probe = n_probe
        self._ids: list[int] = []
        self._vectors: list[np.ndarray] = []
        self._id_set: set[int] = set()
        self._centroids: Optional[np.ndarray] = None
        self._lists: list[list[int]] = []
        self._matrix: Optional[np.ndarray] = None  # built lazily, reset on add

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def frame_ids(self) -> list[int]:
        return list(self._ids)

    @property
    def dim(self) -> Optional[int]:
        return self._vectors[0].shape[0] if self._vectors else None

    def add(self, frame_id: int, descriptor: np.ndarray) -> None:
        if frame_id in self._id_set:
            raise ValueError(f"duplicate frame id {frame_id}")
        vec = _checked_unit(descriptor, f"descriptor for frame {frame_id}")
        if self._vectors and vec.shape != self._vectors[0].shape:
            raise ValueError("descriptor dimension disagrees with the index")
        self._ids.append(int(frame_id))
        self._vectors.append(vec)
        self._id_set.add(int(frame_id))
        self._matrix = None
        if self._centroids is not None:
            sims = self._centroids @ vec
            self._lists[int(np.argmax(sims))].append(len(self._ids) - 1)

    def _stacked(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack(self._vectors)
        return self._matrix

    def train_lists(self, n_lists: Optional[int] = None, seed: int = 0) -> None:
        """Build the inverted-file coarse quantizer over the stored vectors
        (default list count: round(sqrt(N)))."""
        if self.mode != "ivf":
            raise ValueError("train_lists only applies to inverted-file mode")
        if not self._vectors:
            raise ValueError("cannot train on an empty index")
        matrix = self._stacked()
        n = len(self._ids)
        count = n_lists or self.n_lists or max(1, round(math.sqrt(n)))
        count = min(count, n)
        from mprf.aggregation import _kmeans

        rng = np.random.default_rng(seed)
        self._centroids = _kmeans(matrix, count, rng)
        self.n_lists = count
        assignments = np.argmax(matrix @ self._centroids.T, axis=1)
        self._lists = [list(np.flatnonzero(assignments == j)) for j in range(count)]

    def _candidate_rows(self, query: np.ndarray) -> np.ndarray:
        if self.mode == "exact":
            return np.arange(len(self._ids))
        if self._centroids is None:
            raise ValueError("inverted-file index requires train_lists before search")
        sims = self._centroids @ query
        probe = min(self.n_probe, len(self._lists))
        top_lists = np.argsort(-sims, kind="stable")[:probe]
        rows = [row for lst in top_lists for row in self._lists[lst]]
        return np.asarray(sorted(rows), dtype=np.int64)

    def search(
        self,
        query: np.ndarray,
        k: int,
        exclude: Optional[Callable[[int], bool]] = None,
    ) -> Shortlist:
        """Top-k frames by cosine similarity, skipping excluded ids."""
        if k < 1:
            raise ValueError("k must be at least 1")
        if not self._ids:
            raise ValueError("search on an empty index")
        unit = _checked_unit(query, "query descriptor")
        rows = self._candidate_rows(unit)
        ids = np.asarray(self._ids, dtype=np.int64)[rows]
        if exclude is not None:
            keep = np.array([not exclude(int(fid)) for fid in ids], dtype=bool)
            rows, ids = rows[keep], ids[keep]
        if rows.size == 0:
            return []
        scores = self._stacked()[rows] @ unit
        return _ranked(ids, scores, k)

    def save(self, path) -> None:
        dataio.write_vector_records(path, dataio.TAG_GLOBAL_INDEX, self._ids, self._vectors)

    @classmethod
    def load(cls, path, mode: str = "exact", n_probe: int = DEFAULT_IVF_PROBE) -> "DescriptorIndex":
        ids, matrix = dataio.read_vector_records(path, dataio.TAG_GLOBAL_INDEX)
        index = cls(mode=mode, n_probe=n_probe)
        for fid, vec in zip(ids, matrix):
            index.add(fid, vec)
        return index


class RefinementStore:
    """Per-frame refinement descriptors for stage-2 re-ranking."""

    def __init__(self):
        self._store: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._store

    def add(self, frame_id: int, descriptor: np.ndarray) -> None:
        if frame_id in self._store:
            raise ValueError(f"duplicate frame id {frame_id}")
        self._store[int(frame_id)] = _checked_unit(
            descriptor, f"refinement descriptor for frame {frame_id}"
        )

    def get(self, frame_id: int) -> np.ndarray:
        try:
            return self._store[frame_id]
        except KeyError:
            raise KeyError(f"no refinement descriptor for frame {frame_id}") from None

    def save(self, path) -> None:
        ids = sorted(self._store)
        dataio.write_vector_records(
            path, dataio.TAG_REFINEMENT_STORE, ids, [self._store[i] for i in ids]
        )

    @classmethod
    def load(cls, path) -> "RefinementStore":
        ids, matrix = dataio.read_vector_records(path, dataio.TAG_REFINEMENT_STORE)
        store = cls()
        for fid, vec in zip(ids, matrix):
            store.add(fid, vec)
        return store


def two_stage_retrieve(
    query_global: np.ndarray,
    query_refinement: np.ndarray,
    index: DescriptorIndex,
    refinement_store: RefinementStore,
    n1: int = DEFAULT_SHORTLIST,
    n2: int = DEFAULT_RERANK,
    exclude: Optional[Callable[[int], bool]] = None,
) -> Shortlist:
    """Global-descriptor shortlist of n1, re-ranked to n2 by refinement
    cosine.  Raises KeyError if a shortlisted frame has no refinement
    descriptor."""
    if n2 > n1:
        raise ValueError(f"n2 ({n2}) must not exceed n1 ({n1})")
    stage1 = index.search(query_global, n1, exclude)
    if not stage1:
        return []
    query_unit = _checked_unit(query_refinement, "query refinement descriptor")
    ids = np.asarray([fid for fid, _ in stage1], dtype=np.int64)
    scores = np.asarray([float(refinement_store.get(int(fid)) @ query_unit) for fid in ids])
    return _ranked(ids, scores, n2)
