"""Visual-LiDAR fusion and one-to-one correspondence matching.

Patch embeddings are lifted into 3D through the camera model using LiDAR
depth, paired with the LiDAR point descriptors, and fused by
normalize-and-concatenate.  Because both blocks are unit length, the cosine
between two fused descriptors is the mean of the per-modality cosines.
Matching solves the optimal one-to-one assignment over the fused cosine
matrix and then rejects weak pairs against a similarity threshold
(default 0.90).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mprf.geometry import CameraIntrinsics, l2_normalize, project_points, unproject_pixel

DEFAULT_SIMILARITY_THRESHOLD = 0.90
DEFAULT_PATCH_GRID = (16, 16)

PAD_SENTINEL = -1.0


@dataclass(frozen=True)
class LidarScan:
    """Raw scan: point coordinates (meters, LiDAR frame) plus one
    descriptor per point."""

    points: np.ndarray       # (M, 3)
    descriptors: np.ndarray  # (M, d_lidar)

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64)
        descriptors = np.asarray(self.descriptors, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (M, 3), got {points.shape}")
        if points.shape[0] < 1:
            raise ValueError("scan must contain at least one point")
        if descriptors.ndim != 2 or descriptors.shape[0] != points.shape[0]:
            raise ValueError("descriptor count must equal point count")
        if not np.all(np.isfinite(points)):
            raise ValueError("scan points contain non-finite coordinates")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "descriptors", descriptors)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class FusedPointSet:
    """3D points in the camera frame, each carrying a fused
    visual|LiDAR descriptor whose two blocks are independently unit-norm."""

    points: np.ndarray       # (Q, 3)
    descriptors: np.ndarray  # (Q, d_vis + d_lidar)
    patch_ids: np.ndarray    # (Q,) source patch index
    visual_dim: int

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def empty(self) -> bool:
        return len(self) == 0


@dataclass(frozen=True)
class CorrespondenceSet:
    """One-to-one thresholded matches between two fused point sets."""

    query_indices: np.ndarray
    candidate_indices: np.ndarray
    similarities: np.ndarray

    def __len__(self) -> int:
        return self.query_indices.shape[0]


def fuse_descriptors(visual: np.ndarray, lidar: np.ndarray) -> np.ndarray:
    """Concatenate the l2-normalized visual and LiDAR blocks.

    Raises on a zero-norm block; callers building point sets drop such
    points instead.
    """
    vis_unit, vis_zero = l2_normalize(visual)
    lid_unit, lid_zero = l2_normalize(lidar)
    if vis_zero or lid_zero:
        raise ValueError("cannot fuse a zero-norm descriptor block")
    return np.concatenate([vis_unit, lid_unit])


def _empty_fused(visual_dim: int, lidar_dim: int) -> FusedPointSet:
    return FusedPointSet(
        points=np.empty((0, 3)),
        descriptors=np.empty((0, visual_dim + lidar_dim)),
        patch_ids=np.empty(0, dtype=np.int64),
        visual_dim=visual_dim,
    )


def lift_patches(
    patch_feats: np.ndarray,
    scan: LidarScan,
    intrinsics: CameraIntrinsics,
    patch_grid: tuple[int, int] = DEFAULT_PATCH_GRID,
) -> FusedPointSet:
    """Lift patch embeddings into 3D via LiDAR depth.

    Scan points are moved into the camera frame, projected, and bucketed by
    patch footprint.  Each populated patch becomes one fused point: its
    depth is the median projected depth within the footprint, its location
    the patch-center pixel unprojected at that depth, and its LiDAR
    descriptor that of the projected point nearest the patch center.
    Patches without points, and points whose descriptor blocks have zero
    norm, are dropped; if nothing projects into the image the returned set
    is empty.
    """
    feats = np.asarray(patch_feats, dtype=np.float64)
    rows, cols = patch_grid
    if rows < 1 or cols < 1:
        raise ValueError("patch grid must be positive")
    if feats.ndim != 2 or feats.shape[0] != rows * cols:
        raise ValueError(
            f"patch features must be ({rows * cols}, d_in) for a {rows}x{cols} grid, "
            f"got {feats.shape}"
        )
    lidar_dim = scan.descriptors.shape[1]

    cam_points = intrinsics.cam_from_lidar.apply(scan.points)
    uv, depth, valid = project_points(cam_points, intrinsics)
    if not valid.any():
        return _empty_fused(feats.shape[1], lidar_dim)

    patch_w = intrinsics.width / cols
    patch_h = intrinsics.height / rows
    idx = np.flatnonzero(valid)
    patch_col = np.floor(uv[idx, 0] / patch_w).astype(np.int64)
    patch_row = np.floor(uv[idx, 1] / patch_h).astype(np.int64)
    np.clip(patch_col, 0, cols - 1, out=patch_col)
    np.clip(patch_row, 0, rows - 1, out=patch_row)
    patch_id = patch_row * cols + patch_col

    points_out: list[np.ndarray] = []
    descs_out: list[np.ndarray] = []
    ids_out: list[int] = []
    for pid in np.unique(patch_id):
        members = idx[patch_id == pid]
        patch_depth = float(np.median(depth[members]))
        center_u = (pid % cols + 0.5) * patch_w
        center_v = (pid // cols + 0.5) * patch_h
        offsets = uv[members] - np.array([center_u, center_v])
        nearest = members[int(np.argmin(np.einsum("ij,ij->i", offsets, offsets)))]

        vis_unit, vis_zero = l2_normalize(feats[pid])
        lid_unit, lid_zero = l2_normalize(scan.descriptors[nearest])
        if vis_zero or lid_zero:
            continue
        points_out.append(unproject_pixel(center_u, center_v, patch_depth, intrinsics))
        descs_out.append(np.concatenate([vis_unit, lid_unit]))
        ids_out.append(int(pid))

    if not points_out:
        return _empty_fused(feats.shape[1], lidar_dim)
    return FusedPointSet(
        points=np.stack(points_out),
        descriptors=np.stack(descs_out),
        patch_ids=np.asarray(ids_out, dtype=np.int64),
        visual_dim=feats.shape[1],
    )


def solve_assignment(similarity: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-total-similarity one-to-one assignment (Hungarian method,
    O(n^3) augmenting paths with dual potentials).

    Rectangular inputs are padded to square with ``PAD_SENTINEL``; padded
    pairings are discarded from the result.
    """
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.ndim != 2 or sim.size == 0:
        raise ValueError("similarity must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarity contains non-finite entries")
    n_rows, n_cols = sim.shape
    n = max(n_rows, n_cols)
    cost = np.full((n, n), -PAD_SENTINEL)
    cost[:n_rows, :n_cols] = -sim  # maximize similarity == minimize negated

    # Dual potentials u (rows) / v (columns); col_match[j] is the row
    # assigned to column j.  Column index n is a virtual root column.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    col_match = np.full(n + 1, -1, dtype=np.int64)
    for row in range(n):
        col_match[n] = row
        j_cur = n
        min_reduced = np.full(n + 1, np.inf)
        prev_col = np.full(n + 1, n, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j_cur] = True
            row_cur = col_match[j_cur]
            free = ~used[:n]
            reduced = cost[row_cur, :n] - u[row_cur] - v[:n]
            better = free & (reduced < min_reduced[:n])
            min_reduced[:n][better] = reduced[better]
            prev_col[:n][better] = j_cur
            candidates = np.where(free, min_reduced[:n], np.inf)
            j_next = int(np.argmin(candidates))
            delta = candidates[j_next]
            # Update potentials so the tightest edge becomes reduced-cost 0.
            u[col_match[used]] += delta
            v[used] -= delta
            min_reduced[:n][free] -= delta
            j_cur = j_next
            if col_match[j_cur] < 0:
                break
        while j_cur != n:  # augment along the alternating path
            j_prev = prev_col[j_cur]
            col_match[j_cur] = col_match[j_prev]
            j_cur = j_prev

    pairs = []
    for j in range(n):
        i = int(col_match[j])
        if i < n_rows and j < n_cols:
            pairs.append((i, j))
    pairs.sort()
    return pairs


def match_correspondences(
    query: FusedPointSet,
    candidate: FusedPointSet,
    threshold: float = DEFAULT_SIMILARITY_THRESHOLD,
    threshold_before_assignment: bool = False,
) -> CorrespondenceSet:
    """Optimal one-to-one matches between two fused point sets.

    The Hungarian assignment runs on the full cosine matrix and pairs
    below ``threshold`` are rejected afterwards; with
    ``threshold_before_assignment`` weak entries are already masked out of
    the assignment (the filter is applied either way, so the one-to-one
    and minimum-similarity guarantees are identical).
    """
    if query.empty or candidate.empty:
        raise ValueError("cannot match empty point sets")
    if query.descriptors.shape[1] != candidate.descriptors.shape[1]:
        raise ValueError("fused descriptor dimensions disagree")

    q_norm = query.descriptors / np.linalg.norm(query.descriptors, axis=1, keepdims=True)
    c_norm = candidate.descriptors / np.linalg.norm(candidate.descriptors, axis=1, keepdims=True)
    similarity = np.clip(q_norm @ c_norm.T, -1.0, 1.0)

    work = similarity
    if threshold_before_assignment:
        work = np.where(similarity >= threshold, similarity, PAD_SENTINEL)
    assigned = solve_assignment(work)

    kept = [(i, j) for i, j in assigned if similarity[i, j] >= threshold]
    if kept:
        q_idx = np.array([i for i, _ in kept], dtype=np.int64)
        c_idx = np.array([j for _, j in kept], dtype=np.int64)
        sims = similarity[q_idx, c_idx]
    else:
        q_idx = np.empty(0, dtype=np.int64)
        c_idx = np.empty(0, dtype=np.int64)
        sims = np.empty(0)
    return CorrespondenceSet(query_indices=q_idx, candidate_indices=c_idx, similarities=sims)
