"""Rigid 6-DoF estimation from paired 3D points.

Kabsch gives the closed-form least-squares transform; RANSAC wraps it with
minimal-triplet sampling, an adaptive iteration bound, and an inlier refit.
A result is valid exactly when it reaches the geometric minimum of
inliers (default 3); no further score thresholds are applied, so
downstream re-ranking by pose distance does the filtering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from mprf.geometry import PoseSE3, se3_relative, yaw_from_rotation

DEFAULT_DISTANCE_THRESHOLD = 0.05  # meters


class DegenerateGeometryError(ValueError):
    """Point set is collinear or coincident; the rigid fit is ill-posed."""


@dataclass(frozen=True)
class RansacConfig:
    distance_threshold: float = DEFAULT_DISTANCE_THRESHOLD
    sample_size: int = 3
    max_iterations: int = 100_000
    confidence: float = 0.999
    min_inliers: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_size < 3:
            raise ValueError("sample_size must be at least 3")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")
        if self.distance_threshold <= 0.0:
            raise ValueError("distance_threshold must be positive")
        if self.min_inliers < self.sample_size:
            raise ValueError("min_inliers cannot be below sample_size")


@dataclass(frozen=True)
class RegistrationResult:
    transform: PoseSE3
    inlier_indices: np.ndarray
    inlier_rmse: float
    valid: bool
    iterations_run: int


@dataclass(frozen=True)
class IcpResult:
    transform: PoseSE3
    inlier_rmse: float
    iterations_run: int
    no_overlap: bool
    rmse_history: tuple[float, ...] = field(default=())


def _paired_points(src, dst) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"need paired (N, 3) arrays, got {src.shape} and {dst.shape}")
    return src, dst


def kabsch(src: np.ndarray, dst: np.ndarray) -> PoseSE3:
    """Least-squares rigid transform T minimizing sum ||T(src_i) - dst_i||^2.

    SVD of the cross-covariance with reflection correction via the sign of
    the determinant.  Raises DegenerateGeometryError when either set is
    collinear or coincident (the rotation is then underdetermined).
    """
    src, dst = _paired_points(src, dst)
    if src.shape[0] < 3:
        raise ValueError("kabsch needs at least 3 point pairs")
    src_centroid = src.mean(axis=0)
    dst_centroid = dst.mean(axis=0)
    src_c = src - src_centroid
    dst_c = dst - dst_centroid
    for centered in (src_c, dst_c):
        spread = np.linalg.svd(centered, compute_uv=False)
        if spread[1] <= max(1e-12, 1e-9 * spread[0]):
            raise DegenerateGeometryError("collinear or coincident points")
    u, _, vt = np.linalg.svd(src_c.T @ dst_c)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, sign]) @ u.T
    return PoseSE3(rotation, dst_centroid - rotation @ src_centroid)


def _residuals(transform: PoseSE3, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.linalg.norm(transform.apply(src) - dst, axis=1)


def _adaptive_bound(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio <= 0.0:
        return math.inf
    if inlier_ratio >= 1.0:
        return 0.0
    success = inlier_ratio**sample_size
    if success >= 1.0:
        return 0.0
    return math.log1p(-confidence) / math.log1p(-success)


def ransac_register(
    src: np.ndarray, dst: np.ndarray, config: RansacConfig = RansacConfig()
) -> RegistrationResult:
    """Robust rigid registration of paired correspondences.

    Samples minimal subsets, scores by inlier count at the distance
    threshold (ties by inlier RMSE), stops at the adaptive bound
    ln(1-confidence)/ln(1-w^n) capped at max_iterations, then refits on the
    best inlier set.  ``valid`` requires at least ``min_inliers``; every
    reported inlier satisfies the residual bound under the returned
    transform.
    """
    src, dst = _paired_points(src, dst)
    n = src.shape[0]
    if n < config.sample_size:
        raise ValueError(
            f"need at least {config.sample_size} correspondences, got {n}"
        )
    rng = np.random.default_rng(config.rng_seed)

    best_count = 0
    best_rmse = math.inf
    best_transform: Optional[PoseSE3] = None
    best_mask: Optional[np.ndarray] = None
    required: float = math.inf
    iteration = 0
    while iteration < config.max_iterations and iteration < required:
        sample = rng.choice(n, size=config.sample_size, replace=False)
        iteration += 1
        try:
            hypothesis = kabsch(src[sample], dst[sample])
        except DegenerateGeometryError:
            continue
        residuals = _residuals(hypothesis, src, dst)
        mask = residuals <= config.distance_threshold
        count = int(mask.sum())
        if count == 0:
            continue
        rmse = float(np.sqrt(np.mean(residuals[mask] ** 2)))
        if count > best_count or (count == best_count and rmse < best_rmse):
            best_count, best_rmse = count, rmse
            best_transform, best_mask = hypothesis, mask
            required = _adaptive_bound(count / n, config.sample_size, config.confidence)

    if best_transform is None or best_count < config.min_inliers:
        return RegistrationResult(
            transform=best_transform or PoseSE3.identity(),
            inlier_indices=np.flatnonzero(best_mask) if best_mask is not None else np.empty(0, dtype=np.int64),
            inlier_rmse=best_rmse,
            valid=False,
            iterations_run=iteration,
        )

    # Refit on the consensus set; keep the sample hypothesis if the refit
    # would lose inliers (possible near the threshold) or degenerates.
    transform, mask, rmse = best_transform, best_mask, best_rmse
    try:
        refit = kabsch(src[best_mask], dst[best_mask])
        refit_residuals = _residuals(refit, src, dst)
        refit_mask = refit_residuals <= config.distance_threshold
        refit_count = int(refit_mask.sum())
        if refit_count >= best_count:
            refit_rmse = float(np.sqrt(np.mean(refit_residuals[refit_mask] ** 2)))
            if refit_count > best_count or refit_rmse < best_rmse:
                transform, mask, rmse = refit, refit_mask, refit_rmse
    except DegenerateGeometryError:
        pass

    return RegistrationResult(
        transform=transform,
        inlier_indices=np.flatnonzero(mask),
        inlier_rmse=rmse,
        valid=bool(mask.sum() >= config.min_inliers),
        iterations_run=iteration,
    )


def icp_refine(
    src_cloud: np.ndarray,
    dst_cloud: np.ndarray,
    init: PoseSE3,
    max_corr_dist: float,
    max_iters: int = 30,
) -> IcpResult:
    """Point-to-point ICP from an initial transform.

    Alternates nearest-neighbor pairing within ``max_corr_dist`` and a
    Kabsch refit, keeping the best iterate so the reported inlier RMSE is
    non-increasing.  If no pair exists at the initial transform the result
    carries ``no_overlap`` and returns ``init`` unchanged.
    """
    src = np.asarray(src_cloud, dtype=np.float64)
    dst = np.asarray(dst_cloud, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or dst.ndim != 2 or dst.shape[1] != 3:
        raise ValueError("clouds must be (N, 3) arrays")
    if src.shape[0] == 0 or dst.shape[0] == 0:
        raise ValueError("clouds must be non-empty")
    if max_corr_dist <= 0:
        raise ValueError("max_corr_dist must be positive")
    tree = cKDTree(dst)

    def pair(transform: PoseSE3):
        moved = transform.apply(src)
        dists, nearest = tree.query(moved, distance_upper_bound=max_corr_dist)
        matched = np.isfinite(dists)
        if not matched.any():
            return None
        rmse = float(np.sqrt(np.mean(dists[matched] ** 2)))
        return matched, nearest[matched], rmse

    paired = pair(init)
    if paired is None:
        return IcpResult(transform=init, inlier_rmse=math.inf, iterations_run=0, no_overlap=True)

    best = init
    matched, targets, best_rmse = paired
    history = [best_rmse]
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        try:
            candidate = kabsch(src[matched], dst[targets])
        except DegenerateGeometryError:
            break
        converged = float(np.max(np.abs(candidate.matrix() - best.matrix()))) < 1e-6
        paired = pair(candidate)
        if paired is None:
            break
        matched, targets, rmse = paired
        if rmse > best_rmse + 1e-12:
            break  # keep the best iterate; the objective never increases
        best, best_rmse = candidate, rmse
        history.append(best_rmse)
        if converged:
            break
    return IcpResult(
        transform=best,
        inlier_rmse=best_rmse,
        iterations_run=iterations,
        no_overlap=False,
        rmse_history=tuple(history),
    )


def pose_errors(estimate: PoseSE3, ground_truth: PoseSE3) -> tuple[float, float, float]:
    """(|yaw| degrees, |dx| m, |dy| m) of the estimate relative to truth."""
    delta = se3_relative(ground_truth, estimate)
    return (
        abs(yaw_from_rotation(delta.rotation)),
        abs(float(delta.translation[0])),
        abs(float(delta.translation[1])),
    )


def rerank_by_pose(
    shortlist: list[tuple[int, float]],
    results: dict[int, RegistrationResult],
) -> list[tuple[int, float]]:
    """Order candidates by estimated pose distance.

    Invalid registrations are dropped; the rest sort ascending by
    translation norm with ties broken by the original retrieval score
    (descending).  Returned scores are negated pose distances, preserving
    the descending-score shortlist convention.
    """
    ranked = []
    for frame_id, score in shortlist:
        try:
            result = results[frame_id]
        except KeyError:
            raise KeyError(f"no registration result for candidate {frame_id}") from None
        if not result.valid:
            continue
        distance = float(np.linalg.norm(result.transform.translation))
        ranked.append((distance, -score, frame_id))
    ranked.sort()
    return [(frame_id, -distance) for distance, _, frame_id in ranked]
