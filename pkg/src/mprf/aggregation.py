"""Global descriptor aggregation.

Patch features are scored against a bank of cluster centers plus a dustbin
column, softly assigned by a log-domain Sinkhorn normalization, and
accumulated VLAD-style into one unit vector per frame (default
64 clusters x 128 projected dims = 8192).  A second, cheaper frame
descriptor concatenates three backbone layers and averages over patches
(default 3 x 768 = 2304).

The bank is normally loaded from a parameter file; :func:`fit_cluster_bank`
provides a deterministic unsupervised stand-in (k-means centers + PCA
projection) so the pipeline runs without any learned checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from mprf.geometry import l2_normalize

DEFAULT_CLUSTERS = 64
DEFAULT_PROJECTED_DIM = 128

KMEANS_MAX_ITERS = 100
KMEANS_REL_TOL = 1e-4


@dataclass(frozen=True)
class ClusterBank:
    """Cluster prototypes, feature projection, and the dustbin score."""

    centers: np.ndarray     # (K, d_in)
    projection: np.ndarray  # (d_in, d_proj)
    dustbin_score: float = 0.0

    def __post_init__(self) -> None:
        centers = np.asarray(self.centers, dtype=np.float64)
        projection = np.asarray(self.projection, dtype=np.float64)
        if centers.ndim != 2 or projection.ndim != 2:
            raise ValueError("centers and projection must be 2-D")
        if centers.shape[1] != projection.shape[0]:
            raise ValueError(
                f"feature dims disagree: centers {centers.shape} vs projection {projection.shape}"
            )
        if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(projection))):
            raise ValueError("bank parameters contain non-finite entries")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "projection", projection)

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def input_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def projected_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def global_dim(self) -> int:
        return self.n_clusters * self.projected_dim


def _kmeans_pp_init(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(features)
    centers = np.empty((k, features.shape[1]))
    centers[0] = features[rng.integers(n)]
    dist_sq = np.sum((features - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(dist_sq.sum())
        if total <= 0.0:
            # Remaining mass is zero: every point coincides with a chosen
            # center; fall back to uniform choice.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=dist_sq / total))
        centers[i] = features[idx]
        dist_sq = np.minimum(dist_sq, np.sum((features - centers[i]) ** 2, axis=1))
    return centers


def _kmeans(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Lloyd iterations with k-means++ init.

    Stops after KMEANS_MAX_ITERS or when the relative inertia change drops
    below KMEANS_REL_TOL.  Fully deterministic for a given generator state.
    """
    centers = _kmeans_pp_init(features, k, rng)
    prev_inertia = np.inf
    for _ in range(KMEANS_MAX_ITERS):
        # (n, k) squared distances via the expansion trick.
        sq = (
            np.sum(features**2, axis=1)[:, None]
            - 2.0 * features @ centers.T
            + np.sum(centers**2, axis=1)[None, :]
        )
        labels = np.argmin(sq, axis=1)
        inertia = float(np.take_along_axis(sq, labels[:, None], axis=1).sum())
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = features[mask].mean(axis=0)
            else:
                # Re-seed an empty cluster on the point farthest from its center.
                centers[j] = features[int(np.argmax(np.min(sq, axis=1)))]
        if prev_inertia < np.inf:
            denom = max(prev_inertia, 1e-300)
            if abs(prev_inertia - inertia) / denom < KMEANS_REL_TOL:
                break
        prev_inertia = inertia
    return centers


def fit_cluster_bank(
    sample_features: np.ndarray,
    n_clusters: int = DEFAULT_CLUSTERS,
    projected_dim: int = DEFAULT_PROJECTED_DIM,
    seed: int = 0,
) -> ClusterBank:
    """Fit an unsupervised stand-in bank from sample patch features.

    Centers come from seeded k-means, the projection from the top
    principal directions of the sample, and the dustbin score is zero.
    """
    feats = np.asarray(sample_features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("sample_features must be (N, d_in)")
    if not np.all(np.isfinite(feats)):
        raise ValueError("sample_features contain non-finite entries")
    n, d_in = feats.shape
    if n < n_clusters:
        raise ValueError(f"need at least {n_clusters} samples, got {n}")
    if projected_dim > min(n, d_in):
        raise ValueError(
            f"projected_dim {projected_dim} exceeds available directions ({min(n, d_in)})"
        )
    if np.allclose(feats, feats[0], atol=0.0, rtol=0.0):
        raise ValueError("degenerate sample: all features identical")

    rng = np.random.default_rng(seed)
    centers = _kmeans(feats, n_clusters, rng)

    centered = feats - feats.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    projection = vt[:projected_dim].T.copy()
    # Fix each direction's sign so the fit is reproducible bit-for-bit.
    for j in range(projection.shape[1]):
        col = projection[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            projection[:, j] = -col
    return ClusterBank(centers=centers, projection=projection, dustbin_score=0.0)


def score_matrix(patch_feats: np.ndarray, bank: ClusterBank) -> np.ndarray:
    """Patch-to-cluster scores: dot products, with the dustbin as column K."""
    feats = np.asarray(patch_feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != bank.input_dim:
        raise ValueError(
            f"patch features must be (P, {bank.input_dim}), got {feats.shape}"
        )
    scores = np.empty((feats.shape[0], bank.n_clusters + 1))
    scores[:, :-1] = feats @ bank.centers.T
    scores[:, -1] = bank.dustbin_score
    return scores


def sinkhorn_assign(
    scores: np.ndarray,
    iterations: int = 3,
    temperature: float = 1.0,
    dustbin_marginal: str = "uniform",
) -> np.ndarray:
    """Soft assignment by log-domain alternating normalization.

    Target marginals: each row (patch) sums to 1, each column (cluster,
    dustbin included) to P / (K + 1).  Each iteration normalizes columns
    then rows, so the returned rows sum to 1 up to float round-off.

    ``dustbin_marginal`` selects how the last column is treated during the
    column step: ``"uniform"`` scales it like any other column (a constant
    dustbin score then cancels out of the result entirely), ``"slack"``
    leaves it unscaled so a large dustbin score can absorb most of the
    patch mass.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise ValueError("scores must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite entries")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if dustbin_marginal not in ("uniform", "slack"):
        raise ValueError(f"unknown dustbin_marginal {dustbin_marginal!r}")

    n_rows, n_cols = s.shape
    log_kernel = s / temperature
    log_col_target = np.log(n_rows / n_cols)
    row_scale = np.zeros(n_rows)
    col_scale = np.zeros(n_cols)
    for _ in range(iterations):
        new_col = log_col_target - logsumexp(log_kernel + row_scale[:, None], axis=0)
        if dustbin_marginal == "slack":
            new_col[-1] = col_scale[-1]
        col_scale = new_col
        row_scale = -logsumexp(log_kernel + col_scale[None, :], axis=1)
    return np.exp(log_kernel + row_scale[:, None] + col_scale[None, :])


def aggregate_global(
    patch_feats: np.ndarray, assignment: np.ndarray, bank: ClusterBank
) -> tuple[np.ndarray, bool]:
    """VLAD-style aggregation of projected features under a soft assignment.

    The dustbin column is discarded, per-cluster sums are intra-normalized
    (zero-safe), and the concatenation is globally l2-normalized.  Returns
    ``(descriptor, zero_flag)``; the flag marks an all-dustbin assignment
    whose descriptor would be the zero vector.
    """
    feats = np.asarray(patch_feats, dtype=np.float64)
    weights = np.asarray(assignment, dtype=np.float64)
    if feats.shape[0] != weights.shape[0]:
        raise ValueError("patch count mismatch between features and assignment")
    if weights.shape[1] != bank.n_clusters + 1:
        raise ValueError(
            f"assignment must have {bank.n_clusters + 1} columns, got {weights.shape[1]}"
        )
    projected = feats @ bank.projection                 # (P, d_proj)
    cluster_sums = weights[:, :-1].T @ projected        # (K, d_proj)
    norms = np.linalg.norm(cluster_sums, axis=1, keepdims=True)
    scale = np.where(norms > 1e-12, norms, 1.0)
    descriptor, zero = l2_normalize((cluster_sums / scale).ravel())
    return descriptor, zero


def refine_descriptor(layer_feats: np.ndarray) -> np.ndarray:
    """Second-stage frame descriptor: per-patch concatenation of the layers,
    mean over patches, l2-normalized."""
    feats = np.asarray(layer_feats, dtype=np.float64)
    if feats.ndim != 3:
        raise ValueError(f"layer features must be (layers, P, d_in), got {feats.shape}")
    n_layers, n_patches, _ = feats.shape
    if n_patches == 0:
        raise ValueError("cannot refine a frame with zero patches")
    concatenated = np.concatenate([feats[i] for i in range(n_layers)], axis=1)
    descriptor, _ = l2_normalize(concatenated.mean(axis=0))
    return descriptor
