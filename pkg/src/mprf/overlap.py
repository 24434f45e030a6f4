"""Ground-truth overlap between poses, pair labeling, and triplet mining.

Overlap is the product of an angular term (yaw difference relative to the
horizontal field of view) and a positional term (linear falloff in the
forward (x) and lateral (y) displacement of one pose expressed in the
frame of the other).  The falloff scales are parameters, not constants:
the reference toolkit's exact expression is not published, so anything
beyond the angular-times-positional structure stays configurable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mprf.geometry import PoseSE3, se3_relative, yaw_from_rotation

DEFAULT_TAU_O = 0.6


@dataclass(frozen=True)
class OverlapParams:
    fov_h_deg: float = 90.0
    lat_max_m: float = 10.0
    fwd_max_m: float = 20.0
    tau_o: float = DEFAULT_TAU_O

    def __post_init__(self) -> None:
        if self.fov_h_deg <= 0:
            raise ValueError("fov_h_deg must be positive")
        if self.lat_max_m <= 0 or self.fwd_max_m <= 0:
            raise ValueError("displacement scales must be positive")
        if not 0.0 < self.tau_o < 1.0:
            raise ValueError("tau_o must be in (0, 1)")


@dataclass(frozen=True)
class TripletSpec:
    pos_overlap_min: float = 0.7
    neg_overlap_max: float = 0.1
    min_dt_ms: float = 100.0

    def __post_init__(self) -> None:
        if self.pos_overlap_min <= self.neg_overlap_max:
            raise ValueError("positive bound must exceed negative bound")


def compute_overlap(pose_a: PoseSE3, pose_b: PoseSE3, params: OverlapParams = OverlapParams()) -> float:
    """Co-visibility score in [0, 1] for two poses."""
    delta = se3_relative(pose_a, pose_b)
    yaw = abs(yaw_from_rotation(delta.rotation))
    angular = max(0.0, min(1.0, 1.0 - yaw / params.fov_h_deg))
    fwd, lat = abs(float(delta.translation[0])), abs(float(delta.translation[1]))
    positional = max(0.0, min(1.0, 1.0 - lat / params.lat_max_m)) * max(
        0.0, min(1.0, 1.0 - fwd / params.fwd_max_m)
    )
    return angular * positional


def label_pairs(poses: Sequence[PoseSE3], params: OverlapParams = OverlapParams()) -> np.ndarray:
    """Boolean match matrix: entry (i, j) is overlap(pose_i, pose_j) > tau_o.

    The diagonal is True.  Off-diagonal symmetry holds when the two
    displacement scales coincide and relative headings are axis-aligned;
    with distinct scales the i->j and j->i scores can differ, and the raw
    directional entries are kept.
    """
    if len(poses) < 2:
        raise ValueError("need at least two poses to label pairs")
    n = len(poses)
    matrix = np.eye(n, dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j:
                matrix[i, j] = compute_overlap(poses[i], poses[j], params) > params.tau_o
    return matrix


def mine_triplets(
    poses: Sequence[PoseSE3],
    timestamps_s: Sequence[float],
    spec: TripletSpec = TripletSpec(),
    count: int = 1,
    seed: int = 0,
    params: OverlapParams = OverlapParams(),
) -> list[tuple[int, int, int]]:
    """Sample (anchor, positive, negative) index triplets.

    A positive shares overlap above ``pos_overlap_min`` with the anchor, a
    negative stays below ``neg_overlap_max``, and both are separated from
    the anchor by at least ``min_dt_ms``.  Sampling is uniform over the
    valid anchors and their candidate sets, deterministic under the seed.
    """
    if len(poses) != len(timestamps_s):
        raise ValueError("poses and timestamps must align")
    n = len(poses)
    if n < 3:
        raise ValueError("need at least three frames to mine triplets")
    if count < 1:
        raise ValueError("count must be positive")

    times = np.asarray(timestamps_s, dtype=np.float64)
    overlaps = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            overlaps[i, j] = 1.0 if i == j else compute_overlap(poses[i], poses[j], params)
    dt_ok = np.abs(times[:, None] - times[None, :]) >= spec.min_dt_ms / 1000.0

    positives = [np.flatnonzero((overlaps[i] > spec.pos_overlap_min) & dt_ok[i]) for i in range(n)]
    negatives = [np.flatnonzero((overlaps[i] < spec.neg_overlap_max) & dt_ok[i]) for i in range(n)]
    anchors = np.flatnonzero([len(positives[i]) > 0 and len(negatives[i]) > 0 for i in range(n)])
    if anchors.size == 0:
        raise ValueError("no valid triplet exists under the given constraints")

    rng = np.random.default_rng(seed)
    triplets = []
    for _ in range(count):
        anchor = int(anchors[rng.integers(anchors.size)])
        positive = int(positives[anchor][rng.integers(positives[anchor].size)])
        negative = int(negatives[anchor][rng.integers(negatives[anchor].size)])
        triplets.append((anchor, positive, negative))
    return triplets
