"""Retrieval and pose-estimation metrics plus report rendering.

Threshold tables count strictly-below errors against the total number of
candidate pairs, so failed estimations (encoded as ``math.inf``) drag the
percentages down at every threshold.  The markdown/CSV renderers mirror
the standard report layout: precision-at-k with mean query time, then yaw
and per-axis translation threshold tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

PRECISION_KS = (1, 5, 10)
YAW_THRESHOLDS_DEG = (2.0, 3.0, 5.0, 10.0)
TRANSLATION_THRESHOLDS_M = (1.0, 2.0, 3.0, 5.0, 10.0)


def precision_at_k(
    retrievals: Mapping[int, Sequence[tuple[int, float]]],
    truth: np.ndarray,
    k: int,
) -> float:
    """Mean fraction of true matches among each query's top-min(k, returned).

    ``retrievals`` maps a query index to its ranked (index, score) hits;
    indices address rows/columns of the boolean ``truth`` matrix.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if not retrievals:
        raise ValueError("no queries to evaluate")
    fractions = []
    for query, hits in retrievals.items():
        if not hits:
            raise ValueError(f"query {query} has no retrieved candidates")
        top = hits[: min(k, len(hits))]
        correct = sum(1 for fid, _ in top if truth[query, fid])
        fractions.append(correct / len(top))
    return float(np.mean(fractions))


def threshold_table(errors: Sequence[float], thresholds: Sequence[float]) -> list[float]:
    """Percentage of errors strictly below each threshold.

    The denominator is the full list length; failures encoded as ``inf``
    (or NaN) never pass any threshold.
    """
    if len(errors) == 0:
        raise ValueError("empty error list")
    thresholds = list(thresholds)
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly increasing")
    values = np.asarray(errors, dtype=np.float64)
    total = len(values)
    with np.errstate(invalid="ignore"):
        return [float(100.0 * np.sum(values < t) / total) for t in thresholds]


@dataclass(frozen=True)
class EvalReport:
    """Aggregated pipeline metrics, mirroring the retrieval-precision and
    error-threshold report tables."""

    precision_at: dict[int, float]
    yaw_table: dict[float, float]
    dx_table: dict[float, float]
    dy_table: dict[float, float]
    mean_yaw_err_deg: float
    mean_dx_m: float
    mean_dy_m: float
    poses_estimated: int
    total_pairs: int
    mean_query_time_ms: float
    stage_times_ms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for table in (self.yaw_table, self.dx_table, self.dy_table):
            values = list(table.values())
            if any(not 0.0 <= v <= 100.0 for v in values):
                raise ValueError("threshold percentages must lie in [0, 100]")
            if any(b < a for a, b in zip(values, values[1:])):
                raise ValueError("threshold percentages must be non-decreasing")


def build_error_tables(
    yaw_errors: Sequence[float],
    dx_errors: Sequence[float],
    dy_errors: Sequence[float],
) -> tuple[dict[float, float], dict[float, float], dict[float, float]]:
    yaw = dict(zip(YAW_THRESHOLDS_DEG, threshold_table(yaw_errors, YAW_THRESHOLDS_DEG)))
    dx = dict(zip(TRANSLATION_THRESHOLDS_M, threshold_table(dx_errors, TRANSLATION_THRESHOLDS_M)))
    dy = dict(zip(TRANSLATION_THRESHOLDS_M, threshold_table(dy_errors, TRANSLATION_THRESHOLDS_M)))
    return yaw, dx, dy


def _finite_mean(values: Sequence[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.nan


def render_markdown(report: EvalReport, model_name: str = "MPRF") -> str:
    """Markdown report with the precision table and the three
    error-threshold tables (yaw in degrees, x/y translation in meters)."""
    lines = []
    lines.append("## Retrieval: Precision at Top-k and Average Query Time")
    lines.append("")
    lines.append("| Model | Precision@1 | Precision@5 | Precision@10 | Time (ms) |")
    lines.append("| --- | --- | --- | --- | --- |")
    p = report.precision_at
    lines.append(
        f"| {model_name} | {100.0 * p.get(1, math.nan):.2f} | {100.0 * p.get(5, math.nan):.2f} "
        f"| {100.0 * p.get(10, math.nan):.2f} | {report.mean_query_time_ms:.2f} |"
    )
    lines.append("")
    lines.append(
        "Timings are post-extraction (embeddings are read from files; no backbone inference is included)."
    )
    lines.append("")
    lines.append("## Percentage of Estimated Poses with Yaw Error Below Thresholds")
    lines.append("")
    header = " | ".join(f"< {t:g}°" for t in YAW_THRESHOLDS_DEG)
    lines.append(f"| Model | {header} |")
    lines.append("| --- |" + " --- |" * len(YAW_THRESHOLDS_DEG))
    row = " | ".join(f"{report.yaw_table[t]:.2f}" for t in YAW_THRESHOLDS_DEG)
    lines.append(f"| {model_name} | {row} |")
    for axis, table in (("X", report.dx_table), ("Y", report.dy_table)):
        lines.append("")
        lines.append(f"## Percentage of Estimated Poses with Translation Error in {axis} Below Thresholds")
        lines.append("")
        header = " | ".join(f"< {t:g}m" for t in TRANSLATION_THRESHOLDS_M)
        lines.append(f"| Model | {header} |")
        lines.append("| --- |" + " --- |" * len(TRANSLATION_THRESHOLDS_M))
        row = " | ".join(f"{table[t]:.2f}" for t in TRANSLATION_THRESHOLDS_M)
        lines.append(f"| {model_name} | {row} |")
    lines.append("")
    lines.append("## Pose Estimation Summary")
    lines.append("")
    lines.append("| Yaw Error (°) | DX Error (m) | DY Error (m) | Poses Estimated | Candidate Pairs |")
    lines.append("| --- | --- | --- | --- | --- |")
    lines.append(
        f"| {report.mean_yaw_err_deg:.2f} | {report.mean_dx_m:.2f} | {report.mean_dy_m:.2f} "
        f"| {report.poses_estimated} | {report.total_pairs} |"
    )
    if report.stage_times_ms:
        lines.append("")
        lines.append("## Mean Per-Query Stage Times (ms, post-extraction)")
        lines.append("")
        lines.append("| Stage | Time (ms) |")
        lines.append("| --- | --- |")
        for stage, value in report.stage_times_ms.items():
            lines.append(f"| {stage} | {value:.3f} |")
    return "\n".join(lines) + "\n"


def render_csv(report: EvalReport) -> str:
    """Flat key,value CSV of every report field."""
    rows = [("metric", "value")]
    for k in sorted(report.precision_at):
        rows.append((f"precision_at_{k}", f"{report.precision_at[k]:.6f}"))
    for t in YAW_THRESHOLDS_DEG:
        rows.append((f"yaw_below_{t:g}_deg_pct", f"{report.yaw_table[t]:.4f}"))
    for t in TRANSLATION_THRESHOLDS_M:
        rows.append((f"dx_below_{t:g}_m_pct", f"{report.dx_table[t]:.4f}"))
    for t in TRANSLATION_THRESHOLDS_M:
        rows.append((f"dy_below_{t:g}_m_pct", f"{report.dy_table[t]:.4f}"))
    rows.append(("mean_yaw_err_deg", f"{report.mean_yaw_err_deg:.6f}"))
    rows.append(("mean_dx_m", f"{report.mean_dx_m:.6f}"))
    rows.append(("mean_dy_m", f"{report.mean_dy_m:.6f}"))
    rows.append(("poses_estimated", str(report.poses_estimated)))
    rows.append(("total_pairs", str(report.total_pairs)))
    rows.append(("mean_query_time_ms", f"{report.mean_query_time_ms:.4f}"))
    for stage, value in report.stage_times_ms.items():
        rows.append((f"stage_{stage}_ms", f"{value:.4f}"))
    return "\n".join(f"{k},{v}" for k, v in rows) + "\n"
