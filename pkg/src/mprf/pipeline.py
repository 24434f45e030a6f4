"""End-to-end loop-closure pipeline.

For every query frame: aggregate descriptors, two-stage retrieve, lift
patches into fused 3D points, match correspondences against each
candidate, register with RANSAC, re-rank candidates by estimated pose
distance, and emit the accepted closures.  With ground-truth poses in the
manifest an evaluation report (precision at k, yaw/translation threshold
tables, timings) is produced alongside.

Determinism: one base seed drives the cluster-bank fit and a per-pair
derived RANSAC seed, so a rerun on identical inputs produces a
byte-identical closure list.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from mprf import dataio
from mprf.aggregation import (
    ClusterBank,
    aggregate_global,
    fit_cluster_bank,
    refine_descriptor,
    score_matrix,
    sinkhorn_assign,
)
from mprf.config import PipelineConfig
from mprf.dataio import FrameRecord, Manifest
from mprf.evaluation import EvalReport, build_error_tables, precision_at_k, render_csv, render_markdown
from mprf.fusion import FusedPointSet, lift_patches, match_correspondences
from mprf.geometry import PoseSE3, se3_relative
from mprf.overlap import label_pairs
from mprf.registration import (
    RegistrationResult,
    icp_refine,
    pose_errors,
    ransac_register,
    rerank_by_pose,
)
from mprf.retrieval import DescriptorIndex, RefinementStore, two_stage_retrieve

logger = logging.getLogger(__name__)

CLOSURES_FILENAME = "closures.csv"
REPORT_MD_FILENAME = "report.md"
REPORT_CSV_FILENAME = "report.csv"
META_FILENAME = "run_meta.json"

CLOSURE_COLUMNS = (
    "query_id,candidate_id,query_timestamp_s,candidate_timestamp_s,"
    "inliers,inlier_rmse_m,pose_distance_m,retrieval_score,tx,ty,tz,qx,qy,qz,qw"
)


@dataclass(frozen=True)
class LoopClosure:
    """An accepted loop closure; ``transform`` maps query-frame coordinates
    into the candidate frame."""

    query_id: int
    candidate_id: int
    transform: PoseSE3
    inlier_count: int
    inlier_rmse: float
    retrieval_score: float
    pose_distance_m: float
    query_timestamp_s: float
    candidate_timestamp_s: float


@dataclass
class PipelineResult:
    closures: list[LoopClosure]
    shortlists: dict[int, list[tuple[int, float]]]
    report: Optional[EvalReport]
    frames_indexed: int
    skipped_frames: list[int]
    attempted_pairs: int


def load_frames(manifest: Manifest) -> tuple[list[FrameRecord], list[int]]:
    """Load every frame, skipping (with a warning) those whose files are
    missing or malformed."""
    frames: list[FrameRecord] = []
    skipped: list[int] = []
    for spec in manifest.frames:
        try:
            frames.append(dataio.load_frame(spec))
        except (OSError, ValueError) as exc:
            logger.warning("skipping frame %d: %s", spec.frame_id, exc)
            skipped.append(spec.frame_id)
    return frames, skipped


def bank_sample(frames: list[FrameRecord], limit: int, seed: int) -> np.ndarray:
    """Deterministic sample of last-layer patch features for bank fitting."""
    stacked = np.concatenate([f.last_layer for f in frames])
    if len(stacked) > limit:
        rng = np.random.default_rng(seed)
        stacked = stacked[rng.choice(len(stacked), size=limit, replace=False)]
    return stacked


def resolve_bank(frames: list[FrameRecord], config: PipelineConfig) -> ClusterBank:
    agg = config.aggregation
    if agg.bank_path is not None:
        return dataio.read_cluster_bank(agg.bank_path)
    sample = bank_sample(frames, agg.bank_sample_limit, agg.bank_seed)
    return fit_cluster_bank(
        sample, n_clusters=agg.clusters, projected_dim=agg.projected_dim, seed=agg.bank_seed
    )


def frame_descriptors(
    frame: FrameRecord, bank: ClusterBank, config: PipelineConfig
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """(global, refinement) descriptors, or None for a degenerate frame."""
    agg = config.aggregation
    assignment = sinkhorn_assign(
        score_matrix(frame.last_layer, bank),
        iterations=agg.sinkhorn_iterations,
        temperature=agg.sinkhorn_temperature,
        dustbin_marginal=agg.dustbin_marginal,
    )
    global_desc, zero = aggregate_global(frame.last_layer, assignment, bank)
    if zero:
        logger.warning("frame %d produced a zero global descriptor", frame.frame_id)
        return None
    return global_desc, refine_descriptor(frame.layer_feats)


def build_index(
    frames: list[FrameRecord], bank: ClusterBank, config: PipelineConfig
) -> tuple[DescriptorIndex, RefinementStore, list[int]]:
    index, store, degenerate, _ = build_index_with_descriptors(frames, bank, config)
    return index, store, degenerate


def build_index_with_descriptors(
    frames: list[FrameRecord], bank: ClusterBank, config: PipelineConfig
) -> tuple[DescriptorIndex, RefinementStore, list[int], dict[int, tuple[np.ndarray, np.ndarray]]]:
    retrieval_cfg = config.retrieval
    index = DescriptorIndex(
        mode=retrieval_cfg.mode,
        n_lists=retrieval_cfg.ivf_lists,
        n_probe=retrieval_cfg.ivf_probe,
    )
    store = RefinementStore()
    degenerate: list[int] = []
    descriptors_by_id: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for frame in frames:
        descriptors = frame_descriptors(frame, bank, config)
        if descriptors is None:
            degenerate.append(frame.frame_id)
            continue
        global_desc, refinement = descriptors
        index.add(frame.frame_id, global_desc)
        store.add(frame.frame_id, refinement)
        descriptors_by_id[frame.frame_id] = descriptors
    if retrieval_cfg.mode == "ivf" and len(index) > 0:
        index.train_lists(n_lists=retrieval_cfg.ivf_lists, seed=config.seed)
    return index, store, degenerate, descriptors_by_id


def _pair_seed(base: int, query_id: int, candidate_id: int) -> int:
    return int(np.random.SeedSequence([base, query_id, candidate_id]).generate_state(1)[0])


def _rank_candidates(
    shortlist: list[tuple[int, float]],
    results: dict[int, RegistrationResult],
    mode: str,
) -> list[int]:
    """Candidate ids of the valid registrations, ordered per rerank mode."""
    if mode == "pose_distance":
        return [fid for fid, _ in rerank_by_pose(shortlist, results)]
    ranked = []
    for frame_id, score in shortlist:
        result = results[frame_id]
        if result.valid:
            ranked.append((-len(result.inlier_indices), -score, frame_id))
    ranked.sort()
    return [frame_id for _, _, frame_id in ranked]


def _register_pair(
    query_points: FusedPointSet,
    candidate_points: FusedPointSet,
    config: PipelineConfig,
    seed: int,
) -> RegistrationResult:
    invalid = RegistrationResult(
        transform=PoseSE3.identity(),
        inlier_indices=np.empty(0, dtype=np.int64),
        inlier_rmse=math.inf,
        valid=False,
        iterations_run=0,
    )
    if query_points.empty or candidate_points.empty:
        return invalid
    matches = match_correspondences(
        query_points,
        candidate_points,
        threshold=config.fusion.similarity_threshold,
        threshold_before_assignment=config.fusion.threshold_before_assignment,
    )
    if len(matches) < config.ransac.sample_size:
        return invalid
    src = query_points.points[matches.query_indices]
    dst = candidate_points.points[matches.candidate_indices]
    ransac_cfg = dataclasses.replace(config.ransac, rng_seed=seed)
    result = ransac_register(src, dst, ransac_cfg)
    if result.valid and config.icp.enabled:
        refined = icp_refine(
            query_points.points,
            candidate_points.points,
            result.transform,
            max_corr_dist=config.icp.max_corr_dist,
            max_iters=config.icp.max_iters,
        )
        if not refined.no_overlap:
            # Restate the consensus under the refined transform; revert if
            # refinement costs inliers (keeps the residual-bound invariant).
            residuals = np.linalg.norm(refined.transform.apply(src) - dst, axis=1)
            mask = residuals <= ransac_cfg.distance_threshold
            if int(mask.sum()) >= ransac_cfg.min_inliers:
                result = dataclasses.replace(
                    result,
                    transform=refined.transform,
                    inlier_indices=np.flatnonzero(mask),
                    inlier_rmse=float(np.sqrt(np.mean(residuals[mask] ** 2))),
                )
    return result


def run_pipeline(
    manifest_path,
    config: PipelineConfig = PipelineConfig(),
    output_dir=None,
) -> PipelineResult:
    """Run the full engine over a manifest; optionally write the closure
    list and reports into ``output_dir``."""
    manifest = dataio.load_manifest(manifest_path)
    frames, skipped = load_frames(manifest)
    result = _run_over_frames(frames, manifest, config, skipped)
    if output_dir is not None:
        write_outputs(Path(output_dir), result)
    return result


def _run_over_frames(
    frames: list[FrameRecord],
    manifest: Manifest,
    config: PipelineConfig,
    skipped: list[int],
) -> PipelineResult:
    if not frames:
        logger.warning("no usable frames; emitting empty result")
        return PipelineResult(
            closures=[], shortlists={}, report=None, frames_indexed=0,
            skipped_frames=skipped, attempted_pairs=0,
        )

    bank = resolve_bank(frames, config)
    index, store, degenerate, descriptors_by_id = build_index_with_descriptors(frames, bank, config)
    skipped = skipped + degenerate
    frames = [f for f in frames if f.frame_id not in set(degenerate)]
    if len(index) == 0:
        return PipelineResult(
            closures=[], shortlists={}, report=None, frames_indexed=0,
            skipped_frames=skipped, attempted_pairs=0,
        )

    by_id = {f.frame_id: f for f in frames}
    timestamps = {f.frame_id: f.timestamp_s for f in frames}
    grid = (config.fusion.patch_rows, config.fusion.patch_cols)
    fused_cache: dict[int, FusedPointSet] = {}

    def fused_points(frame_id: int) -> FusedPointSet:
        if frame_id not in fused_cache:
            frame = by_id[frame_id]
            fused_cache[frame_id] = lift_patches(
                frame.last_layer, frame.scan, manifest.calibration, grid
            )
        return fused_cache[frame_id]

    n1 = max(config.retrieval.shortlist_size, config.retrieval.rerank_size)
    n2 = min(config.retrieval.rerank_size, n1)
    window = config.retrieval.exclusion_window_s

    closures: list[LoopClosure] = []
    shortlists: dict[int, list[tuple[int, float]]] = {}
    registrations: dict[int, dict[int, RegistrationResult]] = {}
    attempted_pairs = 0
    stage_totals = {"retrieval": 0.0, "fusion": 0.0, "registration": 0.0}
    query_times: list[float] = []

    for frame in frames:
        query_id = frame.frame_id
        query_t0 = time.perf_counter()
        global_desc, refinement = descriptors_by_id[query_id]

        def exclude(fid: int, _t: float = frame.timestamp_s) -> bool:
            return abs(timestamps[fid] - _t) <= window

        t0 = time.perf_counter()
        if all(exclude(fid) for fid in index.frame_ids):
            shortlist: list[tuple[int, float]] = []
        else:
            shortlist = two_stage_retrieve(
                global_desc, refinement, index, store, n1=n1, n2=n2, exclude=exclude
            )
        stage_totals["retrieval"] += time.perf_counter() - t0
        shortlists[query_id] = shortlist
        if not shortlist:
            query_times.append(time.perf_counter() - query_t0)
            continue

        t0 = time.perf_counter()
        query_points = fused_points(query_id)
        stage_totals["fusion"] += time.perf_counter() - t0

        results: dict[int, RegistrationResult] = {}
        t0 = time.perf_counter()
        for candidate_id, _score in shortlist:
            attempted_pairs += 1
            results[candidate_id] = _register_pair(
                query_points,
                fused_points(candidate_id),
                config,
                _pair_seed(config.seed + config.ransac.rng_seed, query_id, candidate_id),
            )
        stage_totals["registration"] += time.perf_counter() - t0
        registrations[query_id] = results

        retrieval_score = dict(shortlist)
        for candidate_id in _rank_candidates(shortlist, results, config.rerank_mode):
            registration = results[candidate_id]
            closures.append(
                LoopClosure(
                    query_id=query_id,
                    candidate_id=candidate_id,
                    transform=registration.transform,
                    inlier_count=len(registration.inlier_indices),
                    inlier_rmse=registration.inlier_rmse,
                    retrieval_score=retrieval_score[candidate_id],
                    pose_distance_m=float(np.linalg.norm(registration.transform.translation)),
                    query_timestamp_s=frame.timestamp_s,
                    candidate_timestamp_s=timestamps[candidate_id],
                )
            )
        query_times.append(time.perf_counter() - query_t0)

    report = _build_report(
        frames, shortlists, registrations, config, query_times, stage_totals, attempted_pairs
    )
    return PipelineResult(
        closures=closures,
        shortlists=shortlists,
        report=report,
        frames_indexed=len(index),
        skipped_frames=skipped,
        attempted_pairs=attempted_pairs,
    )


def _build_report(
    frames: list[FrameRecord],
    shortlists: dict[int, list[tuple[int, float]]],
    registrations: dict[int, dict[int, RegistrationResult]],
    config: PipelineConfig,
    query_times: list[float],
    stage_totals: dict[str, float],
    attempted_pairs: int,
) -> Optional[EvalReport]:
    if len(frames) < 2 or any(f.pose is None for f in frames):
        return None

    position = {f.frame_id: i for i, f in enumerate(frames)}
    truth = label_pairs([f.pose for f in frames], config.overlap)
    retrievals = {
        position[qid]: [(position[fid], score) for fid, score in hits]
        for qid, hits in shortlists.items()
        if hits
    }
    if not retrievals:
        return None
    precision = {k: precision_at_k(retrievals, truth, k) for k in (1, 5, 10)}

    poses = {f.frame_id: f.pose for f in frames}
    yaw_errors: list[float] = []
    dx_errors: list[float] = []
    dy_errors: list[float] = []
    valid_count = 0
    for qid, results in registrations.items():
        for cid, registration in results.items():
            if registration.valid:
                truth_rel = se3_relative(poses[cid], poses[qid])
                yaw_err, dx, dy = pose_errors(registration.transform, truth_rel)
                yaw_errors.append(yaw_err)
                dx_errors.append(dx)
                dy_errors.append(dy)
                valid_count += 1
            else:
                yaw_errors.append(math.inf)
                dx_errors.append(math.inf)
                dy_errors.append(math.inf)
    if not yaw_errors:
        return None

    yaw_table, dx_table, dy_table = build_error_tables(yaw_errors, dx_errors, dy_errors)
    finite = [e for e in yaw_errors if math.isfinite(e)]
    n_queries = max(len(query_times), 1)
    return EvalReport(
        precision_at=precision,
        yaw_table=yaw_table,
        dx_table=dx_table,
        dy_table=dy_table,
        mean_yaw_err_deg=float(np.mean(finite)) if finite else math.nan,
        mean_dx_m=float(np.mean([e for e in dx_errors if math.isfinite(e)])) if finite else math.nan,
        mean_dy_m=float(np.mean([e for e in dy_errors if math.isfinite(e)])) if finite else math.nan,
        poses_estimated=valid_count,
        total_pairs=attempted_pairs,
        mean_query_time_ms=1000.0 * float(np.mean(query_times)) if query_times else 0.0,
        stage_times_ms={k: 1000.0 * v / n_queries for k, v in stage_totals.items()},
    )


def closure_csv_lines(closures: list[LoopClosure]) -> str:
    lines = [CLOSURE_COLUMNS]
    for c in closures:
        qx, qy, qz, qw = c.transform.quaternion_xyzw()
        tx, ty, tz = c.transform.translation
        lines.append(
            f"{c.query_id},{c.candidate_id},{c.query_timestamp_s:.6f},"
            f"{c.candidate_timestamp_s:.6f},{c.inlier_count},{c.inlier_rmse:.9f},"
            f"{c.pose_distance_m:.9f},{c.retrieval_score:.9f},"
            f"{tx:.9f},{ty:.9f},{tz:.9f},{qx:.9f},{qy:.9f},{qz:.9f},{qw:.9f}"
        )
    return "\n".join(lines) + "\n"


def read_closures_csv(path) -> list[LoopClosure]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != CLOSURE_COLUMNS:
        raise dataio.DataFormatError(f"{path}: unexpected closure CSV header")
    closures = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 15:
            raise dataio.DataFormatError(f"{path}: malformed closure row")
        transform = PoseSE3.from_quaternion(
            [float(parts[8]), float(parts[9]), float(parts[10])],
            [float(parts[11]), float(parts[12]), float(parts[13]), float(parts[14])],
        )
        closures.append(
            LoopClosure(
                query_id=int(parts[0]),
                candidate_id=int(parts[1]),
                query_timestamp_s=float(parts[2]),
                candidate_timestamp_s=float(parts[3]),
                inlier_count=int(parts[4]),
                inlier_rmse=float(parts[5]),
                pose_distance_m=float(parts[6]),
                retrieval_score=float(parts[7]),
                transform=transform,
            )
        )
    return closures


def write_outputs(output_dir: Path, result: PipelineResult) -> None:
    output_dir.mkdir(parents=True, exist_ok=True)
    (output_dir / CLOSURES_FILENAME).write_text(closure_csv_lines(result.closures), encoding="utf-8")
    meta = {
        "frames_indexed": result.frames_indexed,
        "skipped_frames": result.skipped_frames,
        "attempted_pairs": result.attempted_pairs,
        "queries": len(result.shortlists),
        "closures": len(result.closures),
    }
    (output_dir / META_FILENAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    if result.report is not None:
        (output_dir / REPORT_MD_FILENAME).write_text(render_markdown(result.report), encoding="utf-8")
        (output_dir / REPORT_CSV_FILENAME).write_text(render_csv(result.report), encoding="utf-8")


def evaluate_closures(
    closures: list[LoopClosure],
    trajectory: list[tuple[float, PoseSE3]],
    attempted_pairs: Optional[int] = None,
    timestamp_tolerance_s: float = 0.05,
) -> EvalReport:
    """Score stored closures against a ground-truth trajectory.

    Frames are matched to trajectory records by nearest timestamp.  The
    threshold-table denominator is ``attempted_pairs`` when known (failed
    estimations count as errors beyond every threshold), else the closure
    count.
    """
    if not closures:
        raise ValueError("no closures to evaluate")
    if not trajectory:
        raise ValueError("empty ground-truth trajectory")
    times = np.asarray([t for t, _ in trajectory])
    poses = [p for _, p in trajectory]

    def pose_at(timestamp: float) -> PoseSE3:
        i = int(np.argmin(np.abs(times - timestamp)))
        if abs(times[i] - timestamp) > timestamp_tolerance_s:
            raise ValueError(f"no trajectory pose within tolerance of t={timestamp:.6f}")
        return poses[i]

    yaw_errors: list[float] = []
    dx_errors: list[float] = []
    dy_errors: list[float] = []
    for c in closures:
        truth_rel = se3_relative(pose_at(c.candidate_timestamp_s), pose_at(c.query_timestamp_s))
        yaw_err, dx, dy = pose_errors(c.transform, truth_rel)
        yaw_errors.append(yaw_err)
        dx_errors.append(dx)
        dy_errors.append(dy)

    total = attempted_pairs if attempted_pairs is not None else len(closures)
    padding = [math.inf] * max(0, total - len(closures))
    yaw_table, dx_table, dy_table = build_error_tables(
        yaw_errors + padding, dx_errors + padding, dy_errors + padding
    )
    return EvalReport(
        precision_at={},
        yaw_table=yaw_table,
        dx_table=dx_table,
        dy_table=dy_table,
        mean_yaw_err_deg=float(np.mean(yaw_errors)),
        mean_dx_m=float(np.mean(dx_errors)),
        mean_dy_m=float(np.mean(dy_errors)),
        poses_estimated=len(closures),
        total_pairs=total,
        mean_query_time_ms=0.0,
    )
