"""FastAPI service wrapping the loop-closure engine.

Endpoints mirror the CLI surface: build an index, retrieve, run the full
close-loop pipeline, mine training triplets, and evaluate stored closures
against a ground-truth trajectory.  Handlers are stateless; every request
names its inputs by path.  Domain errors (bad manifest/config, malformed
files, impossible requests) map to HTTP 400 with a message.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

from fastapi import FastAPI, HTTPException

import mprf
from mprf import dataio
from mprf.config import ConfigError, PipelineConfig, load_config
from mprf.evaluation import EvalReport, render_csv, render_markdown
from mprf.overlap import mine_triplets
from mprf.pipeline import (
    CLOSURES_FILENAME,
    META_FILENAME,
    LoopClosure,
    build_index,
    evaluate_closures,
    frame_descriptors,
    load_frames,
    read_closures_csv,
    resolve_bank,
    run_pipeline,
)
from mprf.retrieval import DescriptorIndex, RefinementStore, two_stage_retrieve
from mprf.service import schemas

logger = logging.getLogger(__name__)

INPUT_ERRORS = (
    dataio.ManifestError,
    dataio.DataFormatError,
    ConfigError,
    FileNotFoundError,
    ValueError,
    KeyError,
)


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


def _load_pipeline_config(config_path: str | None) -> PipelineConfig:
    if config_path is None:
        return PipelineConfig()
    return load_config(config_path)


def refinement_path_for(index_path: str) -> str:
    return index_path + ".refine"


def bank_path_for(index_path: str) -> str:
    return index_path + ".bank"


def _report_model(report: EvalReport) -> schemas.ReportModel:
    def entries(table: dict[float, float]) -> list[schemas.ThresholdEntry]:
        return [schemas.ThresholdEntry(threshold=t, percent=p) for t, p in table.items()]

    def finite(value: float) -> float:
        return value if math.isfinite(value) else -1.0

    return schemas.ReportModel(
        precision_at=report.precision_at,
        yaw_table=entries(report.yaw_table),
        dx_table=entries(report.dx_table),
        dy_table=entries(report.dy_table),
        mean_yaw_err_deg=finite(report.mean_yaw_err_deg),
        mean_dx_m=finite(report.mean_dx_m),
        mean_dy_m=finite(report.mean_dy_m),
        poses_estimated=report.poses_estimated,
        total_pairs=report.total_pairs,
        mean_query_time_ms=report.mean_query_time_ms,
        stage_times_ms=report.stage_times_ms,
    )


def _closure_model(closure: LoopClosure) -> schemas.ClosureModel:
    return schemas.ClosureModel(
        query_id=closure.query_id,
        candidate_id=closure.candidate_id,
        inliers=closure.inlier_count,
        inlier_rmse_m=closure.inlier_rmse,
        pose_distance_m=closure.pose_distance_m,
        retrieval_score=closure.retrieval_score,
        translation=[float(v) for v in closure.transform.translation],
        quaternion_xyzw=[float(v) for v in closure.transform.quaternion_xyzw()],
    )


def create_app() -> FastAPI:
    app = FastAPI(
        title="mprf",
        version=mprf.__version__,
        description="Loop-closure detection over precomputed visual/LiDAR embeddings.",
    )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return schemas.HealthResponse(status="ok", version=mprf.__version__)

    @app.post("/index", response_model=schemas.BuildIndexResponse)
    def build(request: schemas.BuildIndexRequest) -> schemas.BuildIndexResponse:
        try:
            config = _load_pipeline_config(request.config_path)
            manifest = dataio.load_manifest(request.manifest_path)
            frames, skipped = load_frames(manifest)
            if not frames:
                raise ValueError("manifest contains no loadable frames")
            bank = resolve_bank(frames, config)
            index, store, degenerate = build_index(frames, bank, config)
            out = Path(request.output_path)
            out.parent.mkdir(parents=True, exist_ok=True)
            index.save(out)
            store.save(refinement_path_for(request.output_path))
            dataio.write_cluster_bank(bank_path_for(request.output_path), bank)
        except INPUT_ERRORS as exc:
            raise _bad_request(exc) from exc
        return schemas.BuildIndexResponse(
            frames_indexed=len(index),
            skipped_frames=skipped + degenerate,
            index_path=str(out),
            refinement_path=refinement_path_for(request.output_path),
            bank_path=bank_path_for(request.output_path),
        )

    @app.post("/retrieve", response_model=schemas.RetrieveResponse)
    def retrieve(request: schemas.RetrieveRequest) -> schemas.RetrieveResponse:
        try:
            config = _load_pipeline_config(request.config_path)
            manifest = dataio.load_manifest(request.manifest_path)
            index = DescriptorIndex.load(
                request.index_path,
                mode=config.retrieval.mode,
                n_probe=config.retrieval.ivf_probe,
            )
            if config.retrieval.mode == "ivf":
                index.train_lists(n_lists=config.retrieval.ivf_lists, seed=config.seed)
            store = None
            refine_path = Path(refinement_path_for(request.index_path))
            if refine_path.exists():
                store = RefinementStore.load(refine_path)
            bank_file = Path(bank_path_for(request.index_path))
            if config.aggregation.bank_path is None and not bank_file.exists():
                raise ValueError(
                    f"no cluster bank beside the index ({bank_file}); "
                    "pass a config with aggregation.bank_path or rebuild the index"
                )
            bank = (
                dataio.read_cluster_bank(config.aggregation.bank_path)
                if config.aggregation.bank_path is not None
                else dataio.read_cluster_bank(bank_file)
            )

            wanted = set(request.query_ids) if request.query_ids is not None else None
            specs = [
                s for s in manifest.frames if wanted is None or s.frame_id in wanted
            ]
            if wanted is not None and len(specs) != len(wanted):
                missing = sorted(wanted - {s.frame_id for s in specs})
                raise ValueError(f"query ids not in manifest: {missing}")
            timestamps = {s.frame_id: s.timestamp_s for s in manifest.frames}
            window = config.retrieval.exclusion_window_s

            shortlists: list[schemas.QueryShortlist] = []
            for spec in specs:
                frame = dataio.load_frame(spec)
                descriptors = frame_descriptors(frame, bank, config)
                if descriptors is None:
                    shortlists.append(schemas.QueryShortlist(query_id=spec.frame_id, hits=[]))
                    continue
                global_desc, refinement = descriptors

                def exclude(fid: int, _t: float = spec.timestamp_s, _q: int = spec.frame_id) -> bool:
                    if fid == _q:
                        return True
                    return fid in timestamps and abs(timestamps[fid] - _t) <= window

                if all(exclude(fid) for fid in index.frame_ids):
                    hits = []
                elif store is not None:
                    n1 = max(config.retrieval.shortlist_size, request.k)
                    hits = two_stage_retrieve(
                        global_desc, refinement, index, store,
                        n1=n1, n2=request.k, exclude=exclude,
                    )
                else:
                    hits = index.search(global_desc, request.k, exclude=exclude)
                shortlists.append(
                    schemas.QueryShortlist(
                        query_id=spec.frame_id,
                        hits=[schemas.RetrievalHit(frame_id=f, score=s) for f, s in hits],
                    )
                )
        except INPUT_ERRORS as exc:
            raise _bad_request(exc) from exc
        return schemas.RetrieveResponse(shortlists=shortlists)

    @app.post("/closeloop", response_model=schemas.CloseLoopResponse)
    def closeloop(request: schemas.CloseLoopRequest) -> schemas.CloseLoopResponse:
        try:
            config = _load_pipeline_config(request.config_path)
            result = run_pipeline(request.manifest_path, config, output_dir=request.output_dir)
        except INPUT_ERRORS as exc:
            raise _bad_request(exc) from exc
        return schemas.CloseLoopResponse(
            frames_indexed=result.frames_indexed,
            skipped_frames=result.skipped_frames,
            attempted_pairs=result.attempted_pairs,
            closures=[_closure_model(c) for c in result.closures],
            report=_report_model(result.report) if result.report is not None else None,
            output_dir=request.output_dir,
        )

    @app.post("/mine-triplets", response_model=schemas.MineTripletsResponse)
    def mine(request: schemas.MineTripletsRequest) -> schemas.MineTripletsResponse:
        try:
            config = _load_pipeline_config(request.config_path)
            manifest = dataio.load_manifest(request.manifest_path)
            missing = [s.frame_id for s in manifest.frames if s.pose is None]
            if missing:
                raise ValueError(f"frames without ground-truth poses: {missing[:5]}")
            poses = [s.pose for s in manifest.frames]
            times = [s.timestamp_s for s in manifest.frames]
            ids = [s.frame_id for s in manifest.frames]
            try:
                triplets = mine_triplets(
                    poses, times, config.triplets,
                    count=request.count, seed=request.seed, params=config.overlap,
                )
            except ValueError as exc:
                if "no valid triplet" in str(exc):
                    return schemas.MineTripletsResponse(triplets=[], message=str(exc))
                raise
        except INPUT_ERRORS as exc:
            raise _bad_request(exc) from exc
        return schemas.MineTripletsResponse(
            triplets=[
                schemas.TripletModel(anchor=ids[a], positive=ids[p], negative=ids[n])
                for a, p, n in triplets
            ]
        )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(request: schemas.EvalRequest) -> schemas.EvalResponse:
        try:
            report_dir = Path(request.report_dir)
            closures = read_closures_csv(report_dir / CLOSURES_FILENAME)
            trajectory = dataio.read_trajectory(request.gt_trajectory)
            attempted = None
            meta_path = report_dir / META_FILENAME
            if meta_path.exists():
                import json

                attempted = json.loads(meta_path.read_text(encoding="utf-8")).get("attempted_pairs")
            report = evaluate_closures(closures, trajectory, attempted_pairs=attempted)
            md_path = report_dir / "eval_report.md"
            csv_path = report_dir / "eval_report.csv"
            md_path.write_text(render_markdown(report), encoding="utf-8")
            csv_path.write_text(render_csv(report), encoding="utf-8")
        except INPUT_ERRORS as exc:
            raise _bad_request(exc) from exc
        return schemas.EvalResponse(
            report=_report_model(report),
            closures_evaluated=len(closures),
            report_md_path=str(md_path),
            report_csv_path=str(csv_path),
        )

    return app


app = create_app()
