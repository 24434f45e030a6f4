"""Request/response models for the loop-closure service.

All heavy inputs (embeddings, scans, indexes) travel as file paths, not
payloads: the service is expected to share a filesystem with its clients
(same host or a shared mount), which keeps requests small and lets the CLI
stay a thin wrapper.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class BuildIndexRequest(BaseModel):
    manifest_path: str
    output_path: str
    config_path: Optional[str] = None


class BuildIndexResponse(BaseModel):
    frames_indexed: int
    skipped_frames: list[int]
    index_path: str
    refinement_path: str
    bank_path: str


class RetrieveRequest(BaseModel):
    manifest_path: str
    index_path: str
    k: int = Field(default=10, ge=1)
    config_path: Optional[str] = None
    query_ids: Optional[list[int]] = None


class RetrievalHit(BaseModel):
    frame_id: int
    score: float


class QueryShortlist(BaseModel):
    query_id: int
    hits: list[RetrievalHit]


class RetrieveResponse(BaseModel):
    shortlists: list[QueryShortlist]


class CloseLoopRequest(BaseModel):
    manifest_path: str
    output_dir: str
    config_path: Optional[str] = None


class ClosureModel(BaseModel):
    query_id: int
    candidate_id: int
    inliers: int
    inlier_rmse_m: float
    pose_distance_m: float
    retrieval_score: float
    translation: list[float]
    quaternion_xyzw: list[float]


class ThresholdEntry(BaseModel):
    threshold: float
    percent: float


class ReportModel(BaseModel):
    precision_at: dict[int, float]
    yaw_table: list[ThresholdEntry]
    dx_table: list[ThresholdEntry]
    dy_table: list[ThresholdEntry]
    mean_yaw_err_deg: float
    mean_dx_m: float
    mean_dy_m: float
    poses_estimated: int
    total_pairs: int
    mean_query_time_ms: float
    stage_times_ms: dict[str, float]


class CloseLoopResponse(BaseModel):
    frames_indexed: int
    skipped_frames: list[int]
    attempted_pairs: int
    closures: list[ClosureModel]
    report: Optional[ReportModel]
    output_dir: str


class MineTripletsRequest(BaseModel):
    manifest_path: str
    count: int = Field(ge=1)
    seed: int = 0
    config_path: Optional[str] = None


class TripletModel(BaseModel):
    anchor: int
    positive: int
    negative: int


class MineTripletsResponse(BaseModel):
    triplets: list[TripletModel]
    message: Optional[str] = None


class EvalRequest(BaseModel):
    report_dir: str
    gt_trajectory: str


class EvalResponse(BaseModel):
    report: ReportModel
    closures_evaluated: int
    report_md_path: str
    report_csv_path: str
