"""On-disk formats: binary embedding/index files, the JSON manifest, and
plain-text trajectories.

Every binary file starts with the 4-byte magic ``MPRF`` followed by a
one-byte record type, then little-endian payload fields:

* cluster bank:      u32 K, u32 d_in, u32 d_proj, f32 dustbin_score,
                     centers row-major f32, projection row-major f32
* descriptor index / refinement store (distinct tags, same layout):
                     u64 count, then per entry u64 frame_id, u32 dim, f32[dim]
* LiDAR scan:        u32 M, u32 d_lidar, points f32[M x 3], descriptors f32[M x d_lidar]
* patch embeddings:  u32 layers, u32 P, u32 d_in, f32[layers x P x d_in]

Trajectories are ASCII, one record per line:
``timestamp tx ty tz qx qy qz qw`` (seconds, meters, unit quaternion in
x-y-z-w order).  Blank lines and ``#`` comments are skipped.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from mprf.aggregation import ClusterBank
from mprf.fusion import LidarScan
from mprf.geometry import CameraIntrinsics, PoseSE3

MAGIC = b"MPRF"

TAG_CLUSTER_BANK = 1
TAG_GLOBAL_INDEX = 2
TAG_REFINEMENT_STORE = 3
TAG_LIDAR_SCAN = 4
TAG_PATCH_EMBEDDINGS = 5


class DataFormatError(ValueError):
    """A binary or text input file does not match its expected layout."""


class ManifestError(ValueError):
    """The JSON manifest is missing fields or structurally invalid."""


def _write_header(stream: BinaryIO, tag: int) -> None:
    stream.write(MAGIC)
    stream.write(struct.pack("<B", tag))


def _read_header(stream: BinaryIO, expected_tag: int, path: Path) -> None:
    head = stream.read(5)
    if len(head) != 5 or head[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic, not an MPRF file")
    tag = head[4]
    if tag != expected_tag:
        raise DataFormatError(f"{path}: record type {tag}, expected {expected_tag}")


def _read_exact(stream: BinaryIO, count: int, path: Path) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise DataFormatError(f"{path}: truncated file")
    return data


def _read_f32(stream: BinaryIO, count: int, path: Path) -> np.ndarray:
    raw = _read_exact(stream, 4 * count, path)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def write_cluster_bank(path, bank: ClusterBank) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        _write_header(f, TAG_CLUSTER_BANK)
        f.write(
            struct.pack(
                "<IIIf", bank.n_clusters, bank.input_dim, bank.projected_dim, bank.dustbin_score
            )
        )
        f.write(bank.centers.astype("<f4").tobytes())
        f.write(bank.projection.astype("<f4").tobytes())


def read_cluster_bank(path) -> ClusterBank:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, TAG_CLUSTER_BANK, path)
        k, d_in, d_proj, dustbin = struct.unpack("<IIIf", _read_exact(f, 16, path))
        centers = _read_f32(f, k * d_in, path).reshape(k, d_in)
        projection = _read_f32(f, d_in * d_proj, path).reshape(d_in, d_proj)
    return ClusterBank(centers=centers, projection=projection, dustbin_score=float(dustbin))


def write_vector_records(path, tag: int, frame_ids, vectors) -> None:
    """Write (frame_id, vector) records; used by the index and the
    refinement store with their respective tags."""
    path = Path(path)
    frame_ids = list(frame_ids)
    with open(path, "wb") as f:
        _write_header(f, tag)
        f.write(struct.pack("<Q", len(frame_ids)))
        for fid, vec in zip(frame_ids, vectors, strict=True):
            arr = np.asarray(vec, dtype="<f4")
            f.write(struct.pack("<QI", int(fid), arr.shape[0]))
            f.write(arr.tobytes())


def read_vector_records(path, tag: int) -> tuple[list[int], np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, tag, path)
        (count,) = struct.unpack("<Q", _read_exact(f, 8, path))
        ids: list[int] = []
        vectors: list[np.ndarray] = []
        for _ in range(count):
            fid, dim = struct.unpack("<QI", _read_exact(f, 12, path))
            ids.append(fid)
            vectors.append(_read_f32(f, dim, path))
    if vectors and any(v.shape != vectors[0].shape for v in vectors):
        raise DataFormatError(f"{path}: inconsistent vector dimensions")
    matrix = np.stack(vectors) if vectors else np.empty((0, 0))
    return ids, matrix


def write_scan(path, scan: LidarScan) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        _write_header(f, TAG_LIDAR_SCAN)
        m, d_lidar = scan.descriptors.shape
        f.write(struct.pack("<II", m, d_lidar))
        f.write(scan.points.astype("<f4").tobytes())
        f.write(scan.descriptors.astype("<f4").tobytes())


def read_scan(path) -> LidarScan:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, TAG_LIDAR_SCAN, path)
        m, d_lidar = struct.unpack("<II", _read_exact(f, 8, path))
        points = _read_f32(f, m * 3, path).reshape(m, 3)
        descriptors = _read_f32(f, m * d_lidar, path).reshape(m, d_lidar)
    return LidarScan(points=points, descriptors=descriptors)


def write_patches(path, layer_feats: np.ndarray) -> None:
    path = Path(path)
    feats = np.asarray(layer_feats)
    if feats.ndim != 3:
        raise ValueError(f"patch embeddings must be (layers, P, d_in), got {feats.shape}")
    with open(path, "wb") as f:
        _write_header(f, TAG_PATCH_EMBEDDINGS)
        f.write(struct.pack("<III", *feats.shape))
        f.write(feats.astype("<f4").tobytes())


def read_patches(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        _read_header(f, TAG_PATCH_EMBEDDINGS, path)
        layers, n_patches, d_in = struct.unpack("<III", _read_exact(f, 12, path))
        feats = _read_f32(f, layers * n_patches * d_in, path)
    return feats.reshape(layers, n_patches, d_in)


def read_trajectory(path) -> list[tuple[float, PoseSE3]]:
    path = Path(path)
    records: list[tuple[float, PoseSE3]] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            values = [float(p) for p in parts]
        except ValueError as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        pose = PoseSE3.from_quaternion(values[1:4], values[4:8])
        records.append((values[0], pose))
    return records


def write_trajectory(path, records) -> None:
    path = Path(path)
    lines = []
    for timestamp, pose in records:
        qx, qy, qz, qw = pose.quaternion_xyzw()
        tx, ty, tz = pose.translation
        lines.append(
            f"{timestamp:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class FrameSpec:
    """One manifest entry; file paths are resolved against the manifest dir."""

    frame_id: int
    timestamp_s: float
    patch_file: Path
    scan_file: Path
    pose: Optional[PoseSE3] = None


@dataclass(frozen=True)
class Manifest:
    calibration: CameraIntrinsics
    frames: list[FrameSpec]


@dataclass(frozen=True)
class FrameRecord:
    """A fully loaded sensor frame."""

    frame_id: int
    timestamp_s: float
    layer_feats: np.ndarray  # (layers, P, d_in)
    scan: LidarScan
    pose: Optional[PoseSE3] = None

    @property
    def last_layer(self) -> np.ndarray:
        return self.layer_feats[-1]


def _parse_pose(obj, context: str) -> PoseSE3:
    try:
        translation = obj["translation"]
        quat = obj["quaternion_xyzw"]
    except (TypeError, KeyError) as exc:
        raise ManifestError(f"{context}: pose needs 'translation' and 'quaternion_xyzw'") from exc
    try:
        return PoseSE3.from_quaternion(translation, quat)
    except ValueError as exc:
        raise ManifestError(f"{context}: {exc}") from exc


def pose_to_json(pose: PoseSE3) -> dict:
    return {
        "translation": [float(v) for v in pose.translation],
        "quaternion_xyzw": [float(v) for v in pose.quaternion_xyzw()],
    }


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc

    if not isinstance(raw, dict):
        raise ManifestError(f"{path}: top level must be an object")
    try:
        calib = raw["calibration"]
        frames_raw = raw["frames"]
    except KeyError as exc:
        raise ManifestError(f"{path}: missing top-level key {exc}") from exc

    try:
        cam_from_lidar = (
            _parse_pose(calib["cam_from_lidar"], "calibration")
            if "cam_from_lidar" in calib
            else PoseSE3.identity()
        )
        intrinsics = CameraIntrinsics(
            fx=float(calib["fx"]),
            fy=float(calib["fy"]),
            cx=float(calib["cx"]),
            cy=float(calib["cy"]),
            width=int(calib["width"]),
            height=int(calib["height"]),
            cam_from_lidar=cam_from_lidar,
        )
    except (TypeError, KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: bad calibration block ({exc})") from exc

    base = path.parent
    frames: list[FrameSpec] = []
    seen_ids: set[int] = set()
    for i, entry in enumerate(frames_raw):
        context = f"{path}: frames[{i}]"
        try:
            frame_id = int(entry["id"])
            timestamp = float(entry["timestamp_s"])
            patch_file = base / entry["patch_file"]
            scan_file = base / entry["scan_file"]
        except (TypeError, KeyError, ValueError) as exc:
            raise ManifestError(f"{context}: {exc}") from exc
        if frame_id in seen_ids:
            raise ManifestError(f"{context}: duplicate frame id {frame_id}")
        seen_ids.add(frame_id)
        pose = _parse_pose(entry["pose"], context) if entry.get("pose") is not None else None
        frames.append(
            FrameSpec(
                frame_id=frame_id,
                timestamp_s=timestamp,
                patch_file=patch_file,
                scan_file=scan_file,
                pose=pose,
            )
        )
    return Manifest(calibration=intrinsics, frames=frames)


def load_frame(spec: FrameSpec) -> FrameRecord:
    return FrameRecord(
        frame_id=spec.frame_id,
        timestamp_s=spec.timestamp_s,
        layer_feats=read_patches(spec.patch_file),
        scan=read_scan(spec.scan_file),
        pose=spec.pose,
    )
