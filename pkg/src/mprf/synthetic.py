"""Synthetic world generator for exercising the full pipeline.

Builds a trajectory that revisits a handful of scenes.  Each scene is a
template point cloud "ceiling" above the sensor plus per-point descriptor
identities; every visit observes the template from a slightly perturbed
pose, with fresh descriptor noise and 0.01 m point noise.  Cameras look
straight up (+z), so the camera frames are z-up and yaw-about-z is the
heading; ground truth relative poses are exact by construction.

Descriptors are built so same-scene frames exceed 0.95 cosine similarity
while cross-scene frames stay well below 0.5: every scene has one
background vector per layer shared by point-free patches, and every
template point a persistent visual/LiDAR identity.

``python -m mprf.synthetic OUT_DIR`` writes a ready-to-run dataset:
manifest.json, per-frame embedding/scan files, config.toml tuned to the
synthetic geometry, and trajectory.txt with the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mprf import dataio
from mprf.fusion import LidarScan
from mprf.geometry import CameraIntrinsics, PoseSE3, project_points, rotation_about_z

IMAGE_SIZE = 64
FOCAL = 240.0
PATCH_GRID = (32, 32)
VISUAL_DIM = 32
LIDAR_DIM = 16
POINTS_PER_SCENE = 64
SCENE_SPACING_M = 100.0
FRAME_INTERVAL_S = 10.0

POINT_NOISE_M = 0.01
DESCRIPTOR_NOISE = 0.02
# Jitter is large enough that a do-nothing estimator would blow the
# 5 deg / 0.1 m accuracy budget on most revisit pairs.
HEADING_JITTER_DEG = 4.0
POSITION_JITTER_M = 0.08

CAM_FROM_LIDAR = PoseSE3(rotation_about_z(5.0), np.array([0.05, -0.02, 0.10]))

SYNTHETIC_CONFIG = """\
seed = 0

[aggregation]
clusters = 16
projected_dim = 16
bank_seed = 0
bank_sample_limit = 6000

[retrieval]
shortlist_size = 20
rerank_size = 10
exclusion_window_s = 30.0

[fusion]
similarity_threshold = 0.90
patch_rows = 32
patch_cols = 32

[ransac]
distance_threshold = 0.05
rng_seed = 0

[overlap]
fov_h_deg = 90.0
lat_max_m = 10.0
fwd_max_m = 20.0
tau_o = 0.6
"""


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


@dataclass(frozen=True)
class SceneTemplate:
    center_xy: np.ndarray
    points_world: np.ndarray            # (n, 3), above the sensor plane
    visual_identity: np.ndarray         # (layers, n, d_vis) unit rows
    lidar_identity: np.ndarray          # (n, d_lidar) unit rows
    background: np.ndarray              # (layers, d_vis) unit rows


def make_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=FOCAL,
        fy=FOCAL,
        cx=IMAGE_SIZE / 2,
        cy=IMAGE_SIZE / 2,
        width=IMAGE_SIZE,
        height=IMAGE_SIZE,
        cam_from_lidar=CAM_FROM_LIDAR,
    )


def _make_scene(scene_idx: int, seed: int) -> SceneTemplate:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000 + scene_idx]))
    center = np.array([SCENE_SPACING_M * scene_idx, 0.0])
    # A deep z-spread keeps tilt well observed; tilt error would otherwise
    # leak into planar translation through the ~3 m depth lever.
    points = np.column_stack(
        [
            center[0] + rng.uniform(-0.22, 0.22, size=POINTS_PER_SCENE),
            center[1] + rng.uniform(-0.22, 0.22, size=POINTS_PER_SCENE),
            rng.uniform(2.6, 4.0, size=POINTS_PER_SCENE),
        ]
    )
    visual = np.stack(
        [_unit_rows(rng.normal(size=(POINTS_PER_SCENE, VISUAL_DIM))) for _ in range(3)]
    )
    lidar = _unit_rows(rng.normal(size=(POINTS_PER_SCENE, LIDAR_DIM)))
    background = _unit_rows(rng.normal(size=(3, VISUAL_DIM)))
    return SceneTemplate(
        center_xy=center,
        points_world=points,
        visual_identity=visual,
        lidar_identity=lidar,
        background=background,
    )


def _frame_pose(scene: SceneTemplate, rng: np.random.Generator) -> PoseSE3:
    heading = rng.uniform(-HEADING_JITTER_DEG, HEADING_JITTER_DEG)
    offset = rng.uniform(-POSITION_JITTER_M, POSITION_JITTER_M, size=2)
    translation = np.array([scene.center_xy[0] + offset[0], scene.center_xy[1] + offset[1], 0.0])
    return PoseSE3(rotation_about_z(heading), translation)


def _frame_features(
    scene: SceneTemplate,
    pose: PoseSE3,
    intrinsics: CameraIntrinsics,
    rng: np.random.Generator,
) -> tuple[np.ndarray, LidarScan]:
    """Patch features (3, P, d_vis) and the LiDAR scan for one visit."""
    rows, cols = PATCH_GRID
    n_patches = rows * cols

    world_points = scene.points_world + rng.normal(scale=POINT_NOISE_M, size=scene.points_world.shape)
    cam_points = pose.inverse().apply(world_points)
    lidar_points = intrinsics.cam_from_lidar.inverse().apply(cam_points)
    lidar_desc = _unit_rows(
        scene.lidar_identity + rng.normal(scale=DESCRIPTOR_NOISE, size=scene.lidar_identity.shape)
    )

    feats = np.empty((3, n_patches, VISUAL_DIM))
    for layer in range(3):
        base = scene.background[layer] + rng.normal(scale=DESCRIPTOR_NOISE, size=(n_patches, VISUAL_DIM))
        feats[layer] = _unit_rows(base)

    # Stamp each populated patch with the identity of the point nearest its
    # center, mirroring how the fusion stage associates descriptors.
    uv, _, valid = project_points(cam_points, intrinsics)
    patch_w = intrinsics.width / cols
    patch_h = intrinsics.height / rows
    visible = np.flatnonzero(valid)
    patch_of = (
        np.floor(uv[visible, 1] / patch_h).astype(int) * cols
        + np.floor(uv[visible, 0] / patch_w).astype(int)
    )
    for pid in np.unique(patch_of):
        members = visible[patch_of == pid]
        center = np.array([(pid % cols + 0.5) * patch_w, (pid // cols + 0.5) * patch_h])
        offsets = uv[members] - center
        nearest = members[int(np.argmin(np.einsum("ij,ij->i", offsets, offsets)))]
        for layer in range(3):
            noisy = scene.visual_identity[layer, nearest] + rng.normal(
                scale=DESCRIPTOR_NOISE, size=VISUAL_DIM
            )
            feats[layer, pid] = _unit(noisy)
    return feats, LidarScan(points=lidar_points, descriptors=lidar_desc)


def generate_world(
    output_dir,
    n_scenes: int = 5,
    n_rounds: int = 8,
    seed: int = 0,
) -> Path:
    """Write a synthetic dataset; returns the manifest path.

    The trajectory visits the scenes cyclically (``n_scenes * n_rounds``
    frames, one every 10 s), so same-scene revisits are separated by well
    over the default 30 s self-match exclusion window.
    """
    output_dir = Path(output_dir)
    frames_dir = output_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    intrinsics = make_intrinsics()
    scenes = [_make_scene(s, seed) for s in range(n_scenes)]

    frames_json = []
    trajectory = []
    for frame_id in range(n_scenes * n_rounds):
        scene = scenes[frame_id % n_scenes]
        rng = np.random.default_rng(np.random.SeedSequence([seed, frame_id]))
        pose = _frame_pose(scene, rng)
        feats, scan = _frame_features(scene, pose, intrinsics, rng)

        patch_file = f"frames/{frame_id:04d}_patches.mprf"
        scan_file = f"frames/{frame_id:04d}_scan.mprf"
        dataio.write_patches(output_dir / patch_file, feats)
        dataio.write_scan(output_dir / scan_file, scan)

        timestamp = frame_id * FRAME_INTERVAL_S
        trajectory.append((timestamp, pose))
        frames_json.append(
            {
                "id": frame_id,
                "timestamp_s": timestamp,
                "patch_file": patch_file,
                "scan_file": scan_file,
                "pose": dataio.pose_to_json(pose),
            }
        )

    manifest = {
        "calibration": {
            "fx": intrinsics.fx,
            "fy": intrinsics.fy,
            "cx": intrinsics.cx,
            "cy": intrinsics.cy,
            "width": intrinsics.width,
            "height": intrinsics.height,
            "cam_from_lidar": dataio.pose_to_json(intrinsics.cam_from_lidar),
        },
        "frames": frames_json,
    }
    manifest_path = output_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    dataio.write_trajectory(output_dir / "trajectory.txt", trajectory)
    (output_dir / "config.toml").write_text(SYNTHETIC_CONFIG, encoding="utf-8")
    return manifest_path


def main(argv=None) -> None:
    import argparse

    parser = argparse.ArgumentParser(description="Generate a synthetic loop-closure dataset.")
    parser.add_argument("output_dir")
    parser.add_argument("--scenes", type=int, default=5)
    parser.add_argument("--rounds", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    manifest = generate_world(args.output_dir, args.scenes, args.rounds, args.seed)
    print(f"wrote {manifest}")


if __name__ == "__main__":
    main()
