import json
import math

import numpy as np
import pytest

from mprf import dataio
from mprf.config import PipelineConfig, load_config
from mprf.geometry import PoseSE3, se3_relative
from mprf.pipeline import (
    CLOSURES_FILENAME,
    META_FILENAME,
    REPORT_CSV_FILENAME,
    REPORT_MD_FILENAME,
    closure_csv_lines,
    evaluate_closures,
    read_closures_csv,
    run_pipeline,
)
from mprf.registration import pose_errors
from mprf.synthetic import generate_world


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    manifest_path = generate_world(root, n_scenes=5, n_rounds=4, seed=7)
    config = load_config(root / "config.toml")
    return root, manifest_path, config


@pytest.fixture(scope="module")
def pipeline_result(small_world):
    root, manifest_path, config = small_world
    out_dir = root / "out"
    return run_pipeline(manifest_path, config, output_dir=out_dir), out_dir


class TestRunPipeline:
    def test_indexes_all_frames(self, pipeline_result):
        result, _ = pipeline_result
        assert result.frames_indexed == 20
        assert result.skipped_frames == []

    def test_precision_at_one(self, pipeline_result):
        result, _ = pipeline_result
        assert result.report is not None
        assert result.report.precision_at[1] >= 0.9

    def test_closures_are_same_scene_and_accurate(self, small_world, pipeline_result):
        root, manifest_path, _ = small_world
        result, _ = pipeline_result
        assert result.closures
        manifest = dataio.load_manifest(manifest_path)
        poses = {f.frame_id: f.pose for f in manifest.frames}
        for c in result.closures:
            assert c.query_id % 5 == c.candidate_id % 5  # same scene
            truth = se3_relative(poses[c.candidate_id], poses[c.query_id])
            yaw, dx, dy = pose_errors(c.transform, truth)
            assert yaw < 5.0
            assert math.hypot(dx, dy) < 0.25

    def test_shortlists_respect_exclusion_window(self, small_world, pipeline_result):
        _, manifest_path, config = small_world
        result, _ = pipeline_result
        manifest = dataio.load_manifest(manifest_path)
        times = {f.frame_id: f.timestamp_s for f in manifest.frames}
        for qid, hits in result.shortlists.items():
            for fid, _score in hits:
                assert abs(times[fid] - times[qid]) > config.retrieval.exclusion_window_s

    def test_deterministic_rerun(self, small_world, pipeline_result):
        _, manifest_path, config = small_world
        result, _ = pipeline_result
        rerun = run_pipeline(manifest_path, config)
        assert closure_csv_lines(rerun.closures) == closure_csv_lines(result.closures)

    def test_report_written(self, pipeline_result):
        result, out_dir = pipeline_result
        assert (out_dir / CLOSURES_FILENAME).exists()
        assert (out_dir / REPORT_MD_FILENAME).exists()
        assert (out_dir / REPORT_CSV_FILENAME).exists()
        meta = json.loads((out_dir / META_FILENAME).read_text())
        assert meta["attempted_pairs"] == result.attempted_pairs
        assert meta["closures"] == len(result.closures)

    def test_closure_csv_roundtrip(self, pipeline_result):
        result, out_dir = pipeline_result
        loaded = read_closures_csv(out_dir / CLOSURES_FILENAME)
        assert len(loaded) == len(result.closures)
        first, ref = loaded[0], result.closures[0]
        assert first.query_id == ref.query_id
        assert first.candidate_id == ref.candidate_id
        np.testing.assert_allclose(
            first.transform.matrix(), ref.transform.matrix(), atol=1e-6
        )

    def test_timing_fields_populated(self, pipeline_result):
        result, _ = pipeline_result
        report = result.report
        assert report.mean_query_time_ms > 0
        assert set(report.stage_times_ms) == {"retrieval", "fusion", "registration"}


class TestRerankModes:
    def test_inlier_count_mode_orders_by_inliers(self, small_world):
        import dataclasses

        _, manifest_path, config = small_world
        result = run_pipeline(manifest_path, dataclasses.replace(config, rerank_mode="inlier_count"))
        assert result.closures
        by_query = {}
        for c in result.closures:
            by_query.setdefault(c.query_id, []).append(c.inlier_count)
        for counts in by_query.values():
            assert counts == sorted(counts, reverse=True)

    def test_pose_distance_mode_orders_by_distance(self, pipeline_result):
        result, _ = pipeline_result
        by_query = {}
        for c in result.closures:
            by_query.setdefault(c.query_id, []).append(c.pose_distance_m)
        for distances in by_query.values():
            assert distances == sorted(distances)


class TestIcpRefinementMode:
    def test_enabled_icp_keeps_accuracy_and_inlier_bound(self, small_world):
        import dataclasses

        from mprf.config import IcpConfig

        _, manifest_path, config = small_world
        icp_config = dataclasses.replace(config, icp=IcpConfig(enabled=True, max_corr_dist=0.1))
        result = run_pipeline(manifest_path, icp_config)
        assert result.closures
        manifest = dataio.load_manifest(manifest_path)
        poses = {f.frame_id: f.pose for f in manifest.frames}
        for c in result.closures:
            assert c.inlier_count >= icp_config.ransac.min_inliers
            truth = se3_relative(poses[c.candidate_id], poses[c.query_id])
            yaw, dx, dy = pose_errors(c.transform, truth)
            assert yaw < 5.0
            assert math.hypot(dx, dy) < 0.25


class TestPipelineEdgeCases:
    def test_missing_scan_skips_frame(self, tmp_path, caplog):
        manifest_path = generate_world(tmp_path, n_scenes=3, n_rounds=2, seed=1)
        (tmp_path / "frames" / "0003_scan.mprf").unlink()
        config = load_config(tmp_path / "config.toml")
        with caplog.at_level("WARNING", logger="mprf.pipeline"):
            result = run_pipeline(manifest_path, config)
        assert result.skipped_frames == [3]
        assert result.frames_indexed == 5
        assert any("skipping frame 3" in message for message in caplog.messages)

    def test_empty_manifest_empty_result(self, tmp_path):
        manifest = {
            "calibration": {"fx": 100.0, "fy": 100.0, "cx": 32.0, "cy": 32.0, "width": 64, "height": 64},
            "frames": [],
        }
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps(manifest), encoding="utf-8")
        result = run_pipeline(path, PipelineConfig())
        assert result.closures == []
        assert result.report is None
        assert result.frames_indexed == 0

    def test_no_ground_truth_no_report(self, tmp_path):
        manifest_path = generate_world(tmp_path, n_scenes=3, n_rounds=2, seed=2)
        data = json.loads(manifest_path.read_text())
        for frame in data["frames"]:
            frame.pop("pose")
        manifest_path.write_text(json.dumps(data), encoding="utf-8")
        config = load_config(tmp_path / "config.toml")
        result = run_pipeline(manifest_path, config)
        assert result.report is None
        assert result.frames_indexed == 6


class TestEvaluateClosures:
    def test_against_generated_trajectory(self, small_world, pipeline_result):
        root, _, _ = small_world
        result, out_dir = pipeline_result
        closures = read_closures_csv(out_dir / CLOSURES_FILENAME)
        trajectory = dataio.read_trajectory(root / "trajectory.txt")
        report = evaluate_closures(closures, trajectory, attempted_pairs=result.attempted_pairs)
        assert report.poses_estimated == len(closures)
        assert report.total_pairs == result.attempted_pairs
        assert report.yaw_table[10.0] <= 100.0
        assert report.mean_yaw_err_deg < 5.0

    def test_timestamp_mismatch_rejected(self, pipeline_result):
        result, out_dir = pipeline_result
        closures = read_closures_csv(out_dir / CLOSURES_FILENAME)
        bogus = [(99999.0 + i, PoseSE3.identity()) for i in range(3)]
        with pytest.raises(ValueError, match="tolerance"):
            evaluate_closures(closures, bogus)

    def test_empty_closures_rejected(self):
        with pytest.raises(ValueError):
            evaluate_closures([], [(0.0, PoseSE3.identity())])
