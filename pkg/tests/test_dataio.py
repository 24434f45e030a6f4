import json

import numpy as np
import pytest

from mprf import dataio
from mprf.aggregation import ClusterBank
from mprf.fusion import LidarScan
from mprf.geometry import PoseSE3, rotation_about_z


class TestClusterBankFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        bank = ClusterBank(
            centers=rng.normal(size=(8, 16)).astype(np.float32),
            projection=rng.normal(size=(16, 4)).astype(np.float32),
            dustbin_score=0.75,
        )
        path = tmp_path / "bank.mprf"
        dataio.write_cluster_bank(path, bank)
        loaded = dataio.read_cluster_bank(path)
        np.testing.assert_allclose(loaded.centers, bank.centers, atol=1e-7)
        np.testing.assert_allclose(loaded.projection, bank.projection, atol=1e-7)
        assert loaded.dustbin_score == pytest.approx(0.75)

    def test_header_layout(self, tmp_path):
        bank = ClusterBank(centers=np.eye(3), projection=np.eye(3), dustbin_score=0.0)
        path = tmp_path / "bank.mprf"
        dataio.write_cluster_bank(path, bank)
        raw = path.read_bytes()
        assert raw[:4] == b"MPRF"
        assert raw[4] == dataio.TAG_CLUSTER_BANK
        # u32 K, u32 d_in, u32 d_proj little-endian
        assert int.from_bytes(raw[5:9], "little") == 3
        assert int.from_bytes(raw[9:13], "little") == 3
        assert int.from_bytes(raw[13:17], "little") == 3

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.mprf"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(dataio.DataFormatError, match="magic"):
            dataio.read_cluster_bank(path)

    def test_truncation_rejected(self, tmp_path):
        bank = ClusterBank(centers=np.eye(4), projection=np.eye(4))
        path = tmp_path / "bank.mprf"
        dataio.write_cluster_bank(path, bank)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(dataio.DataFormatError, match="truncated"):
            dataio.read_cluster_bank(path)


class TestVectorRecords:
    def test_roundtrip_and_layout(self, tmp_path):
        rng = np.random.default_rng(1)
        vectors = rng.normal(size=(3, 5)).astype(np.float32)
        ids = [10, 7, 42]
        path = tmp_path / "vectors.mprf"
        dataio.write_vector_records(path, dataio.TAG_GLOBAL_INDEX, ids, vectors)
        got_ids, got = dataio.read_vector_records(path, dataio.TAG_GLOBAL_INDEX)
        assert got_ids == ids
        np.testing.assert_allclose(got, vectors, atol=1e-7)
        raw = path.read_bytes()
        assert raw[:4] == b"MPRF" and raw[4] == dataio.TAG_GLOBAL_INDEX
        assert int.from_bytes(raw[5:13], "little") == 3  # u64 count
        assert int.from_bytes(raw[13:21], "little") == 10  # u64 first frame id
        assert int.from_bytes(raw[21:25], "little") == 5  # u32 dim

    def test_wrong_tag_rejected(self, tmp_path):
        path = tmp_path / "vectors.mprf"
        dataio.write_vector_records(path, dataio.TAG_REFINEMENT_STORE, [1], [np.ones(2)])
        with pytest.raises(dataio.DataFormatError, match="record type"):
            dataio.read_vector_records(path, dataio.TAG_GLOBAL_INDEX)


class TestScanAndPatches:
    def test_scan_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        scan = LidarScan(
            points=rng.normal(size=(9, 3)).astype(np.float32),
            descriptors=rng.normal(size=(9, 6)).astype(np.float32),
        )
        path = tmp_path / "scan.mprf"
        dataio.write_scan(path, scan)
        loaded = dataio.read_scan(path)
        np.testing.assert_allclose(loaded.points, scan.points, atol=1e-7)
        np.testing.assert_allclose(loaded.descriptors, scan.descriptors, atol=1e-7)

    def test_patch_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(3, 12, 7)).astype(np.float32)
        path = tmp_path / "patches.mprf"
        dataio.write_patches(path, feats)
        np.testing.assert_allclose(dataio.read_patches(path), feats, atol=1e-7)

    def test_scan_tag_differs_from_patches(self, tmp_path):
        rng = np.random.default_rng(4)
        path = tmp_path / "patches.mprf"
        dataio.write_patches(path, rng.normal(size=(1, 2, 3)))
        with pytest.raises(dataio.DataFormatError):
            dataio.read_scan(path)


class TestTrajectory:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        records = [
            (float(i), PoseSE3(rotation_about_z(rng.uniform(-180, 180)), rng.normal(size=3)))
            for i in range(5)
        ]
        path = tmp_path / "traj.txt"
        dataio.write_trajectory(path, records)
        loaded = dataio.read_trajectory(path)
        assert len(loaded) == 5
        for (t_a, p_a), (t_b, p_b) in zip(records, loaded):
            assert t_a == pytest.approx(t_b)
            np.testing.assert_allclose(p_a.matrix(), p_b.matrix(), atol=1e-7)

    def test_comments_and_blanks_skipped(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("# header\n\n0.0 1 2 3 0 0 0 1\n", encoding="utf-8")
        records = dataio.read_trajectory(path)
        assert len(records) == 1
        np.testing.assert_allclose(records[0][1].translation, [1.0, 2.0, 3.0])

    def test_field_count_enforced(self, tmp_path):
        path = tmp_path / "traj.txt"
        path.write_text("0.0 1 2 3 0 0 1\n", encoding="utf-8")
        with pytest.raises(dataio.DataFormatError, match="8 fields"):
            dataio.read_trajectory(path)


def write_minimal_manifest(tmp_path, frames=None, calibration=None):
    manifest = {
        "calibration": calibration
        or {
            "fx": 100.0,
            "fy": 100.0,
            "cx": 32.0,
            "cy": 32.0,
            "width": 64,
            "height": 64,
            "cam_from_lidar": {
                "translation": [0.0, 0.0, 0.0],
                "quaternion_xyzw": [0.0, 0.0, 0.0, 1.0],
            },
        },
        "frames": frames
        if frames is not None
        else [
            {
                "id": 0,
                "timestamp_s": 0.0,
                "patch_file": "f0_patches.mprf",
                "scan_file": "f0_scan.mprf",
                "pose": {"translation": [1, 2, 3], "quaternion_xyzw": [0, 0, 0, 1]},
            },
            {"id": 1, "timestamp_s": 0.5, "patch_file": "f1_patches.mprf", "scan_file": "f1_scan.mprf"},
        ],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest), encoding="utf-8")
    return path


class TestManifest:
    def test_parses_frames_and_calibration(self, tmp_path):
        manifest = dataio.load_manifest(write_minimal_manifest(tmp_path))
        assert manifest.calibration.fx == 100.0
        assert len(manifest.frames) == 2
        assert manifest.frames[0].pose is not None
        assert manifest.frames[1].pose is None
        assert manifest.frames[0].patch_file == tmp_path / "f0_patches.mprf"

    def test_duplicate_id_rejected(self, tmp_path):
        frames = [
            {"id": 3, "timestamp_s": 0.0, "patch_file": "a", "scan_file": "b"},
            {"id": 3, "timestamp_s": 1.0, "patch_file": "c", "scan_file": "d"},
        ]
        with pytest.raises(dataio.ManifestError, match="duplicate"):
            dataio.load_manifest(write_minimal_manifest(tmp_path, frames=frames))

    def test_missing_calibration_field(self, tmp_path):
        calibration = {"fx": 100.0, "fy": 100.0, "cx": 32.0, "cy": 32.0, "width": 64}
        with pytest.raises(dataio.ManifestError, match="calibration"):
            dataio.load_manifest(write_minimal_manifest(tmp_path, calibration=calibration))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(dataio.ManifestError, match="JSON"):
            dataio.load_manifest(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(dataio.ManifestError, match="not found"):
            dataio.load_manifest(tmp_path / "nope.json")

    def test_load_frame_reads_binaries(self, tmp_path):
        rng = np.random.default_rng(6)
        manifest_path = write_minimal_manifest(tmp_path)
        feats = rng.normal(size=(3, 4, 5)).astype(np.float32)
        scan = LidarScan(points=rng.normal(size=(6, 3)), descriptors=rng.normal(size=(6, 2)))
        dataio.write_patches(tmp_path / "f0_patches.mprf", feats)
        dataio.write_scan(tmp_path / "f0_scan.mprf", scan)
        manifest = dataio.load_manifest(manifest_path)
        record = dataio.load_frame(manifest.frames[0])
        assert record.frame_id == 0
        np.testing.assert_allclose(record.layer_feats, feats, atol=1e-6)
        np.testing.assert_allclose(record.last_layer, feats[-1], atol=1e-6)
        assert len(record.scan) == 6
        np.testing.assert_allclose(record.pose.translation, [1.0, 2.0, 3.0])
