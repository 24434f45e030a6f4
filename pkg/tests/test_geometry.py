import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mprf.geometry import (
    CameraIntrinsics,
    PoseSE3,
    cosine_similarity,
    l2_normalize,
    project_points,
    project_to_image,
    rotation_about_z,
    se3_relative,
    unproject_pixel,
    wrap_angle_deg,
    yaw_from_rotation,
)


def random_pose(rng: np.random.Generator) -> PoseSE3:
    # Uniform-ish random rotation via QR of a Gaussian matrix.
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return PoseSE3(q, rng.normal(scale=5.0, size=3))


class TestL2Normalize:
    def test_three_four_five(self):
        unit, zero = l2_normalize([3.0, 4.0])
        assert not zero
        np.testing.assert_allclose(unit, [0.6, 0.8], atol=1e-12)

    def test_already_unit(self):
        unit, zero = l2_normalize([1.0, 0.0, 0.0])
        assert not zero
        np.testing.assert_allclose(unit, [1.0, 0.0, 0.0], atol=1e-12)

    def test_zero_vector_flagged(self):
        unit, zero = l2_normalize([0.0, 0.0])
        assert zero
        np.testing.assert_array_equal(unit, [0.0, 0.0])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            l2_normalize([np.nan, 1.0])


class TestCosineSimilarity:
    def test_identical_unit_vectors(self):
        v = np.array([0.6, 0.8])
        assert cosine_similarity(v, v) == 1.0

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_opposite(self):
        assert cosine_similarity([1.0, 0.0], [-1.0, 0.0]) == -1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_symmetric_on_random_inputs(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = rng.normal(size=(2, 8))
            assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-15)


class TestPoseSE3:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            PoseSE3(np.eye(3) * 2.0, np.zeros(3))

    def test_rejects_reflection(self):
        refl = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            PoseSE3(refl, np.zeros(3))

    def test_relative_self_is_identity(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        rel = se3_relative(p, p)
        np.testing.assert_allclose(rel.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(rel.translation, np.zeros(3), atol=1e-12)

    def test_relative_from_identity(self):
        rng = np.random.default_rng(1)
        p = random_pose(rng)
        rel = se3_relative(PoseSE3.identity(), p)
        np.testing.assert_allclose(rel.rotation, p.rotation, atol=1e-12)
        np.testing.assert_allclose(rel.translation, p.translation, atol=1e-12)

    def test_compose_relative_roundtrip(self):
        # Oracle: direct matrix composition. compose(p, se3_relative(p, q)) == q.
        rng = np.random.default_rng(2)
        for _ in range(100):
            p, q = random_pose(rng), random_pose(rng)
            back = p.compose(se3_relative(p, q))
            np.testing.assert_allclose(back.matrix(), q.matrix(), atol=1e-9)

    def test_matrix_roundtrip(self):
        rng = np.random.default_rng(3)
        p = random_pose(rng)
        np.testing.assert_allclose(PoseSE3.from_matrix(p.matrix()).matrix(), p.matrix(), atol=1e-12)

    def test_quaternion_roundtrip(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = random_pose(rng)
            q = PoseSE3.from_quaternion(p.translation, p.quaternion_xyzw())
            np.testing.assert_allclose(q.matrix(), p.matrix(), atol=1e-12)

    def test_apply_batched_matches_single(self):
        rng = np.random.default_rng(5)
        p = random_pose(rng)
        pts = rng.normal(size=(10, 3))
        batched = p.apply(pts)
        for i in range(10):
            np.testing.assert_allclose(batched[i], p.apply(pts[i]), atol=1e-12)


class TestYaw:
    def test_identity_is_zero(self):
        assert yaw_from_rotation(np.eye(3)) == 0.0

    def test_ninety_about_z(self):
        assert yaw_from_rotation(rotation_about_z(90.0)) == pytest.approx(90.0, abs=1e-12)

    def test_wraps_200_to_minus_160(self):
        # Rz(200°) and Rz(-160°) are the same rotation; the wrapped yaw is -160°.
        r200 = rotation_about_z(200.0)
        np.testing.assert_allclose(rotation_about_z(-160.0) @ r200.T, np.eye(3), atol=1e-12)
        assert yaw_from_rotation(r200) == pytest.approx(-160.0, abs=1e-9)

    @given(st.floats(min_value=-720.0, max_value=720.0, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_wrap_sweep(self, theta):
        got = yaw_from_rotation(rotation_about_z(theta))
        assert got == pytest.approx(wrap_angle_deg(theta), abs=1e-9)
        assert -180.0 < got <= 180.0

    def test_wrap_boundary(self):
        assert wrap_angle_deg(180.0) == 180.0
        assert wrap_angle_deg(-180.0) == 180.0
        assert wrap_angle_deg(540.0) == 180.0


def make_intrinsics(**overrides) -> CameraIntrinsics:
    params = dict(fx=100.0, fy=100.0, cx=112.0, cy=112.0, width=224, height=224)
    params.update(overrides)
    return CameraIntrinsics(**params)


class TestProjection:
    def test_principal_axis(self):
        proj = project_to_image(np.array([0.0, 0.0, 5.0]), make_intrinsics())
        assert proj.valid
        assert (proj.u, proj.v, proj.depth) == (112.0, 112.0, 5.0)

    def test_behind_camera(self):
        proj = project_to_image(np.array([0.0, 0.0, -1.0]), make_intrinsics())
        assert not proj.valid

    def test_pinhole_formula(self):
        # u = fx*x/z + cx = 100*1/2 + 112 = 162
        proj = project_to_image(np.array([1.0, 0.0, 2.0]), make_intrinsics())
        assert proj.valid
        assert proj.u == pytest.approx(162.0, abs=1e-12)

    def test_out_of_bounds_flagged(self):
        proj = project_to_image(np.array([10.0, 0.0, 2.0]), make_intrinsics())
        assert not proj.valid

    def test_unprojection_roundtrip(self):
        rng = np.random.default_rng(6)
        intr = make_intrinsics()
        for _ in range(200):
            pt = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 10.0)])
            proj = project_to_image(pt, intr)
            if not proj.valid:
                continue
            back = unproject_pixel(proj.u, proj.v, proj.depth, intr)
            np.testing.assert_allclose(back, pt, atol=1e-9)

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(8)
        intr = make_intrinsics()
        pts = rng.uniform(-3, 3, size=(100, 3))
        uv, depth, valid = project_points(pts, intr)
        for i, pt in enumerate(pts):
            proj = project_to_image(pt, intr)
            assert valid[i] == proj.valid
            if proj.valid:
                assert uv[i, 0] == pytest.approx(proj.u, abs=1e-12)
                assert uv[i, 1] == pytest.approx(proj.v, abs=1e-12)
                assert depth[i] == pytest.approx(proj.depth, abs=1e-12)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            make_intrinsics(fx=-1.0)
        with pytest.raises(ValueError):
            make_intrinsics(cx=512.0)
