import numpy as np
import pytest

from mprf.aggregation import (
    ClusterBank,
    aggregate_global,
    fit_cluster_bank,
    refine_descriptor,
    score_matrix,
    sinkhorn_assign,
)


def sinkhorn_oracle(scores, iterations, temperature=1.0):
    """Explicit linear-domain alternating normalization, scalar by scalar."""
    m = np.exp(np.asarray(scores, dtype=np.float64) / temperature)
    n_rows, n_cols = m.shape
    col_target = n_rows / n_cols
    for _ in range(iterations):
        for j in range(n_cols):
            m[:, j] = m[:, j] / m[:, j].sum() * col_target
        for i in range(n_rows):
            m[i, :] = m[i, :] / m[i, :].sum()
    return m


def separated_clusters(rng, k=4, per_cluster=50, dim=6, spread=1e-3, gap=100.0):
    means = rng.normal(size=(k, dim)) * gap
    points = np.concatenate(
        [means[j] + rng.normal(scale=spread, size=(per_cluster, dim)) for j in range(k)]
    )
    labels = np.repeat(np.arange(k), per_cluster)
    return points, labels, np.stack([points[labels == j].mean(axis=0) for j in range(k)])


class TestFitClusterBank:
    def test_recovers_separated_cluster_means(self):
        rng = np.random.default_rng(11)
        points, _, true_means = separated_clusters(rng)
        bank = fit_cluster_bank(points, n_clusters=4, projected_dim=3, seed=5)
        # Match each fitted center to its nearest true mean.
        for center in bank.centers:
            best = np.min(np.linalg.norm(true_means - center, axis=1))
            assert best < 1e-6

    def test_single_cluster_is_sample_mean(self):
        rng = np.random.default_rng(12)
        feats = rng.normal(size=(40, 5))
        bank = fit_cluster_bank(feats, n_clusters=1, projected_dim=2, seed=0)
        np.testing.assert_allclose(bank.centers[0], feats.mean(axis=0), atol=1e-12)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(13)
        feats = rng.normal(size=(200, 8))
        a = fit_cluster_bank(feats, n_clusters=6, projected_dim=4, seed=42)
        b = fit_cluster_bank(feats, n_clusters=6, projected_dim=4, seed=42)
        np.testing.assert_array_equal(a.centers, b.centers)
        np.testing.assert_array_equal(a.projection, b.projection)
        assert a.dustbin_score == b.dustbin_score == 0.0

    def test_rejects_too_few_samples(self):
        with pytest.raises(ValueError, match="at least"):
            fit_cluster_bank(np.ones((3, 4)) * np.arange(3)[:, None], n_clusters=5, projected_dim=2)

    def test_rejects_degenerate_sample(self):
        with pytest.raises(ValueError, match="degenerate"):
            fit_cluster_bank(np.ones((50, 4)), n_clusters=3, projected_dim=2)

    def test_projection_orthonormal_columns(self):
        rng = np.random.default_rng(14)
        feats = rng.normal(size=(100, 10))
        bank = fit_cluster_bank(feats, n_clusters=4, projected_dim=5, seed=1)
        gram = bank.projection.T @ bank.projection
        np.testing.assert_allclose(gram, np.eye(5), atol=1e-10)


class TestScoreMatrix:
    def test_matching_center_wins(self):
        centers = np.eye(3)  # three orthonormal unit centers
        bank = ClusterBank(centers=centers, projection=np.eye(3))
        feats = np.array([[0.0, 1.0, 0.0]])
        scores = score_matrix(feats, bank)
        assert scores.shape == (1, 4)
        assert np.argmax(scores[0, :3]) == 1

    def test_zero_features_zero_scores(self):
        bank = ClusterBank(centers=np.eye(3), projection=np.eye(3), dustbin_score=0.5)
        scores = score_matrix(np.zeros((2, 3)), bank)
        np.testing.assert_array_equal(scores[:, :3], 0.0)
        np.testing.assert_array_equal(scores[:, 3], 0.5)

    def test_dimension_mismatch(self):
        bank = ClusterBank(centers=np.eye(3), projection=np.eye(3))
        with pytest.raises(ValueError):
            score_matrix(np.zeros((2, 4)), bank)

    def test_huge_dustbin_floods_under_slack_marginal(self):
        # A slack dustbin only dominates before the real-column marginals
        # re-inflate to meet their targets, so the flood shows at one
        # normalization round; more rounds pull mass back toward P/(K+1).
        rng = np.random.default_rng(15)
        bank = ClusterBank(centers=rng.normal(size=(4, 6)), projection=np.eye(6), dustbin_score=50.0)
        feats = rng.normal(size=(20, 6))
        scores = score_matrix(feats, bank)
        flooded = sinkhorn_assign(scores, iterations=1, dustbin_marginal="slack")
        assert flooded[:, -1].sum() > 0.99 * 20
        relaxed = sinkhorn_assign(scores, iterations=50, dustbin_marginal="slack")
        assert relaxed[:, -1].sum() == pytest.approx(20 / 5, rel=1e-2)

    def test_dustbin_score_cancels_under_uniform_marginal(self):
        # With uniform column marginals a constant dustbin column cancels out
        # of the result: the dustbin mass is the same for any score value.
        rng = np.random.default_rng(16)
        feats = rng.normal(size=(20, 6))
        centers = rng.normal(size=(4, 6))
        masses = []
        for dustbin in (0.0, 50.0, 1e6):
            bank = ClusterBank(centers=centers, projection=np.eye(6), dustbin_score=dustbin)
            assignment = sinkhorn_assign(score_matrix(feats, bank))
            masses.append(assignment[:, -1].sum())
        assert masses[1] == pytest.approx(masses[0], rel=1e-9)
        assert masses[2] == pytest.approx(masses[0], rel=1e-6)


class TestSinkhornAssign:
    def test_constant_scores_uniform(self):
        for shape in [(1, 2), (3, 5), (8, 8)]:
            assignment = sinkhorn_assign(np.full(shape, 2.7))
            np.testing.assert_allclose(assignment, 1.0 / shape[1], atol=1e-12)

    def test_single_patch_two_columns(self):
        np.testing.assert_allclose(sinkhorn_assign(np.array([[3.0, 3.0]])), [[0.5, 0.5]], atol=1e-12)

    def test_matches_scalar_oracle_2x2(self):
        scores = np.array([[2.0, 0.0], [0.0, 2.0]])
        got = sinkhorn_assign(scores, iterations=3)
        np.testing.assert_allclose(got, sinkhorn_oracle(scores, 3), atol=1e-9)

    def test_matches_scalar_oracle_random(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            rows = int(rng.integers(1, 12))
            cols = int(rng.integers(2, 9))
            scores = rng.normal(scale=3.0, size=(rows, cols))
            iters = int(rng.integers(1, 6))
            got = sinkhorn_assign(scores, iterations=iters)
            np.testing.assert_allclose(got, sinkhorn_oracle(scores, iters), atol=1e-9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(18)
        for _ in range(100):
            rows = int(rng.integers(1, 65))
            cols = int(rng.integers(2, 18))
            assignment = sinkhorn_assign(rng.normal(scale=5.0, size=(rows, cols)))
            np.testing.assert_allclose(assignment.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(assignment > 0.0)

    def test_temperature_scaling_invariance(self):
        rng = np.random.default_rng(19)
        scores = rng.normal(size=(10, 5))
        base = sinkhorn_assign(scores, temperature=1.0)
        scaled = sinkhorn_assign(scores * 3.5, temperature=3.5)
        np.testing.assert_allclose(scaled, base, atol=1e-9)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(20)
        scores = rng.normal(size=(9, 4))
        perm = rng.permutation(9)
        np.testing.assert_allclose(
            sinkhorn_assign(scores[perm]), sinkhorn_assign(scores)[perm], atol=1e-12
        )

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            sinkhorn_assign(np.array([[np.inf, 0.0]]))
        with pytest.raises(ValueError):
            sinkhorn_assign(np.ones((2, 2)), temperature=0.0)
        with pytest.raises(ValueError):
            sinkhorn_assign(np.ones((2, 2)), iterations=0)


class TestAggregateGlobal:
    def _bank(self, rng, k=4, d_in=6, d_proj=3):
        return ClusterBank(centers=rng.normal(size=(k, d_in)), projection=rng.normal(size=(d_in, d_proj)))

    def test_all_dustbin_flags_zero(self):
        rng = np.random.default_rng(21)
        bank = self._bank(rng)
        feats = rng.normal(size=(5, 6))
        assignment = np.zeros((5, 5))
        assignment[:, -1] = 1.0
        desc, zero = aggregate_global(feats, assignment, bank)
        assert zero
        np.testing.assert_array_equal(desc, 0.0)

    def test_single_patch_single_cluster(self):
        rng = np.random.default_rng(22)
        bank = ClusterBank(centers=rng.normal(size=(1, 6)), projection=rng.normal(size=(6, 3)))
        feat = rng.normal(size=(1, 6))
        desc, zero = aggregate_global(feat, np.array([[1.0, 0.0]]), bank)
        assert not zero
        expected = feat[0] @ bank.projection
        np.testing.assert_allclose(desc, expected / np.linalg.norm(expected), atol=1e-12)

    def test_identical_frames_identical_descriptors(self):
        rng = np.random.default_rng(23)
        bank = self._bank(rng)
        feats = rng.normal(size=(12, 6))
        assignment = sinkhorn_assign(score_matrix(feats, bank))
        d1, _ = aggregate_global(feats, assignment, bank)
        d2, _ = aggregate_global(feats.copy(), assignment.copy(), bank)
        np.testing.assert_array_equal(d1, d2)
        assert np.dot(d1, d2) == pytest.approx(1.0)

    def test_patch_order_invariance(self):
        rng = np.random.default_rng(24)
        bank = self._bank(rng)
        feats = rng.normal(size=(15, 6))
        assignment = sinkhorn_assign(score_matrix(feats, bank))
        desc, _ = aggregate_global(feats, assignment, bank)
        perm = rng.permutation(15)
        desc_p, _ = aggregate_global(feats[perm], assignment[perm], bank)
        np.testing.assert_allclose(desc_p, desc, atol=1e-9)

    def test_unit_norm(self):
        rng = np.random.default_rng(25)
        bank = self._bank(rng)
        feats = rng.normal(size=(20, 6))
        desc, zero = aggregate_global(feats, sinkhorn_assign(score_matrix(feats, bank)), bank)
        assert not zero
        assert np.linalg.norm(desc) == pytest.approx(1.0, abs=1e-6)
        assert desc.shape == (bank.global_dim,)


class TestRefineDescriptor:
    def test_single_patch(self):
        rng = np.random.default_rng(26)
        layers = rng.normal(size=(3, 1, 4))
        expected = np.concatenate([layers[0, 0], layers[1, 0], layers[2, 0]])
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(refine_descriptor(layers), expected, atol=1e-12)

    def test_identical_patches_match_single(self):
        rng = np.random.default_rng(27)
        one = rng.normal(size=(3, 1, 4))
        many = np.repeat(one, 7, axis=1)
        np.testing.assert_allclose(refine_descriptor(many), refine_descriptor(one), atol=1e-12)

    def test_matches_bruteforce_loop(self):
        rng = np.random.default_rng(28)
        layers = rng.normal(size=(3, 4, 8))
        acc = np.zeros(24)
        for p in range(4):
            acc += np.concatenate([layers[0, p], layers[1, p], layers[2, p]])
        expected = (acc / 4) / np.linalg.norm(acc / 4)
        np.testing.assert_allclose(refine_descriptor(layers), expected, atol=1e-9)

    def test_unit_norm(self):
        rng = np.random.default_rng(29)
        desc = refine_descriptor(rng.normal(size=(3, 10, 8)))
        assert np.linalg.norm(desc) == pytest.approx(1.0, abs=1e-6)
        assert desc.shape == (24,)

    def test_zero_patches_rejected(self):
        with pytest.raises(ValueError):
            refine_descriptor(np.zeros((3, 0, 4)))
