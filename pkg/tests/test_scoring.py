import numpy as np
import pytest

from dualref.errors import DataError
from dualref.features import PatchFeatureMap
from dualref.scoring import (
    ScoreMap,
    STAGE_NORMAL,
    cosine_distance,
    nearest_normal,
    nearest_normal_values,
    normal_guided_score,
    residual,
)

from oracles import nn_double_loop, unit_rows


def unit_map(rng, h=4, w=4, c=8):
    return PatchFeatureMap(h, w, c, unit_rows(rng, h * w, c))


class TestCosineDistance:
    def test_identical(self):
        v = np.array([0.6, 0.8])
        assert cosine_distance(v, v) == 0.0

    def test_orthogonal(self):
        assert cosine_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_antipodal_clamped(self):
        v = np.array([1.0, 0.0])
        assert cosine_distance(v, -v) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            cosine_distance(np.ones(3), np.ones(4))


class TestNearestNormal:
    def test_self_reference_gives_zero(self):
        rng = np.random.default_rng(0)
        fmap = unit_map(rng)
        nn = nearest_normal(fmap, [fmap])
        np.testing.assert_array_equal(nn.indices, np.arange(16))
        np.testing.assert_allclose(nn.distances, 0.0, atol=1e-6)

    def test_argmin_picks_closer(self):
        q = np.array([[1.0, 0.0, 0.0]])
        bank_near = np.array([np.cos(0.3), np.sin(0.3), 0.0])
        bank_far = np.array([np.cos(0.7), np.sin(0.7), 0.0])
        normals = [PatchFeatureMap(1, 2, 3, np.stack([bank_far, bank_near]))]
        nn = nearest_normal(PatchFeatureMap(1, 1, 3, q), normals)
        assert nn.indices[0] == 1
        assert nn.distances[0] == pytest.approx(1 - np.cos(0.3))

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            queries = unit_rows(rng, 16, 6)
            bank = unit_rows(rng, 32, 6)
            got = nearest_normal_values(queries, bank)
            want_idx, want_dist = nn_double_loop(queries, bank)
            np.testing.assert_array_equal(got.indices, want_idx)
            np.testing.assert_allclose(got.distances, want_dist, atol=1e-12)

    def test_empty_normals_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(DataError):
            nearest_normal(unit_map(rng), [])


class TestNormalGuidedScore:
    def test_query_in_normal_set_scores_zero(self):
        rng = np.random.default_rng(3)
        fmap = unit_map(rng)
        other = unit_map(rng)
        s = normal_guided_score(fmap, [other, fmap])
        np.testing.assert_allclose(s.values, 0.0, atol=1e-6)

    def test_orthogonal_patch_scores_one(self):
        rng = np.random.default_rng(4)
        base = unit_rows(rng, 4, 8)
        queries = base.copy()
        # replace patch 2 with a vector orthogonal to every bank row
        q, _ = np.linalg.qr(base.T)  # (8, 4) orthonormal basis of bank rows
        ortho = np.eye(8)[:, 7] - q @ (q.T @ np.eye(8)[:, 7])
        queries[2] = ortho / np.linalg.norm(ortho)
        s = normal_guided_score(
            PatchFeatureMap(2, 2, 8, queries), [PatchFeatureMap(2, 2, 8, base)]
        )
        assert s.values[2] == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_allclose(np.delete(s.values, 2), 0.0, atol=1e-6)

    def test_invariant_under_reference_permutation(self):
        rng = np.random.default_rng(5)
        q = unit_map(rng)
        a, b, c = unit_map(rng), unit_map(rng), unit_map(rng)
        s1 = normal_guided_score(q, [a, b, c])
        s2 = normal_guided_score(q, [c, a, b])
        np.testing.assert_allclose(s1.values, s2.values, atol=1e-12)

    def test_duplicate_reference_changes_nothing(self):
        rng = np.random.default_rng(6)
        q = unit_map(rng)
        a, b = unit_map(rng), unit_map(rng)
        s1 = normal_guided_score(q, [a, b])
        s2 = normal_guided_score(q, [a, b, a])
        np.testing.assert_array_equal(s1.values, s2.values)


class TestResidual:
    def test_source_equals_normals(self):
        rng = np.random.default_rng(7)
        fmap = unit_map(rng)
        res = residual(fmap, [fmap])
        np.testing.assert_allclose(res.values, 0.0, atol=1e-6)

    def test_forced_single_neighbor(self):
        n = np.array([[1.0, 0.0]])
        a = np.array([[0.6, 0.8]])
        res = residual(PatchFeatureMap(1, 1, 2, a), [PatchFeatureMap(1, 1, 2, n)])
        np.testing.assert_allclose(res.values, [[-0.4, 0.8]])

    def test_matches_subtract_after_nn_oracle(self):
        rng = np.random.default_rng(8)
        source = unit_rows(rng, 16, 5)
        bank = unit_rows(rng, 24, 5)
        res = residual(source, [PatchFeatureMap(4, 6, 5, bank)])
        idx, _ = nn_double_loop(source, bank)
        np.testing.assert_allclose(res.values, source - bank[idx], atol=1e-12)

    def test_norm_bound_for_unit_inputs(self):
        rng = np.random.default_rng(9)
        res = residual(unit_rows(rng, 32, 7), [unit_map(rng, 4, 8, 7)])
        assert res.norms().max() <= 2.0 + 1e-9


class TestScoreMap:
    def test_range_enforced(self):
        with pytest.raises(DataError, match="outside"):
            ScoreMap(1, 2, np.array([0.5, 1.5]), STAGE_NORMAL)

    def test_grid_view(self):
        s = ScoreMap(2, 3, np.arange(6) / 10.0, STAGE_NORMAL)
        assert s.as_grid().shape == (2, 3)
