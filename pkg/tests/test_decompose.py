"""Tests for the four-stage recovery pipeline."""

import numpy as np
import pytest

from conftest import (
    correlated_orthonormal_pair,
    noise_from_symmetric_matrix,
    orthonormal_rows,
    synthetic_instance,
)
from spectensor.decompose import (
    ComponentSet,
    RecoveryParams,
    WorkingState,
    clip_rect,
    full_decompose,
    near_orthonormal_check,
    orthonormalize,
    postprocess,
    preprocess,
    quartic_form,
    random_contraction,
    subtract_components,
)
from spectensor.errors import DegeneracyError
from spectensor.tensor import (
    PLAN_SQUARE,
    PLAN_TALL_123_4,
    PLAN_TALL_124_3,
    Tensor4,
    outer4,
    reshape,
    sum_outer4,
)


class TestPreprocess:
    def test_rank_one(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal(4)
        a /= np.linalg.norm(a)
        t = outer4(a)
        out = preprocess(t, 0.1)
        w = np.kron(a, a)
        expected = 0.9 * np.outer(w, w)
        assert np.allclose(out, expected, atol=1e-10)
        s_sq = np.outer(w, w)
        assert np.linalg.norm(out - s_sq) == pytest.approx(0.1, abs=1e-9)
        assert np.linalg.norm(out - s_sq) <= 2 * 0.1 * np.sqrt(2)

    def test_zero_tensor(self):
        out = preprocess(Tensor4.zeros(3), 0.5)
        assert np.allclose(out, 0.0)

    def test_frobenius_bound_with_noise(self):
        # ||preprocess(T, eps) - S||_F <= 2 eps sqrt(2n), a proven bound.
        rng = np.random.default_rng(2)
        d, n, eps = 12, 6, 0.05
        t, _, s_sq = synthetic_instance(rng, d, n, eps)
        out = preprocess(t, eps)
        assert np.linalg.norm(out - s_sq) <= 2 * eps * np.sqrt(2 * n)

    def test_eps_required(self):
        with pytest.raises(ValueError):
            preprocess(Tensor4.zeros(2), 0.0)


class TestClipRect:
    def test_unit_rank_one_unchanged(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal(4)
        a /= np.linalg.norm(a)
        t = outer4(a)
        out = clip_rect(t)
        assert np.allclose(out.data, t.data, atol=1e-10)

    def test_scaled_rank_one_clipped(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal(4)
        a /= np.linalg.norm(a)
        t = Tensor4(3.0 * outer4(a).data, copy=False)
        out = clip_rect(t)
        assert np.allclose(out.data, outer4(a).data, atol=1e-9)

    def test_postconditions_random(self):
        rng = np.random.default_rng(5)
        t = Tensor4(rng.standard_normal((8, 8, 8, 8)) * 0.3)
        out = clip_rect(t)
        for plan in (PLAN_TALL_123_4, PLAN_TALL_124_3):
            top = np.linalg.svd(reshape(out, plan), compute_uv=False)[0]
            assert top <= 1.0 + 1e-8

    def test_error_monotone_on_synthetic(self):
        rng = np.random.default_rng(6)
        d, n, eps = 8, 4, 0.3
        t, a, _ = synthetic_instance(rng, d, n, eps)
        s = sum_outer4(a)
        out = clip_rect(t)
        before = np.linalg.norm(t.data - s.data)
        after = np.linalg.norm(out.data - s.data)
        assert after <= before + 1e-8


class TestRandomContraction:
    def test_rank_one_tensor(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal(5)
        a /= np.linalg.norm(a)
        cand = random_contraction(outer4(a), rng)
        assert np.dot(cand.u_left, a) ** 2 == pytest.approx(1.0, abs=1e-9)
        assert np.dot(cand.u_right, a) ** 2 == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_gaussian_hits_other_component(self):
        # With g orthogonal to a_1 (x) a_1 the first coefficient vanishes.
        rng = np.random.default_rng(8)
        a = orthonormal_rows(rng, 6, 2)
        t = sum_outer4(a)
        t_sq = reshape(t, PLAN_SQUARE)
        w1 = np.kron(a[0], a[0])
        g = rng.standard_normal(36)
        g -= np.dot(g, w1) * w1
        m_g = (g @ t_sq).reshape(6, 6)
        coef2 = np.dot(g, np.kron(a[1], a[1]))
        assert abs(coef2) > 0.05
        u, s, vt = np.linalg.svd(m_g)
        assert np.dot(u[:, 0], a[1]) ** 2 == pytest.approx(1.0, abs=1e-9)

    def test_every_component_surfaces(self):
        # Across seeded trials each a_i tops at least one contraction.
        rng = np.random.default_rng(9)
        a = orthonormal_rows(rng, 10, 5)
        t = sum_outer4(a)
        hits = np.zeros(5, dtype=bool)
        for _ in range(200):
            cand = random_contraction(t, rng)
            corr = (a @ cand.u_left) ** 2
            hits |= corr >= 0.99
            if hits.all():
                break
        assert hits.all()


class TestPostprocess:
    def test_fixed_point(self):
        rng = np.random.default_rng(10)
        a = orthonormal_rows(rng, 8, 4)
        t = sum_outer4(a)
        v = postprocess(t, a[0], eps=0.01)
        assert v is not None
        assert np.dot(v, a[0]) ** 2 == pytest.approx(1.0, abs=1e-9)

    def test_imperfect_candidate_noise_free(self):
        rng = np.random.default_rng(11)
        a = orthonormal_rows(rng, 8, 4)
        t = sum_outer4(a)
        u = np.sqrt(0.99) * a[0] + np.sqrt(0.01) * a[1]
        v = postprocess(t, u, eps=0.01)
        assert v is not None
        assert np.dot(v, a[0]) ** 2 >= 1 - 1e-9

    def test_noisy_guarantee(self):
        # <v, a_1>^2 >= 1 - 3*eps under spectral noise of norm eps.
        rng = np.random.default_rng(12)
        d, n, eps = 10, 5, 0.05
        t, a, _ = synthetic_instance(rng, d, n, eps)
        u = np.sqrt(0.99) * a[0] + np.sqrt(0.01) * a[1]
        v = postprocess(t, u, eps=eps)
        assert v is not None
        assert np.dot(v, a[0]) ** 2 >= 1 - 3 * eps

    def test_junk_candidate_rejected(self):
        rng = np.random.default_rng(13)
        a = orthonormal_rows(rng, 12, 2)
        t = sum_outer4(a)
        junk = orthonormal_rows(rng, 12, 12)[-1]
        overlap = max(np.dot(junk, a[0]) ** 2, np.dot(junk, a[1]) ** 2)
        assume_bad = overlap < 0.5
        if assume_bad:
            v = postprocess(t, junk, eps=0.01)
            if v is not None:
                # anything returned must genuinely score well
                t_sq = reshape(t, PLAN_SQUARE)
                assert quartic_form(t_sq, v) >= (1 - 0.03) ** 2 - 0.01


class TestOrthonormalize:
    def test_orthonormal_unchanged(self):
        rng = np.random.default_rng(14)
        a = orthonormal_rows(rng, 7, 3)
        out = orthonormalize(ComponentSet(a))
        assert np.allclose(out.vectors, a, atol=1e-10)

    def test_symmetric_opening(self):
        # Two unit vectors at 80 degrees open symmetrically to 90.
        theta = np.deg2rad(80.0)
        b1 = np.array([1.0, 0.0, 0.0])
        b2 = np.array([np.cos(theta), np.sin(theta), 0.0])
        out = orthonormalize(ComponentSet(np.array([b1, b2])))
        g = out.vectors @ out.vectors.T
        assert np.allclose(g, np.eye(2), atol=1e-10)
        assert np.dot(out.vectors[0], b1) == pytest.approx(
            np.dot(out.vectors[1], b2), abs=1e-10
        )
        bisector = (b1 + b2) / np.linalg.norm(b1 + b2)
        assert np.dot(out.vectors[0], bisector) == pytest.approx(
            np.dot(out.vectors[1], bisector), abs=1e-10
        )

    def test_closer_than_ground_truth(self):
        # The polar factor is the nearest orthonormal set, so in particular
        # closer to B than the true A is.
        rng = np.random.default_rng(15)
        a, b = correlated_orthonormal_pair(rng, 12, 5, 0.01)
        noisy = b + 0.02 * rng.standard_normal(b.shape)
        noisy /= np.linalg.norm(noisy, axis=1, keepdims=True)
        out = orthonormalize(ComponentSet(noisy))
        assert np.linalg.norm(out.vectors - noisy) <= np.linalg.norm(a - noisy)

    def test_rank_deficient_rejected(self):
        v = np.array([1.0, 0.0, 0.0])
        with pytest.raises(DegeneracyError):
            orthonormalize(ComponentSet(np.array([v, v])))


class TestSubtract:
    def _state(self, t):
        return WorkingState(t, t.copy(), ComponentSet.empty(t.dim))

    def test_exact_subtraction_zeroes(self):
        rng = np.random.default_rng(16)
        a = orthonormal_rows(rng, 6, 3)
        t = sum_outer4(a)
        state = subtract_components(self._state(t), ComponentSet(a))
        assert np.allclose(state.t_work.data, 0.0, atol=1e-12)
        assert len(state.known) == 3

    def test_empty_found_unchanged(self):
        rng = np.random.default_rng(17)
        t = Tensor4(rng.standard_normal((4,) * 4))
        state = subtract_components(self._state(t), ComponentSet.empty(4))
        assert np.array_equal(state.t_work.data, t.data)
        assert state.round_index == 1

    def test_spectral_bound(self):
        # || sum a^{x4} - b^{x4} ||_2 <= 4 sqrt(eps) for (1-eps)-correlated
        # orthonormal sets.
        rng = np.random.default_rng(18)
        eps = 0.04
        a, b = correlated_orthonormal_pair(rng, 16, 4, eps)
        diff = sum_outer4(a).reshape(PLAN_SQUARE) - sum_outer4(b).reshape(PLAN_SQUARE)
        norm = np.max(np.abs(np.linalg.eigvalsh(diff)))
        assert norm <= 4 * np.sqrt(eps)


class TestNearOrthonormalCheck:
    def test_orthonormal_is_zero(self):
        rng = np.random.default_rng(19)
        a = orthonormal_rows(rng, 8, 4)
        assert near_orthonormal_check(ComponentSet(a)) <= 1e-9

    def test_single_vector(self):
        v = np.zeros(5)
        v[2] = 1.0
        assert near_orthonormal_check(ComponentSet(v[None, :])) <= 1e-12

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(20)
        k, d = 5, 12
        a = orthonormal_rows(rng, d, k)
        p = rng.standard_normal((k, k))
        p = (p + p.T) / 2
        np.fill_diagonal(p, 0.0)
        gram = np.eye(k) + 0.1 * p / np.linalg.norm(p, 2)
        # build vectors with exactly this Gram matrix
        lam, u = np.linalg.eigh(gram)
        sqrt_gram = (u * np.sqrt(lam)) @ u.T
        vecs = sqrt_gram @ a
        eta = near_orthonormal_check(ComponentSet(vecs))
        oracle = np.max(np.abs(np.linalg.eigvalsh(gram - np.eye(k))))
        assert eta == pytest.approx(oracle, abs=1e-9)


class TestFullDecompose:
    def test_noise_free_small(self):
        rng = np.random.default_rng(21)
        a = orthonormal_rows(rng, 12, 6)
        t = sum_outer4(a)
        report = full_decompose(t, RecoveryParams(eps=0.01, rng_seed=5))
        assert len(report.components) == 6
        corr = (report.components.vectors @ a.T) ** 2
        assert corr.max(axis=0).min() >= 0.999
        gram = report.components.vectors @ report.components.vectors.T
        assert np.allclose(gram, np.eye(6), atol=1e-8)

    def test_zero_tensor_empty(self):
        report = full_decompose(Tensor4.zeros(6), RecoveryParams(eps=0.1))
        assert len(report.components) == 0

    def test_deterministic(self):
        rng = np.random.default_rng(22)
        a = orthonormal_rows(rng, 8, 3)
        t = sum_outer4(a)
        params = RecoveryParams(eps=0.02, rng_seed=7)
        r1 = full_decompose(t, params)
        r2 = full_decompose(t, params)
        assert np.array_equal(r1.components.vectors, r2.components.vectors)
        assert r1.to_json() == r2.to_json()

    def test_params_validation(self):
        with pytest.raises(ValueError):
            RecoveryParams(eps=1.5)
        with pytest.raises(ValueError):
            RecoveryParams(eps=0.1, dedup_corr=1.0)
        with pytest.raises(ValueError):
            RecoveryParams(eps=0.1, trials_per_round=0)


class TestAppendixFacts:
    def test_gaussian_contraction_tail(self):
        # Empirical exceedance of the matrix Gaussian series bound.
        rng = np.random.default_rng(23)
        k, l, m = 9, 6, 7
        a = rng.standard_normal((k, l, m))
        norms = max(
            np.linalg.norm(a.reshape(k * l, m), 2),
            np.linalg.norm(a.transpose(0, 2, 1).reshape(k * m, l), 2),
        )
        a /= norms
        t_val = 2.5
        exceed = 0
        draws = 400
        for _ in range(draws):
            g = rng.standard_normal(k)
            s = np.linalg.norm(np.tensordot(g, a, axes=1), 2)
            if s >= t_val:
                exceed += 1
        bound = (l + m) * np.exp(-t_val**2 / 2)
        assert exceed / draws <= bound

    def test_top_eigenvector_fact(self):
        # If ||M - vv^T|| <= ||M|| - eps ||v||^2 then a top singular vector
        # of M correlates with v at least eps.
        rng = np.random.default_rng(24)
        d = 10
        v = np.zeros(d)
        v[0] = 1.0
        n = rng.standard_normal((d, d))
        n *= 0.5 / np.linalg.norm(n, 2)
        m = 3.0 * np.outer(v, v) + n
        norm_m = np.linalg.norm(m, 2)
        gap = norm_m - np.linalg.norm(m - np.outer(v, v), 2)
        assert gap > 0
        u, _, wt = np.linalg.svd(m)
        assert max(np.dot(u[:, 0], v) ** 2, np.dot(wt[0], v) ** 2) >= gap - 1e-9
