import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from augbin.errors import DegenerateRegion, NotPositiveSemiDefinite
from augbin.mvnquad import (
    MvnSpec,
    Rectangle,
    chol_pivot,
    mvn_rect_prob,
    rect_prob_batch,
    truncated_mvn_sample,
)


def random_spd(d, rng):
    a = rng.standard_normal((d, d))
    return a @ a.T + d * np.eye(d)


class TestCholPivot:
    def test_identity(self):
        L, order = chol_pivot(np.eye(3))
        np.testing.assert_allclose(L, np.eye(3))

    def test_hand_2x2(self):
        L, order = chol_pivot(np.array([[4.0, 2.0], [2.0, 2.0]]))
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(order, [0, 1])

    def test_reconstruction_random_spd(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            cov = random_spd(5, rng)
            L, order = chol_pivot(cov)
            rec = L @ L.T
            ref = cov[np.ix_(order, order)]
            err = np.linalg.norm(rec - ref) / np.linalg.norm(ref)
            assert err <= 1e-10

    def test_semidefinite_ok(self):
        v = np.array([1.0, 2.0, 3.0])
        cov = np.outer(v, v)  # rank one
        L, order = chol_pivot(cov)
        np.testing.assert_allclose(L @ L.T, cov[np.ix_(order, order)], atol=1e-12)

    def test_indefinite_raises(self):
        with pytest.raises(NotPositiveSemiDefinite):
            chol_pivot(np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestRectProb:
    def test_half_line(self):
        spec = MvnSpec(np.zeros(1), np.eye(1))
        rect = Rectangle([-np.inf], [0.0])
        res = mvn_rect_prob(spec, rect)
        assert abs(res.probability - 0.5) <= 1e-9

    def test_independent_quadrant(self):
        spec = MvnSpec(np.zeros(2), np.eye(2))
        rect = Rectangle([-np.inf, -np.inf], [0.0, 0.0])
        res = mvn_rect_prob(spec, rect, abs_tol=1e-6)
        assert abs(res.probability - 0.25) <= 2e-6

    @pytest.mark.parametrize("rho", [-0.9, -0.5, 0.0, 0.5, 0.9])
    def test_orthant_closed_form(self, rho):
        # P(X<0, Y<0) = 1/4 + arcsin(rho) / (2 pi)
        spec = MvnSpec(np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))
        rect = Rectangle([-np.inf, -np.inf], [0.0, 0.0])
        res = mvn_rect_prob(spec, rect, abs_tol=1e-6)
        expected = 0.25 + np.arcsin(rho) / (2 * np.pi)
        assert abs(res.probability - expected) <= 1e-5

    def test_full_space_is_one(self):
        rng = np.random.default_rng(3)
        for d in (1, 2, 4):
            spec = MvnSpec(rng.standard_normal(d), random_spd(d, rng))
            res = mvn_rect_prob(spec, Rectangle.full_space(d))
            assert abs(res.probability - 1.0) <= 1e-6

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(11)
        spec = MvnSpec(rng.standard_normal(3), random_spd(3, rng))
        rect = Rectangle([-1.0, -np.inf, 0.0], [1.0, 0.5, 2.0])
        r1 = mvn_rect_prob(spec, rect, seed=42)
        r2 = mvn_rect_prob(spec, rect, seed=42)
        assert r1.probability == r2.probability

    def test_monotone_in_rectangle(self):
        rng = np.random.default_rng(5)
        spec = MvnSpec(rng.standard_normal(3), random_spd(3, rng))
        small = Rectangle([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
        big = Rectangle([-2.0, -1.5, -1.0], [1.5, 2.0, 1.2])
        rs = mvn_rect_prob(spec, small)
        rb = mvn_rect_prob(spec, big)
        assert rb.probability >= rs.probability - (rs.error_estimate + rb.error_estimate)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        cov = random_spd(4, rng)
        mean = rng.standard_normal(4)
        lo = mean - rng.uniform(0.5, 2.0, 4)
        hi = mean + rng.uniform(0.5, 2.0, 4)
        perm = np.array([2, 0, 3, 1])
        r1 = mvn_rect_prob(MvnSpec(mean, cov), Rectangle(lo, hi))
        r2 = mvn_rect_prob(
            MvnSpec(mean[perm], cov[np.ix_(perm, perm)]), Rectangle(lo[perm], hi[perm])
        )
        tol = 2 * (r1.error_estimate + r2.error_estimate) + 1e-12
        assert abs(r1.probability - r2.probability) <= tol

    def test_against_plain_monte_carlo(self):
        # 20 seeded random (spec, rect) pairs, d <= 6, vs 1e6-draw plain MC
        rng = np.random.default_rng(2024)
        n_mc = 10**6
        for case in range(20):
            d = int(rng.integers(1, 7))
            cov = random_spd(d, rng)
            mean = rng.standard_normal(d)
            sd = np.sqrt(np.diag(cov))
            lo = mean - rng.uniform(0.2, 2.5, d) * sd
            hi = mean + rng.uniform(0.2, 2.5, d) * sd
            lo[rng.random(d) < 0.3] = -np.inf
            hi[rng.random(d) < 0.3] = np.inf
            lo, hi = np.minimum(lo, hi - 1e-9), np.maximum(hi, lo + 1e-9)
            spec = MvnSpec(mean, cov)
            res = mvn_rect_prob(spec, Rectangle(lo, hi))
            x = rng.multivariate_normal(mean, cov, size=n_mc, method="cholesky")
            inside = np.all((x >= lo) & (x <= hi), axis=1)
            p_mc = inside.mean()
            se_mc = np.sqrt(max(p_mc * (1 - p_mc), 1e-12) / n_mc)
            combined = 3 * np.sqrt(se_mc**2 + (res.error_estimate / 3) ** 2 + 1e-12)
            assert abs(res.probability - p_mc) <= combined, f"case {case}"

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(13)
        cov = random_spd(3, rng)
        lo = np.array([-np.inf, -1.0, -0.5])
        hi = np.array([0.3, 1.0, np.inf])
        means = rng.standard_normal((6, 3)) * 0.5
        probs, errs = rect_prob_batch(cov, lo, hi, means, n_points=4096, n_shifts=4)
        for i in range(6):
            ref = mvn_rect_prob(MvnSpec(means[i], cov), Rectangle(lo, hi), abs_tol=1e-6)
            assert abs(probs[i] - ref.probability) <= 5e-5


class TestTruncatedSampling:
    def test_half_normal_mean(self):
        spec = MvnSpec(np.zeros(1), np.eye(1))
        rect = Rectangle([0.0], [np.inf])
        n = 10**5
        x = truncated_mvn_sample(spec, rect, n, seed=1)
        assert np.all(x >= 0)
        target = np.sqrt(2 / np.pi)
        sd = np.sqrt(1 - 2 / np.pi)
        assert abs(x.mean() - target) <= 3 * sd / np.sqrt(n)

    def test_untruncated_identity_cov(self):
        spec = MvnSpec(np.zeros(2), np.eye(2))
        n = 10**5
        x = truncated_mvn_sample(spec, Rectangle.full_space(2), n, seed=2)
        np.testing.assert_allclose(np.cov(x.T), np.eye(2), atol=3 * 2 / np.sqrt(n))

    def test_full_space_matches_mvn_moments(self):
        rng = np.random.default_rng(21)
        cov = random_spd(3, rng)
        mean = rng.standard_normal(3)
        spec = MvnSpec(mean, cov)
        n = 10**5
        x = truncated_mvn_sample(spec, Rectangle.full_space(3), n, seed=3)
        se = np.sqrt(np.diag(cov) / n)
        assert np.all(np.abs(x.mean(axis=0) - mean) <= 4 * se)
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.15)

    def test_samples_inside_rect(self):
        rng = np.random.default_rng(17)
        cov = random_spd(3, rng)
        spec = MvnSpec(np.zeros(3), cov)
        rect = Rectangle([-1.0, -np.inf, 0.0], [0.5, 0.0, 2.0])
        x = truncated_mvn_sample(spec, rect, 5000, seed=4)
        assert np.all(x >= rect.lower - 1e-12) and np.all(x <= rect.upper + 1e-12)

    def test_truncated_mean_converges(self):
        # d=1 truncation to [a, inf): mean = mu + sigma * phi(z)/(1-Phi(z))
        spec = MvnSpec([0.5], [[4.0]])
        a = 1.0
        z = (a - 0.5) / 2.0
        target = 0.5 + 2.0 * np.exp(-0.5 * z**2) / np.sqrt(2 * np.pi) / (1 - ndtr(z))
        x = truncated_mvn_sample(spec, Rectangle([a], [np.inf]), 10**5, seed=5)
        assert abs(x.mean() - target) <= 0.03

    def test_degenerate_region_raises(self):
        spec = MvnSpec(np.zeros(2), np.eye(2))
        rect = Rectangle([12.0, 12.0], [13.0, 13.0])
        with pytest.raises(DegenerateRegion):
            truncated_mvn_sample(spec, rect, 100, seed=6)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=0, max_value=2**31 - 1))
def test_full_space_probability_one_property(d, seed):
    rng = np.random.default_rng(seed)
    spec = MvnSpec(rng.standard_normal(d), random_spd(d, rng))
    res = mvn_rect_prob(spec, Rectangle.full_space(d))
    assert abs(res.probability - 1.0) <= 1e-6
