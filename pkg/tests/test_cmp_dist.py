import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cmpdak.cmp_dist import (
    H_FLOOR,
    NU_MAX,
    NU_MIN,
    SeriesConfig,
    cmp_log_pmf,
    cmp_moments,
    log_normalizing_constant,
    make_kernel,
    solve_block,
    solve_lambda,
    solve_log_lambda,
)
from cmpdak.errors import ConvergenceError, DomainError
from oracles import bisect_log_lambda, direct_mean, series_log_z

# frozen from oracles.series_log_z / bisect_log_lambda / series_pmf
LOG_Z_2_HALF = 3.1293282798450424
LAMBDA_25_2 = 7.641908307559646
PMF_2_MU15_NU05 = 0.20258006897513472
VAR_MU2_NU05 = 3.000158308279992
VAR_MU5_NU5 = 1.0831108930700377


class TestLogNormalizingConstant:
    def test_exponential_series(self):
        log_z, _ = log_normalizing_constant(1.0, 1.0)
        assert log_z == pytest.approx(1.0, abs=1e-14)

    def test_huge_dispersion_keeps_two_terms(self):
        log_z, trunc = log_normalizing_constant(0.5, 1000.0)
        assert log_z == pytest.approx(math.log(1.5), abs=1e-9)
        assert trunc <= 2

    def test_matches_arbitrary_precision_series(self):
        log_z, _ = log_normalizing_constant(2.0, 0.5)
        assert log_z == pytest.approx(LOG_Z_2_HALF, rel=1e-12)

    def test_zero_rate(self):
        assert log_normalizing_constant(0.0, 3.0) == (0.0, 0)

    @pytest.mark.parametrize("lam,nu", [(0.3, 0.05), (5.0, 1.0), (40.0, 2.0), (1e6, 5.0), (3.0, 0.7)])
    def test_never_overestimates(self, lam, nu):
        log_z, _ = log_normalizing_constant(lam, nu)
        exact = series_log_z(lam, nu)
        assert log_z <= exact + 1e-13 * abs(exact)
        assert abs(log_z - exact) <= 1e-12 * max(1.0, abs(exact))

    @pytest.mark.parametrize("lam,nu", [(math.nan, 1.0), (1.0, math.inf), (-1.0, 1.0), (1.0, 0.0)])
    def test_domain(self, lam, nu):
        with pytest.raises(DomainError):
            log_normalizing_constant(lam, nu)

    def test_term_cap(self):
        with pytest.raises(ConvergenceError, match="lambda=1000"):
            log_normalizing_constant(1000.0, 0.5, SeriesConfig(max_terms=100))

    def test_agrees_with_block_solver(self):
        block = solve_block([0.7, 3.0, 12.0, 45.0], 0.4)
        for theta, log_z in zip(block.theta, block.log_z):
            scalar, _ = log_normalizing_constant(math.exp(theta), 0.4)
            assert log_z == pytest.approx(scalar, rel=1e-13, abs=1e-13)


class TestSolveLambda:
    def test_poisson(self):
        assert solve_lambda(2.0, 1.0) == pytest.approx(2.0, rel=1e-10)

    def test_zero_mean(self):
        assert solve_lambda(0.0, 3.0) == 0.0

    def test_against_bisection_oracle(self):
        assert solve_lambda(2.5, 2.0) == pytest.approx(LAMBDA_25_2, rel=1e-6)
        assert solve_lambda(2.5, 2.0) == pytest.approx(math.exp(bisect_log_lambda(2.5, 2.0)), rel=1e-6)

    @pytest.mark.parametrize("mu,nu", [(-1.0, 1.0), (1.0, 0.0), (1.0, -2.0), (math.inf, 1.0)])
    def test_domain(self, mu, nu):
        with pytest.raises(DomainError):
            solve_lambda(mu, nu)

    def test_tiny_mean(self):
        lam = solve_lambda(1e-14, 1.0)
        assert lam == pytest.approx(1e-14, rel=1e-6)

    @pytest.mark.parametrize("nu", [0.02, 0.05, 0.3, 1.0, 4.0, 50.0, 200.0, 1e4])
    def test_block_means(self, nu):
        mus = np.concatenate([[0.0], np.linspace(0.01, 50.0, 37)])
        block = solve_block(mus, nu)
        p = block.pmf_matrix()
        x = np.arange(p.shape[1])
        assert np.all(np.abs(p @ x - mus) <= 1e-8 * np.maximum(1.0, mus))


class TestKernel:
    def test_poisson_at_zero(self):
        k = make_kernel(1.0, 1.0)
        assert math.exp(cmp_log_pmf(k, 0)) == pytest.approx(0.3678794, abs=1e-7)

    def test_concentrates_at_integer_mean(self):
        k = make_kernel(3.0, 1 / 200)
        assert math.exp(cmp_log_pmf(k, 3)) >= 0.999

    def test_overdispersed_pmf_matches_series(self):
        k = make_kernel(1.5, 2.0)
        assert math.exp(cmp_log_pmf(k, 2)) == pytest.approx(PMF_2_MU15_NU05, rel=1e-9)

    def test_degenerate_mean_zero(self):
        k = make_kernel(0.0, 0.5)
        assert cmp_log_pmf(k, 0) == 0.0
        assert cmp_log_pmf(k, 1) == -math.inf
        assert k.lam == 0.0

    def test_lambda_positive_iff_mean_positive(self):
        assert make_kernel(0.2, 0.5).lam > 0
        assert make_kernel(0.0, 0.5).lam == 0

    def test_negative_x(self):
        with pytest.raises(DomainError):
            cmp_log_pmf(make_kernel(1.0, 1.0), -1)

    def test_unit_bandwidth_is_poisson(self):
        k = make_kernel(5.0, 1.0)
        assert k.nu == 1.0
        x = np.arange(60)
        np.testing.assert_allclose(k.pmf(x), stats.poisson.pmf(x, 5.0), atol=1e-12)

    def test_tiny_bandwidth_is_dirac(self):
        k = make_kernel(5.0, 1e-9)
        assert k.dirac and k.center == 5
        np.testing.assert_array_equal(k.pmf(np.arange(10)), np.eye(10)[5])

    def test_dirac_rounds_half_to_even(self):
        assert make_kernel(2.5, 1e-9).center == 2
        assert make_kernel(3.5, 1e-9).center == 4

    def test_floor_is_dirac(self):
        assert make_kernel(3.0, H_FLOOR).dirac

    def test_dispersion_clamps(self):
        assert make_kernel(3.0, 1e3).nu == NU_MIN
        assert make_kernel(3.0, 1.5 * H_FLOOR).nu == pytest.approx(1 / (1.5 * H_FLOOR))
        assert 1 / H_FLOOR == NU_MAX

    def test_negative_bandwidth(self):
        with pytest.raises(DomainError):
            make_kernel(1.0, -0.1)

    def test_underdispersed(self):
        _, var = cmp_moments(make_kernel(5.0, 0.2))
        assert var < 5.0
        assert var == pytest.approx(VAR_MU5_NU5, rel=1e-8)


class TestMoments:
    def test_poisson(self):
        mean, var = cmp_moments(make_kernel(4.0, 1.0))
        assert mean == pytest.approx(4.0, abs=1e-8)
        assert var == pytest.approx(4.0, abs=1e-6)

    def test_high_dispersion(self):
        _, var = cmp_moments(make_kernel(3.0, 1 / 200))
        assert var <= 1e-3

    def test_overdispersed(self):
        _, var = cmp_moments(make_kernel(2.0, 2.0))
        assert var > 2.0
        assert var == pytest.approx(VAR_MU2_NU05, rel=1e-8)


@settings(max_examples=60, deadline=None)
@given(mu=st.floats(0.0, 50.0), log_nu=st.floats(math.log(0.05), math.log(200.0)))
def test_normalization_and_mean(mu, log_nu):
    k = make_kernel(mu, math.exp(-log_nu))
    p = k.pmf(k.support)
    assert 1 - 1e-10 <= p.sum() <= 1 + 1e-12
    mean, _ = cmp_moments(k)
    assert abs(mean - mu) <= 1e-8 * max(1.0, mu)


@pytest.mark.parametrize("mu", [0.5, 1.0, 5.0, 20.0])
def test_poisson_reduction(mu):
    k = make_kernel(mu, 1.0)
    x = np.arange(151)
    assert np.max(np.abs(k.pmf(x) - stats.poisson.pmf(x, mu))) <= 1e-10


@pytest.mark.parametrize("mu", [1, 3, 7, 20])
def test_variance_shrinks_with_dispersion(mu):
    variances = []
    for nu in (1.0, 10.0, 100.0, 1000.0):
        mean, var = cmp_moments(make_kernel(float(mu), 1 / nu))
        assert abs(mean - mu) <= 1e-8 * max(1, mu)
        variances.append(var)
    assert all(a > b for a, b in zip(variances, variances[1:]))
    assert variances[-1] < 1e-6


@pytest.mark.parametrize("mu", [1.0, 2.0, 6.5, 15.0])
@pytest.mark.parametrize("nu", [0.3, 0.8, 1.5, 4.0])
def test_dispersion_ordering(mu, nu):
    _, var = cmp_moments(make_kernel(mu, 1 / nu))
    assert (var < mu) if nu > 1 else (var > mu)


def test_matches_bisection_oracle_on_random_pairs():
    rng = np.random.default_rng(7)
    for _ in range(25):
        mu = rng.uniform(0.01, 50)
        nu = math.exp(rng.uniform(math.log(0.05), math.log(200)))
        log_lam = solve_log_lambda(mu, nu)
        ref = bisect_log_lambda(mu, nu, scaled=True)
        assert log_lam == pytest.approx(ref, abs=1e-6)
        assert abs(direct_mean(None, nu, log_lam=log_lam) - mu) <= 1e-8 * max(1, mu)


def test_kernels_are_immutable():
    k = make_kernel(2.0, 0.5)
    with pytest.raises(AttributeError):
        k.mu = 3.0


def test_series_config_validation():
    with pytest.raises(DomainError):
        SeriesConfig(max_terms=10)
    with pytest.raises(DomainError):
        SeriesConfig(mean_tol=0.0)
