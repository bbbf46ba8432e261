import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cmpdak.errors import DomainError
from cmpdak.estimators import CountSample, EstimatorTag, PmfEstimate, fit_cmp_dak, fit_histogram
from cmpdak.metrics import TailQuery, ise, tail_probability, tail_relative_error
from cmpdak.sim import BUILTIN_TARGETS, sample_target

TAIL_0_2_H1 = 0.1616617919084683  # 1 - (P0(X<=2) + P2(X<=2)) / 2, Poisson CDFs


def est(probs, tail=0.0):
    return PmfEstimate(np.asarray(probs, dtype=float), tail, EstimatorTag.HISTOGRAM)


class TestIse:
    def test_identity(self):
        truth = BUILTIN_TARGETS["bimodal_poisson"]
        x = np.arange(200)
        assert ise(est(truth.pmf(x)), truth) == pytest.approx(0.0, abs=1e-24)

    def test_hand_value(self):
        truth = est([0.5, 0.5])
        assert ise(est([1.0, 0.0]), truth) == 0.5

    def test_estimate_shorter_than_truth(self):
        truth = est([0.25, 0.25, 0.5])
        assert ise(est([1.0]), truth) == pytest.approx(0.75**2 + 0.25**2 + 0.25)

    def test_histogram_improves_with_n(self):
        truth = BUILTIN_TARGETS["bimodal_poisson"]
        medians = []
        for n in (20, 100, 500):
            vals = [ise(fit_histogram(sample_target(truth, n, (n, r))), truth) for r in range(200)]
            medians.append(np.median(vals))
        assert medians[0] > medians[1] > medians[2]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.lists(st.floats(0, 1), min_size=1, max_size=10))
    def test_nonnegative_and_symmetric(self, a, b):
        ab = ise(est(a), est(b), support_cap=12)
        assert ab >= 0
        assert ab == pytest.approx(ise(est(b), est(a), support_cap=12), abs=1e-15)


class TestTail:
    def test_histogram_beyond_max(self):
        h = fit_histogram(CountSample.of([1, 4, 9]))
        assert tail_probability(h, 9) == 0.0
        assert tail_probability(h, 30) == 0.0

    def test_point_mass(self):
        assert tail_probability(est([0, 0, 0, 0, 0, 1]), 4) == 1.0

    def test_cmp_two_point(self):
        p = fit_cmp_dak(CountSample.of([0, 2]), 1.0)
        expected = 1 - 0.5 * (1.0 + stats.poisson.cdf(2, 2))
        assert expected == pytest.approx(TAIL_0_2_H1, abs=1e-15)
        assert tail_probability(p, 2) == pytest.approx(TAIL_0_2_H1, abs=1e-12)

    def test_includes_tail_mass(self):
        assert tail_probability(est([0.5, 0.3], tail=0.2), 1) == pytest.approx(0.2)

    def test_negative_threshold(self):
        with pytest.raises(DomainError):
            tail_probability(est([1.0]), -1)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=1, max_size=15), st.floats(0.05, 4), st.integers(0, 60))
    def test_complements_cdf(self, values, h, t):
        p = fit_cmp_dak(CountSample.of(values), h)
        assert tail_probability(p, t) + p.cdf(t) == pytest.approx(1.0, abs=1e-12)

    def test_query_from_truth(self):
        truth = BUILTIN_TARGETS["poisson_unimodal"]
        q = TailQuery.from_truth(truth, 0.99)
        assert q.threshold == int(stats.poisson.ppf(0.99, 14))
        assert truth.cdf(q.threshold) >= 0.99 > truth.cdf(q.threshold - 1)
        with pytest.raises(DomainError):
            TailQuery.from_truth(truth, 1.0)


class TestRelativeError:
    @pytest.mark.parametrize("p_hat", [0.1, 0.001])
    def test_order_of_magnitude(self, p_hat):
        assert tail_relative_error(p_hat, 0.01).value == 1.0

    def test_exact(self):
        out = tail_relative_error(0.02, 0.02)
        assert out.value == 0.0 and not out.divergent

    def test_zero_estimate_diverges(self):
        out = tail_relative_error(0.0, 0.01)
        assert out.divergent and out.value is None

    @pytest.mark.parametrize("p_true", [0.0, -0.1])
    def test_domain(self, p_true):
        with pytest.raises(DomainError):
            tail_relative_error(0.1, p_true)

    @settings(max_examples=50)
    @given(st.floats(1e-6, 0.5), st.floats(1.0001, 1e4))
    def test_symmetry(self, p, c):
        up = tail_relative_error(min(c * p, 1.0), p).value
        if c * p <= 1.0:
            assert up == pytest.approx(tail_relative_error(p / c, p).value, rel=1e-9)
            assert up == pytest.approx(math.log10(c), rel=1e-9)
