import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from corrnoise import dist
from corrnoise.dist import DLapParams, NegBinParams
from corrnoise.errors import CapacityError, ParameterDomainError, TruncationError


@pytest.mark.parametrize("r,p,k,expected", [
    (1, 0.5, 0, 0.5),
    (1, 0.5, 2, 0.125),
    (2, 0.3, 1, 0.294),
])
def test_nb_pmf_examples(r, p, k, expected):
    assert dist.nb_pmf(NegBinParams(r, p), k) == pytest.approx(expected, rel=1e-12)


def test_nb_pmf_matches_ratio_recurrence():
    params = NegBinParams(3.7, 0.93)
    ks = np.arange(0, 1001)
    pmf = dist.nb_pmf(params, ks)
    ratio = pmf[1:] / pmf[:-1]
    expected = params.p * (ks[:-1] + params.r) / (ks[:-1] + 1)
    np.testing.assert_allclose(ratio, expected, rtol=1e-12)


def test_nb_pmf_large_k_is_finite():
    v = dist.nb_pmf(NegBinParams(46.0, 0.99995), 10**6)
    assert math.isfinite(v) and v > 0


def test_nb_pmf_rejects_negative_k_and_bad_params():
    with pytest.raises(ParameterDomainError):
        dist.nb_pmf(NegBinParams(1, 0.5), -1)
    for r, p in [(0, 0.5), (-1, 0.5), (1, 0.0), (1, 1.0)]:
        with pytest.raises(ParameterDomainError):
            NegBinParams(r, p)


@pytest.mark.parametrize("r,p,n,expected", [
    (3, 0.4, 3, (1, 0.4)),
    (1, 0.9, 1, (1, 0.9)),
    (2, 0.5, 4, (0.5, 0.5)),
])
def test_nb_divide(r, p, n, expected):
    out = dist.nb_divide(NegBinParams(r, p), n)
    assert (out.r, out.p) == pytest.approx(expected)


def test_nb_divide_by_zero():
    with pytest.raises(ParameterDomainError):
        dist.nb_divide(NegBinParams(1, 0.5), 0)


def test_nb_sample_degenerate_limit():
    rng = np.random.default_rng(0)
    draws = dist.nb_sample(NegBinParams(1, 1e-12), rng, size=1000)
    assert (draws == 0).all()


def test_nb_sample_mean():
    rng = np.random.default_rng(1)
    params = NegBinParams(2, 0.5)
    draws = dist.nb_sample(params, rng, size=100_000)
    sigma = math.sqrt(params.var)
    assert abs(draws.mean() - 2.0) < 3 * sigma / math.sqrt(100_000)


def _chi_square_pvalue(draws, params):
    """Goodness of fit against nb_pmf with the upper tail pooled."""
    top = int(np.quantile(draws, 0.999))
    ks = np.arange(0, top + 1)
    probs = dist.nb_pmf(params, ks)
    probs = np.append(probs, max(0.0, 1 - probs.sum()))
    observed = np.bincount(np.minimum(draws, top + 1), minlength=top + 2)
    expected = probs * len(draws)
    # pool sparse cells from the right so every expected count is >= 5
    obs_c, exp_c, acc_o, acc_e = [], [], 0.0, 0.0
    for o, e in zip(observed[::-1], expected[::-1]):
        acc_o += o
        acc_e += e
        if acc_e >= 5:
            obs_c.append(acc_o)
            exp_c.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e:
        obs_c[-1] += acc_o
        exp_c[-1] += acc_e
    return stats.chisquare(obs_c, exp_c).pvalue


@pytest.mark.parametrize("r,p", [(0.5, 0.6), (2, 0.5), (0.05, 0.9), (7.3, 0.3)])
def test_nb_sample_goodness_of_fit(r, p):
    rng = np.random.default_rng(int(r * 1000 + p * 10))
    params = NegBinParams(r, p)
    draws = dist.nb_sample(params, rng, size=100_000)
    assert _chi_square_pvalue(draws, params) > 0.01


def test_dlap_pmf_examples():
    assert dist.dlap_pmf(DLapParams(1), 0) == pytest.approx(0.46212, abs=1e-5)
    assert dist.dlap_pmf(DLapParams(math.log(2)), 1) == pytest.approx(1 / 6, rel=1e-12)
    with pytest.raises(ParameterDomainError):
        DLapParams(0)


@given(st.floats(0.01, 5), st.integers(-200, 200))
def test_dlap_symmetric(s, k):
    params = DLapParams(s)
    assert dist.dlap_pmf(params, k) == pytest.approx(dist.dlap_pmf(params, -k), rel=1e-15)


def test_dlap_sums_to_one():
    d = dist.dlap_dist(DLapParams(0.3))
    assert d.total_mass >= 1 - 1e-12
    assert d.total_mass <= 1 + 1e-12


def test_truncate_point_mass():
    d = dist.truncate(lambda k: (np.asarray(k) == 0).astype(float), 1e-12, center=0)
    assert d.lo == 0 and list(d.masses) == [1.0]


def test_truncate_nb_upper_bound():
    d = dist.nb_dist(NegBinParams(1, 0.5), tail_tol=1e-6)
    assert d.hi >= 19
    assert d.missing_mass <= 1e-6


def test_truncate_is_minimal_for_geometric():
    # geometric tail beyond k has mass p^(k+1); smallest k with 0.5^(k+1) <= 1e-6 is 19
    d = dist.nb_dist(NegBinParams(1, 0.5), tail_tol=1e-6)
    assert (d.lo, d.hi) == (0, 19)


def test_truncate_failure():
    # a "pmf" that never accumulates mass
    with pytest.raises(TruncationError):
        dist.truncate(lambda k: np.zeros(len(k)), 1e-12, center=0, width=4, max_width=64)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 20), st.floats(0.01, 0.95))
def test_stored_mass_within_tolerance(r, p):
    d = dist.nb_dist(NegBinParams(r, p), tail_tol=1e-10)
    assert 1 - 1e-10 - 1e-12 <= d.total_mass <= 1 + 1e-12
    assert (d.masses >= 0).all()


def test_nb_dist_huge_mean():
    params = NegBinParams(49.8, 0.9975)
    d = dist.nb_dist(params)
    assert d.missing_mass <= 1e-12
    assert d.mean == pytest.approx(params.mean, rel=1e-9)


def test_convolve_identity_and_points():
    d = dist.dlap_dist(DLapParams(1))
    assert dist.total_variation(dist.convolve(dist.point_mass(0), d), d) < 1e-15
    c = dist.convolve(dist.point_mass(1), dist.point_mass(2))
    assert c.lo == 3 and list(c.masses) == [1.0]


def test_convolve_divisibility_pointwise():
    half = dist.nb_dist(NegBinParams(0.5, 0.4))
    full = dist.nb_dist(NegBinParams(1, 0.4))
    conv = dist.convolve(half, half)
    ks = np.arange(0, 60)
    np.testing.assert_allclose(conv.pmf(ks), full.pmf(ks), atol=1e-10)


def test_convolve_capacity():
    a = dist.DiscreteDist(0, np.full(1000, 1e-3))
    with pytest.raises(CapacityError):
        dist.convolve(a, a, cap=1500)


def test_negate_shift():
    assert dist.negate_shift(dist.point_mass(0), 1, 5).lo == 5
    d = dist.nb_dist(NegBinParams(2, 0.5))
    twice = dist.negate_shift(dist.negate_shift(d, -1, 0), -1, 0)
    assert twice.lo == d.lo and np.array_equal(twice.masses, d.masses)
    lap = dist.dlap_dist(DLapParams(0.7))
    flipped = dist.negate_shift(lap, -1, 0)
    np.testing.assert_allclose(flipped.pmf(np.arange(-20, 21)), lap.pmf(np.arange(-20, 21)),
                               rtol=1e-14)


def test_mean_identity_by_sampling():
    rng = np.random.default_rng(5)
    params = NegBinParams(0.7, 0.8)
    draws = dist.nb_sample(params, rng, size=100_000)
    assert abs(draws.mean() - params.mean) < 3 * math.sqrt(params.var / 100_000)
