import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrnoise import baselines as bl
from corrnoise.errors import (ConfigurationError, InfeasibleError, InputDomainError,
                              ParameterDomainError)


def test_dlap_rmse_example():
    assert bl.dlap_rmse(1, 1) == pytest.approx(1.3570, abs=1e-4)
    assert bl.baseline_rmse("dlap-central", 100, 1, 1e-6, 1) == pytest.approx(1.3570, abs=1e-4)


def test_central_dlap_infinite_epsilon():
    rng = np.random.default_rng(0)
    assert bl.central_dlap(17, math.inf, 3, rng) == 17


def test_central_dlap_variance():
    rng = np.random.default_rng(1)
    draws = bl.central_dlap(0, 1.0, 2, rng, size=200_000)
    assert draws.std() == pytest.approx(bl.dlap_rmse(1.0, 2), rel=0.02)
    assert abs(draws.mean()) < 4 * bl.dlap_rmse(1.0, 2) / math.sqrt(200_000)


def test_ikos_example_and_modulus():
    params = bl.IkosParams(g=2, q=16, n=1, Delta=3)
    shares = bl.ikos_randomize(3, params, np.random.default_rng(0))
    assert len(shares) == 2 and shares.sum() % 16 == 3
    with pytest.raises(ConfigurationError):
        bl.IkosParams(g=2, q=8, n=4, Delta=3)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=30), st.integers(0, 2**32 - 1))
def test_ikos_noiseless_sum_exact(xs, seed):
    rng = np.random.default_rng(seed)
    params = bl.ikos_calibrate(len(xs), 1.0, 1e-6, 7, noise=False)
    residues = np.concatenate([bl.ikos_randomize(x, params, rng) for x in xs])
    assert bl.ikos_analyze(residues, len(xs), 7, params.q) == sum(xs)


def test_ikos_noisy_sum_recentered():
    rng = np.random.default_rng(3)
    xs = [0] * 20
    params = bl.ikos_calibrate(20, 1.0, 1e-6, 4)
    ests = [bl.ikos_analyze(np.concatenate([bl.ikos_randomize(x, params, rng) for x in xs]),
                            20, 4, params.q) for _ in range(300)]
    # negative noisy sums come back negative rather than wrapping to q - k
    assert min(ests) < 0
    assert max(abs(e) for e in ests) < params.q // 2


def test_ikos_window_without_margin():
    # q = n * Delta + 1 leaves no slack: the window is exactly [0, n * Delta]
    assert bl.ikos_analyze([7], 1, 7, 8) == 7
    assert bl.ikos_analyze([0], 1, 7, 8) == 0
    # slack splits evenly on both sides
    assert bl.ikos_analyze([15], 1, 7, 16) == -1
    assert bl.ikos_analyze([11], 1, 7, 16) == 11


def test_ikos_bits():
    params = bl.ikos_calibrate(1000, 1.0, 1e-6, 5, g=4)
    assert params.bits_per_user == 4 * (params.q - 1).bit_length()
    assert params.q & (params.q - 1) == 0
    assert params.q >= 1000 * 5 + 1


def test_rappor_example():
    params = bl.RapporParams(0.0, 5)
    frag = bl.rappor_randomize(3, params, np.random.default_rng(0))
    assert list(frag) == [3]
    assert bl.rappor_analyze([frag, bl.rappor_randomize(0, params, np.random.default_rng(0))],
                             2, 0.0, 5) == 3
    with pytest.raises(ParameterDomainError):
        bl.RapporParams(0.5, 5)
    with pytest.raises(InputDomainError):
        bl.rappor_analyze([[6]], 1, 0.0, 5)


def test_rappor_unbiased():
    rng = np.random.default_rng(4)
    params = bl.RapporParams(0.1, 4)
    xs = [1, 2, 3, 4, 0] * 10
    ests = [bl.rappor_analyze([bl.rappor_randomize(x, params, rng) for x in xs], 50, 0.1, 4)
            for _ in range(400)]
    var = bl.rappor_variance(50, 0.1, 4)
    assert abs(np.mean(ests) - 100) < 4 * math.sqrt(var / 400)
    assert np.var(ests) == pytest.approx(var, rel=0.2)


def test_rappor_calibration_monotone():
    fs = [bl.rappor_calibrate(eps, 1e-6, 4, 1000).f for eps in (0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(fs, fs[1:]))
    for eps, f in zip((0.5, 1.0, 2.0, 4.0), fs):
        assert bl.rappor_pair_divergence(f, 1000, eps) <= 1e-6


def test_rappor_calibration_large_epsilon_small_f():
    assert bl.rappor_calibrate(40.0, 1e-6, 4, 1000).f < 1e-3


def test_rappor_infeasible():
    # f is capped just below 1/2, which leaves a ~1e-9 divergence at tiny epsilon
    with pytest.raises(InfeasibleError):
        bl.rappor_calibrate(1e-13, 1e-12, 4, 2)


def test_rappor_variance_independent_f_across_delta():
    f2 = bl.rappor_calibrate(1.0, 1e-6, 2, 1000).f
    f9 = bl.rappor_calibrate(1.0, 1e-6, 9, 1000).f
    assert f2 == f9


def test_rappor_messages_and_bits():
    assert bl.rappor_expected_messages(0.0, 5) == 1
    assert bl.rappor_expected_messages(0.1, 5) == pytest.approx(0.9 + 0.4)
    assert bl.rappor_expected_messages(0.1, 5, nonzero=False) == pytest.approx(0.5)
    assert bl.rappor_bits_per_message(1) == 1
    assert bl.rappor_bits_per_message(200) == 8


def test_baseline_dispatch():
    with pytest.raises(ConfigurationError):
        bl.baseline_rmse("nope", 10, 1, 1e-6, 2)
    assert bl.baseline_rmse("ikos", 10, 1, 1e-6, 3) == bl.dlap_rmse(1, 3)
    assert bl.baseline_rmse("corrnoise", 10, 1, 1e-6, 3) == bl.dlap_rmse(0.9, 3)


def test_ikos_noisy_error_is_dlap():
    rng = np.random.default_rng(6)
    n, Delta = 50, 3
    params = bl.ikos_calibrate(n, 1.0, 1e-6, Delta)
    xs = rng.integers(0, Delta + 1, size=n)
    errs = []
    for _ in range(4000):
        residues = np.concatenate([bl.ikos_randomize(int(x), params, rng) for x in xs])
        errs.append(bl.ikos_analyze(residues, n, Delta, params.q) - int(xs.sum()))
    # 4000 draws of a DLap with kurtosis ~6: 3% is about 2 sigma, so allow 8%
    assert np.var(errs) == pytest.approx(bl.dlap_rmse(1.0, Delta) ** 2, rel=0.08)


def test_ikos_share_uniformity():
    from scipy import stats
    rng = np.random.default_rng(7)
    params = bl.IkosParams(g=3, q=64, n=1, Delta=5)
    first = np.array([bl.ikos_randomize(2, params, rng)[0] for _ in range(100_000)])
    assert stats.chisquare(np.bincount(first, minlength=64)).pvalue > 0.01


def test_rappor_calibration_monotone_in_delta():
    fs = [bl.rappor_calibrate(1.0, d, 3, 1000).f for d in (1e-4, 1e-6, 1e-8)]
    assert fs[0] < fs[1] < fs[2]
