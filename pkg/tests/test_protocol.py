import io
import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from corrnoise import protocol
from corrnoise.atoms import NoiseAtom, build_right_inverse
from corrnoise.calibration import dsum_params
from corrnoise.dist import NegBinParams, nb_pmf
from corrnoise.errors import CapacityError, ConfigurationError, EncodingError, InputDomainError
from corrnoise.protocol import Histogram, MessageBag, NoiseDraw, ProtocolParams


@pytest.fixture(scope="module")
def small_params():
    return dsum_params(1.0, 1e-6, 0.1, 2, 5, certify=False).params


def test_randomize_noiseless():
    params = ProtocolParams.noiseless(4, 3)
    rng = np.random.default_rng(0)
    assert protocol.randomize(0, params, rng) == MessageBag.empty(4)
    assert protocol.randomize(3, params, rng).counts == {3: 1}
    with pytest.raises(InputDomainError):
        protocol.randomize(5, params, rng)
    with pytest.raises(InputDomainError):
        protocol.randomize(-1, params, rng)


def test_shuffle_round_noiseless():
    rng = np.random.default_rng(0)
    assert protocol.shuffle_round([0, 0], ProtocolParams.noiseless(2, 2), rng).total == 0
    assert protocol.shuffle_round([1, 2], ProtocolParams.noiseless(2, 2), rng).counts == \
        {1: 1, 2: 1}
    with pytest.raises(ConfigurationError):
        protocol.shuffle_round([1], ProtocolParams.noiseless(2, 2), rng)


def test_analyze_examples():
    assert protocol.analyze(MessageBag.empty(3)) == 0
    assert protocol.analyze(MessageBag.from_counts(3, {3: 1, -1: 3, 2: 1, 1: 1})) == 3


def test_central_run_examples():
    params = ProtocolParams.noiseless(2, 5)
    zero = NoiseDraw(0, 0, (0, 0, 0))
    assert protocol.central_run(Histogram(2, (0, 0)), params, draw=zero).total == 0
    assert protocol.central_run(Histogram(2, (0, 3)), params, draw=zero).counts == {2: 3}
    drawn = protocol.central_run(Histogram(2, (1, 0)), params, draw=NoiseDraw(2, 0, (0, 0, 0)))
    assert drawn.counts == {1: 3}


def test_atom_noise_cancels_in_sum(small_params):
    rng = np.random.default_rng(1)
    h = Histogram(2, (2, 1))
    for _ in range(50):
        draw = protocol.draw_noise(small_params, rng)
        bag = protocol.central_run(h, small_params, draw=draw)
        assert protocol.analyze(bag) == 4 + draw.z_plus - draw.z_minus


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_noiseless_analyze_is_exact(xs):
    params = ProtocolParams.noiseless(3, len(xs))
    bag = protocol.shuffle_round(xs, params, np.random.default_rng(0))
    assert protocol.analyze(bag) == sum(xs)


def test_shuffle_central_coupling(small_params):
    # per-user draws summed are fed to the central run as its noise
    for seed in range(200):
        rng = np.random.default_rng(seed)
        xs = list(rng.integers(0, 3, size=5))
        bag, total = protocol.shuffle_round(xs, small_params, rng, return_draws=True)
        central = protocol.central_run(Histogram.from_inputs(xs, 2), small_params, draw=total)
        assert bag == central


def test_simulate_rounds_mean(small_params):
    rng = np.random.default_rng(2)
    xs = [2, 1, 0, 2, 1]
    u = protocol.simulate_rounds(xs, small_params, 20_000, rng)
    sums = u @ np.array([-2, -1, 1, 2])
    assert abs(sums.mean() - 6) < 4 * sums.std() / np.sqrt(len(sums))


def test_simulate_users_counts():
    params = ProtocolParams.noiseless(3, 4)
    per_user, u = protocol.simulate_users(np.array([0, 3, 1, 3]), params,
                                          np.random.default_rng(0))
    assert list(per_user) == [0, 1, 1, 1]
    assert MessageBag(3, u).counts == {1: 1, 3: 2}


def test_exact_output_noiseless():
    params = ProtocolParams.noiseless(2, 3)
    joint = protocol.exact_output_dist(Histogram(2, (1, 2)), params)
    assert joint.masses.shape == (1, 1, 1, 1)
    assert joint.prob((0, 0, 1, 2)) == 1.0


def test_exact_output_marginal_matches_nb():
    # a single noise component: the marginal of u_{+1} is h_1 + NB
    sys = build_right_inverse(1)
    params = ProtocolParams(1, 4, NegBinParams(2, 0.4), {a: () for a in sys.atoms}, sys)
    joint = protocol.exact_output_dist(Histogram(1, (3,)), params, tail_tol=1e-12)
    marg = joint.marginal(1)
    ks = np.arange(0, 20)
    np.testing.assert_allclose(marg.pmf(ks + 3), nb_pmf(NegBinParams(2, 0.4), ks), atol=1e-13)


def test_exact_output_mass_and_capacity(small_params):
    with pytest.raises(CapacityError):
        protocol.exact_output_dist(Histogram(2, (1, 1)), small_params, tail_tol=1e-6)
    sys = build_right_inverse(2)
    small = NegBinParams(1, 0.3)
    params = ProtocolParams(2, 3, small, {a: (small,) for a in sys.atoms}, sys)
    joint = protocol.exact_output_dist(Histogram(2, (1, 1)), params, tail_tol=1e-9)
    assert 1 - joint.masses.sum() <= joint.tail_tol
    # the sum of messages is h-sum plus z+ - z-: mean 3
    mean = sum(v * joint.marginal(i).mean for i, v in enumerate((-2, -1, 1, 2)))
    assert mean == pytest.approx(3, abs=1e-6)


def test_randomized_round_examples():
    rng = np.random.default_rng(0)
    assert protocol.randomized_round(0.0, 10, rng) == 0
    assert protocol.randomized_round(1.0, 10, rng) == 10
    draws = protocol.randomized_round_many(np.full(20_000, 0.35), 10, rng)
    assert set(np.unique(draws)) == {3, 4}
    assert abs((draws == 4).mean() - 0.5) < 0.02
    with pytest.raises(InputDomainError):
        protocol.randomized_round(1.5, 10, rng)


def test_real_delta_levels():
    assert protocol.real_delta_levels(10_000, 1.0, 0.5) == 71


def test_real_round_trip_noiseless():
    rng = np.random.default_rng(0)
    est = protocol.real_round_trip(np.zeros(100), 1.0, 1e-6, 0.5, rng, noiseless=True)
    assert est[0] == 0
    xs = np.linspace(0, 1, 100)
    ests = protocol.real_round_trip(xs, 1.0, 1e-6, 0.5, rng, noiseless=True, trials=200)
    # rounding is unbiased
    assert abs(ests.mean() - xs.sum()) < 4 * ests.std() / np.sqrt(200) + 1e-9


def test_sparse_round_trip():
    rng = np.random.default_rng(0)
    vs = np.zeros((50, 3))
    assert (protocol.sparse_round_trip(vs, 1.0, 1e-6, 0.5, rng, noiseless=True) == 0).all()
    vs[0, 1] = 0.5
    out = protocol.sparse_round_trip(vs, 1.0, 1e-6, 0.5, rng, noiseless=True)
    Delta = protocol.real_delta_levels(50, 0.5, 0.5)
    assert out[0] == 0 and out[2] == 0
    assert abs(out[1] - 0.5) <= 1 / Delta
    vs[1, :2] = 0.3
    with pytest.raises(InputDomainError):
        protocol.sparse_round_trip(vs, 1.0, 1e-6, 0.5, rng)


def test_encoding_examples():
    assert protocol.encode_message(1, 1) == "0"
    assert protocol.encode_message(-1, 1) == "1"
    assert protocol.encode_message(3, 4) == "010"
    for bad in (0, 5, -5):
        with pytest.raises(EncodingError):
            protocol.encode_message(bad, 4)


@pytest.mark.parametrize("Delta", [1, 2, 3, 5, 8, 200])
def test_encoding_round_trip_and_width(Delta):
    width = protocol.message_bits(Delta)
    for m in itertools.chain(range(-Delta, 0), range(1, Delta + 1)):
        code = protocol.encode_message(m, Delta)
        assert len(code) == width
        assert protocol.decode_message(code, Delta) == m


def test_sparse_message_bits():
    assert protocol.sparse_message_bits(5, 1) == 4
    assert protocol.sparse_message_bits(5, 4) == 6


def test_transcript_csv():
    bags = [MessageBag.from_counts(2, {2: 1, -1: 1}), MessageBag.empty(2)]
    buf = io.StringIO()
    assert protocol.write_transcript(buf, bags) == 2
    lines = buf.getvalue().splitlines()
    assert lines[0] == "user,message,bits"
    assert sorted(lines[1:]) == ["0,-1,10", "0,2,01"]


def test_params_require_every_atom():
    sys = build_right_inverse(2)
    with pytest.raises(ConfigurationError):
        ProtocolParams(2, 3, None, {NoiseAtom.of(-1, 1): ()}, sys)
