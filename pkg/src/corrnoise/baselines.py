"""Comparison protocols: central Discrete Laplace, IKOS split-and-mix, fragmented RAPPOR.

Each comes with a randomizer/analyzer pair plus closed-form RMSE and
communication accounting. `baseline_rmse`, `baseline_messages` and
`baseline_bits` dispatch on the string tags used by the experiment harness.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Iterable, Optional, Sequence

import numpy as np

from corrnoise import dist as dist_lib
from corrnoise import divergence
from corrnoise.dist import NegBinParams
from corrnoise.errors import ConfigurationError, InfeasibleError, InputDomainError, ParameterDomainError

TAGS = ("dlap-central", "ikos", "rappor", "corrnoise")


def _check_x(x, Delta: int) -> None:
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)) or not 0 <= x <= Delta:
        raise InputDomainError(f"input {x!r} outside {{0, ..., {Delta}}}")


def dlap_p(epsilon: float, Delta: int) -> float:
    """p = exp(-epsilon / Delta); 0 when epsilon is infinite."""
    if not epsilon > 0:
        raise ParameterDomainError(f"epsilon must be positive, got {epsilon}")
    return 0.0 if math.isinf(epsilon) else math.exp(-epsilon / Delta)


def dlap_rmse(epsilon: float, Delta: int) -> float:
    """sqrt(2p) / (1 - p), the DLap(epsilon / Delta) standard deviation."""
    p = dlap_p(epsilon, Delta)
    return math.sqrt(2 * p) / (1 - p)


def central_dlap(true_sum: int, epsilon: float, Delta: int, rng: np.random.Generator,
                 size=None):
    """true_sum + DLap(epsilon / Delta), sampled as NB(1, p) - NB(1, p)."""
    p = dlap_p(epsilon, Delta)
    if p == 0.0:
        return true_sum if size is None else np.full(size, true_sum, dtype=np.int64)
    nb = NegBinParams(1.0, p)
    return true_sum + dist_lib.nb_sample(nb, rng, size) - dist_lib.nb_sample(nb, rng, size)


# --- IKOS split-and-mix -------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class IkosParams:
    """Split-and-mix parameters.

    Attributes:
      g: shares (messages) per user.
      q: group modulus.
      n, Delta: population and input range the modulus was sized for.
      noise_share: per-user NB(1/n, p) whose difference of two draws is the
        user's DLap share; None disables noise.
    """

    g: int
    q: int
    n: int
    Delta: int
    noise_share: Optional[NegBinParams] = None

    def __post_init__(self):
        if self.g < 1:
            raise ParameterDomainError(f"g must be positive, got {self.g}")
        _check_modulus(self.q, self.n, self.Delta)

    @property
    def bits_per_user(self) -> int:
        return self.g * (self.q - 1).bit_length()


def _check_modulus(q: int, n: int, Delta: int) -> None:
    if q < n * Delta + 1:
        raise ConfigurationError(f"modulus {q} cannot hold sums up to n * Delta = {n * Delta}")


def ikos_default_g(n: int, Delta: int, delta: float) -> int:
    """Heuristic share count g = max(3, ceil(log(n Delta / delta) / log n) + 1)."""
    if n < 2:
        return 3
    return max(3, math.ceil(math.log(n * Delta / delta) / math.log(n)) + 1)


def ikos_calibrate(n: int, epsilon: float, delta: float, Delta: int,
                   g: Optional[int] = None, noise: bool = True) -> IkosParams:
    """Per-user DLap shares at epsilon / Delta and a power-of-two modulus.

    The modulus is the smallest power of two at least n * Delta plus a margin
    of 2 ceil((Delta / epsilon) ln(1 / delta)) + 1 for the noise.
    """
    margin = 2 * math.ceil(Delta / epsilon * math.log(1 / delta)) + 1 if noise else 1
    q = 1 << (n * Delta + margin - 1).bit_length()
    share = NegBinParams(1.0 / n, math.exp(-epsilon / Delta)) if noise else None
    return IkosParams(g or ikos_default_g(n, Delta, delta), q, n, Delta, share)


def ikos_randomize(x: int, params: IkosParams, rng: np.random.Generator) -> np.ndarray:
    """g residues mod q, uniform subject to summing to x plus the noise share."""
    _check_x(x, params.Delta)
    y = x
    if params.noise_share is not None:
        y += dist_lib.nb_sample(params.noise_share, rng) - dist_lib.nb_sample(params.noise_share, rng)
    shares = rng.integers(0, params.q, size=params.g, dtype=np.int64)
    shares[-1] = (y - int(shares[:-1].sum())) % params.q
    return shares


def ikos_analyze(residues: Iterable[int], n: int, Delta: int, q: int) -> int:
    """Sum mod q, mapped into the width-q window that pads [0, n * Delta] evenly."""
    _check_modulus(q, n, Delta)
    s = int(np.sum(np.asarray(list(residues), dtype=np.int64) % q)) % q
    lo = -((q - n * Delta - 1) // 2)
    return (s - lo) % q + lo


# --- fragmented RAPPOR ---------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RapporParams:
    """One-hot encoding with independent bit flips.

    Attributes:
      f: flip probability in [0, 1/2).
      Delta: number of buckets.
      optimistic: True when f came from a two-dataset check rather than a
        full privacy proof.
    """

    f: float
    Delta: int
    optimistic: bool = False

    def __post_init__(self):
        if not 0 <= self.f < 0.5:
            raise ParameterDomainError(f"flip probability must be in [0, 1/2), got {self.f}")
        if self.Delta < 1:
            raise ParameterDomainError(f"Delta must be positive, got {self.Delta}")


def rappor_randomize(x: int, params: RapporParams, rng: np.random.Generator) -> np.ndarray:
    """Buckets (1-based) whose bit is set after flipping; one message each."""
    _check_x(x, params.Delta)
    bits = np.zeros(params.Delta, dtype=bool)
    if x:
        bits[x - 1] = True
    bits ^= rng.random(params.Delta) < params.f
    return np.flatnonzero(bits) + 1


def rappor_debias(counts: np.ndarray, n: int, f: float) -> np.ndarray:
    """u_hat_j = (c_j - n f) / (1 - 2 f)."""
    return (np.asarray(counts, dtype=np.float64) - n * f) / (1 - 2 * f)


def rappor_analyze(fragments: Iterable[Sequence[int]], n: int, f: float, Delta: int) -> float:
    """sum_j j * u_hat_j from all users' fragments."""
    counts = np.zeros(Delta, dtype=np.int64)
    for frag in fragments:
        idx = np.asarray(frag, dtype=np.int64)
        if idx.size and (idx.min() < 1 or idx.max() > Delta):
            raise InputDomainError("fragment outside buckets 1..Delta")
        np.add.at(counts, idx - 1, 1)
    return float(np.dot(np.arange(1, Delta + 1), rappor_debias(counts, n, f)))


def rappor_pair_divergence(f: float, n: int, epsilon: float,
                           tail_tol: float = dist_lib.DEFAULT_TAIL_TOL) -> float:
    """Divergence between all-zeros data and one user moved to Delta, both ways.

    Only bucket Delta differs: Bin(n, f) against Bin(n - 1, f) + Bern(1 - f).
    """
    if f <= 0:
        return 1.0
    a = dist_lib.binom_dist(n, f, tail_tol)
    b = dist_lib.convolve(dist_lib.binom_dist(n - 1, f, tail_tol), dist_lib.bernoulli(1 - f))
    return max(divergence.hockey_stick(a, b, epsilon), divergence.hockey_stick(b, a, epsilon))


def rappor_calibrate(epsilon: float, delta: float, Delta: int, n: int,
                     iterations: int = 60) -> RapporParams:
    """Smallest flip probability passing the two-dataset check (bisection).

    The result is flagged optimistic: the check covers one explicit pair of
    neighboring datasets, not all of them.

    Raises:
      InfeasibleError: if even f close to 1/2 fails.
    """
    if n < 1 or Delta < 1 or not 0 < delta < 1 or not epsilon > 0:
        raise ParameterDomainError("invalid RAPPOR calibration arguments")
    hi = 0.5 - 1e-9
    if rappor_pair_divergence(hi, n, epsilon) > delta:
        raise InfeasibleError(f"no flip probability below 1/2 reaches delta={delta}")
    lo = 0.0
    for _ in range(iterations):
        mid = (lo + hi) / 2
        if mid == lo or mid == hi:
            break
        if rappor_pair_divergence(mid, n, epsilon) <= delta:
            hi = mid
        else:
            lo = mid
    return RapporParams(hi, Delta, optimistic=True)


def rappor_variance(n: int, f: float, Delta: int) -> float:
    """Var(sum_j j u_hat_j): each bucket count has variance n f (1 - f)."""
    return n * f * (1 - f) / (1 - 2 * f) ** 2 * Delta * (Delta + 1) * (2 * Delta + 1) / 6


def rappor_expected_messages(f: float, Delta: int, nonzero: bool = True) -> float:
    """(1 - f) [x != 0] + f (Delta - [x != 0])."""
    k = 1 if nonzero else 0
    return (1 - f) * k + f * (Delta - k)


def rappor_bits_per_message(Delta: int) -> int:
    return max(1, (Delta - 1).bit_length())


# --- dispatch -----------------------------------------------------------------

def _check_tag(tag: str) -> None:
    if tag not in TAGS:
        raise ConfigurationError(f"unknown algorithm {tag!r}; expected one of {TAGS}")


def baseline_rmse(tag: str, n: int, epsilon: float, delta: float, Delta: int, *,
                  epsilon_star_fraction: float = 0.9,
                  rappor: Optional[RapporParams] = None) -> float:
    """Closed-form RMSE of the sum estimate.

    Args:
      tag: one of TAGS.
      n, epsilon, delta, Delta: instance.
      epsilon_star_fraction: share of epsilon spent on the central noise of
        the correlated-noise protocol.
      rappor: calibrated RAPPOR parameters (calibrated on demand if omitted).
    """
    _check_tag(tag)
    if tag in ("dlap-central", "ikos"):
        return dlap_rmse(epsilon, Delta)
    if tag == "corrnoise":
        return dlap_rmse(epsilon_star_fraction * epsilon, Delta)
    rp = rappor or rappor_calibrate(epsilon, delta, Delta, n)
    return math.sqrt(rappor_variance(n, rp.f, Delta))
