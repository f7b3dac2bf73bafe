"""Discrete distributions used by the protocol and its numeric checks.

Everything here works on finitely-supported pmfs over contiguous integer
ranges (`DiscreteDist`). Negative binomial and discrete Laplace pmfs are
evaluated in log-space, truncated to a stored support whose excluded mass is
bounded by `tail_tol`, and combined by convolution or sign/shift maps.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import signal, special, stats

from corrnoise.errors import CapacityError, ParameterDomainError, TruncationError

DEFAULT_TAIL_TOL = 1e-12
DEFAULT_SIZE_CAP = 1 << 26
# Slack for floating point rounding when checking stored mass against 1.
_MASS_SLACK = 1e-9
_DIRECT_CONVOLVE_LIMIT = 20_000_000

IntArray = Union[int, np.ndarray, Sequence[int]]


@dataclasses.dataclass(frozen=True)
class NegBinParams:
    """Negative binomial NB(r, p) with mass C(k+r-1, k) (1-p)^r p^k.

    Attributes:
      r: shape, any positive real.
      p: in (0, 1); larger p means more noise.
    """

    r: float
    p: float

    def __post_init__(self):
        if not (math.isfinite(self.r) and self.r > 0):
            raise ParameterDomainError(f"NB shape r must be positive, got {self.r}")
        if not 0 < self.p < 1:
            raise ParameterDomainError(f"NB parameter p must lie in (0, 1), got {self.p}")

    @property
    def mean(self) -> float:
        return self.r * self.p / (1 - self.p)

    @property
    def var(self) -> float:
        return self.r * self.p / (1 - self.p) ** 2


@dataclasses.dataclass(frozen=True)
class DLapParams:
    """Discrete Laplace DLap(s) with mass proportional to exp(-s|k|)."""

    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ParameterDomainError(f"DLap scale s must be positive, got {self.s}")

    @property
    def var(self) -> float:
        q = math.exp(-self.s)
        return 2 * q / (1 - q) ** 2


def nb_logpmf(params: NegBinParams, k: IntArray) -> np.ndarray:
    """Log mass of NB(r, p) at k; -inf for negative k."""
    k = np.asarray(k, dtype=np.float64)
    r, p = params.r, params.p
    kk = np.maximum(k, 0.0)
    out = (special.gammaln(kk + r) - special.gammaln(r) - special.gammaln(kk + 1)
           + r * math.log1p(-p) + kk * math.log(p))
    return np.where(k < 0, -np.inf, out)


def nb_pmf(params: NegBinParams, k: IntArray):
    """Mass of NB(r, p) at k.

    The binomial coefficient is the Gamma-function generalization, so
    fractional r is allowed. Uses scipy's incomplete-beta based pmf, which
    keeps relative accuracy near machine precision for k up to 1e6 and
    beyond (a plain log-Gamma difference loses about 1e-11 there).

    Raises:
      ParameterDomainError: if k is negative.
    """
    arr = np.asarray(k)
    if np.any(arr < 0):
        raise ParameterDomainError(f"NB support is the nonnegative integers, got k={k}")
    out = _nb_pmf_array(params, arr)
    return float(out) if out.ndim == 0 else out


def _nb_pmf_array(params: NegBinParams, k: np.ndarray) -> np.ndarray:
    """pmf on any integer array, zero at negative k."""
    k = np.asarray(k)
    out = stats.nbinom.pmf(np.maximum(k, 0), params.r, 1 - params.p)
    return np.where(k < 0, 0.0, out)


def nb_divide(params: NegBinParams, n: int) -> NegBinParams:
    """Per-user share of NB(r, p) split across n users: NB(r/n, p)."""
    if n < 1:
        raise ParameterDomainError(f"cannot divide a distribution into {n} parts")
    return NegBinParams(params.r / n, params.p)


def nb_sample(params: NegBinParams, rng: np.random.Generator, size=None):
    """Draw from NB(r, p) as a Gamma-mixed Poisson.

    lambda ~ Gamma(shape=r, scale=p/(1-p)), k ~ Poisson(lambda). This is exact
    in distribution for every real r > 0, which the per-user shares
    NB(r/n, p) need.
    """
    lam = rng.gamma(params.r, params.p / (1 - params.p), size=size)
    k = rng.poisson(lam)
    return int(k) if size is None else k.astype(np.int64)


def dlap_logpmf(params: DLapParams, k: IntArray) -> np.ndarray:
    s = params.s
    # log((1 - e^-s) / (1 + e^-s))
    log_norm = math.log(-math.expm1(-s)) - math.log1p(math.exp(-s))
    return log_norm - s * np.abs(np.asarray(k, dtype=np.float64))


def dlap_pmf(params: DLapParams, k: IntArray):
    """Mass of DLap(s) at integer k."""
    out = np.exp(dlap_logpmf(params, k))
    return float(out) if out.ndim == 0 else out


@dataclasses.dataclass(frozen=True, eq=False)
class DiscreteDist:
    """A pmf stored on the contiguous range lo, lo+1, ..., lo+len(masses)-1.

    Attributes:
      lo: lowest stored support point.
      masses: nonnegative masses; read-only.
      tail_tol: upper bound on the probability mass outside the stored range.
    """

    lo: int
    masses: np.ndarray
    tail_tol: float = 0.0

    def __post_init__(self):
        m = np.array(self.masses, dtype=np.float64)
        if m.ndim != 1 or m.size == 0:
            raise ParameterDomainError("masses must be a nonempty 1-d sequence")
        if np.any(m < 0) or not np.all(np.isfinite(m)):
            raise ParameterDomainError("masses must be finite and nonnegative")
        if self.tail_tol < 0:
            raise ParameterDomainError(f"tail_tol must be nonnegative, got {self.tail_tol}")
        total = math.fsum(m)
        if total > 1 + _MASS_SLACK or total < 1 - self.tail_tol - _MASS_SLACK:
            raise ParameterDomainError(
                f"stored mass {total!r} outside [1 - {self.tail_tol}, 1]")
        m.setflags(write=False)
        object.__setattr__(self, "lo", int(self.lo))
        object.__setattr__(self, "masses", m)

    @property
    def hi(self) -> int:
        return self.lo + len(self.masses) - 1

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def __len__(self) -> int:
        return len(self.masses)

    @property
    def total_mass(self) -> float:
        return math.fsum(self.masses)

    @property
    def missing_mass(self) -> float:
        """Mass not stored, computed from the stored masses (never negative)."""
        return max(0.0, 1.0 - self.total_mass)

    def pmf(self, k: IntArray):
        k = np.asarray(k, dtype=np.int64)
        idx = k - self.lo
        inside = (idx >= 0) & (idx < len(self.masses))
        out = np.where(inside, self.masses[np.clip(idx, 0, len(self.masses) - 1)], 0.0)
        return float(out) if out.ndim == 0 else out

    @property
    def mean(self) -> float:
        return float(np.dot(self.support, self.masses) / self.total_mass)

    @property
    def var(self) -> float:
        x = self.support - self.mean
        return float(np.dot(x * x, self.masses) / self.total_mass)

    def sample(self, rng: np.random.Generator, size=None):
        probs = self.masses / self.masses.sum()
        return self.lo + rng.choice(len(probs), size=size, p=probs)

    def allclose(self, other: "DiscreteDist", atol: float) -> bool:
        return total_variation(self, other) <= atol


def point_mass(k: int = 0) -> DiscreteDist:
    return DiscreteDist(k, np.ones(1))


def total_variation(a: DiscreteDist, b: DiscreteDist) -> float:
    """Half the l1 distance between the stored masses."""
    lo = min(a.lo, b.lo)
    hi = max(a.hi, b.hi)
    xs = np.arange(lo, hi + 1)
    return 0.5 * math.fsum(np.abs(a.pmf(xs) - b.pmf(xs)))


def truncate(pmf: Callable[[np.ndarray], np.ndarray],
             tail_tol: float = DEFAULT_TAIL_TOL,
             center: int = 0,
             width: int = 64,
             max_width: int = DEFAULT_SIZE_CAP) -> DiscreteDist:
    """Store a pmf on the smallest contiguous range around `center`.

    The pmf is evaluated on a window that doubles until the mass outside it is
    at most tail_tol / 4, after which both ends are trimmed as far as the
    remaining budget allows.

    Args:
      pmf: vectorized pmf over integer arrays, summing to 1 over all integers.
      tail_tol: largest mass allowed outside the stored range.
      center: integer the stored range must contain (use the mode).
      width: initial half-width guess of the window.
      max_width: give up once the half-width exceeds this.

    Raises:
      TruncationError: if the window outgrows max_width.
    """
    if not tail_tol > 0:
        raise ParameterDomainError(f"tail_tol must be positive, got {tail_tol}")
    center = int(center)
    w = max(int(width), 1)
    previous = math.inf
    while True:
        xs = np.arange(center - w, center + w + 1)
        masses = np.asarray(pmf(xs), dtype=np.float64)
        outside = max(0.0, 1.0 - math.fsum(masses))
        if outside <= tail_tol / 4:
            break
        if w > max_width or outside >= previous:
            # a window that stops gaining mass means the pmf is not accurate
            # enough to resolve tail_tol
            raise TruncationError(
                f"pmf still has mass {outside:.3g} outside half-width {w}")
        previous = outside
        w *= 2

    budget = tail_tol - outside
    ci = w
    # left[i]: mass dropped by starting at index i; right[j]: by ending at j.
    left = np.concatenate(([0.0], np.cumsum(masses)))[:-1]
    right = np.concatenate((np.cumsum(masses[::-1])[::-1][1:], [0.0]))
    starts = np.nonzero(left[: ci + 1] <= budget)[0]
    # right is nonincreasing; first admissible end >= ci for each start.
    neg_right = -right[ci:]
    ends = ci + np.searchsorted(neg_right, -(budget - left[starts]), side="left")
    ends = np.minimum(ends, len(masses) - 1)
    best = int(np.argmin(ends - starts))
    i, j = int(starts[best]), int(ends[best])
    return DiscreteDist(center - w + i, masses[i:j + 1], tail_tol=tail_tol)


def nb_dist(params: NegBinParams, tail_tol: float = DEFAULT_TAIL_TOL) -> DiscreteDist:
    """Truncated NB(r, p)."""
    mode = max(0, int(math.floor((params.r - 1) * params.p / (1 - params.p))))
    sd = math.sqrt(params.var)
    width = int(max(64, params.mean - mode + 16 * sd + 64))
    return truncate(lambda k: _nb_pmf_array(params, k), tail_tol,
                    center=mode, width=width)


def dlap_dist(params: DLapParams, tail_tol: float = DEFAULT_TAIL_TOL) -> DiscreteDist:
    """Truncated DLap(s), centered at 0."""
    width = int(max(16, 2 * math.log(2 / tail_tol) / params.s))
    return truncate(lambda k: np.exp(dlap_logpmf(params, k)), tail_tol,
                    center=0, width=width)


def binom_dist(trials: int, prob: float,
               tail_tol: float = DEFAULT_TAIL_TOL) -> DiscreteDist:
    """Truncated Binomial(trials, prob)."""
    from scipy import stats

    if trials < 0 or not 0 <= prob <= 1:
        raise ParameterDomainError(f"invalid binomial ({trials}, {prob})")
    if trials == 0 or prob == 0:
        return point_mass(0)
    if prob == 1:
        return point_mass(trials)
    mode = int(math.floor((trials + 1) * prob))
    mode = min(mode, trials)
    sd = math.sqrt(trials * prob * (1 - prob))
    width = int(16 * sd + 64)
    return truncate(lambda k: stats.binom.pmf(k, trials, prob), tail_tol,
                    center=mode, width=width)


def bernoulli(prob: float) -> DiscreteDist:
    if not 0 <= prob <= 1:
        raise ParameterDomainError(f"invalid Bernoulli probability {prob}")
    return DiscreteDist(0, np.array([1 - prob, prob]))


def convolve(a: DiscreteDist, b: DiscreteDist,
             cap: int = DEFAULT_SIZE_CAP) -> DiscreteDist:
    """Distribution of the sum of independent draws from a and b.

    Raises:
      CapacityError: if the result support would exceed `cap` points.
    """
    size = len(a) + len(b) - 1
    if size > cap:
        raise CapacityError(f"convolution support {size} exceeds cap {cap}")
    if len(a) * len(b) <= _DIRECT_CONVOLVE_LIMIT:
        m = np.convolve(a.masses, b.masses)
    else:
        m = np.clip(signal.fftconvolve(a.masses, b.masses), 0.0, None)
    total = math.fsum(m)
    if total > 1:
        m = m / total
    return DiscreteDist(a.lo + b.lo, m, tail_tol=a.tail_tol + b.tail_tol)


def convolve_power(d: DiscreteDist, n: int, cap: int = DEFAULT_SIZE_CAP) -> DiscreteDist:
    """n-fold convolution of d with itself, by repeated squaring."""
    if n < 1:
        raise ParameterDomainError(f"power must be positive, got {n}")
    result: Optional[DiscreteDist] = None
    base = d
    while n:
        if n & 1:
            result = base if result is None else convolve(result, base, cap)
        n >>= 1
        if n:
            base = convolve(base, base, cap)
    return result


def negate_shift(d: DiscreteDist, sign: int, shift: int) -> DiscreteDist:
    """Distribution of sign * z + shift for z ~ d."""
    if sign not in (1, -1):
        raise ParameterDomainError(f"sign must be +1 or -1, got {sign}")
    if sign == 1:
        return DiscreteDist(d.lo + shift, d.masses, d.tail_tol)
    return DiscreteDist(-d.hi + shift, d.masses[::-1], d.tail_tol)


@dataclasses.dataclass(frozen=True, eq=False)
class JointDist:
    """A pmf over integer vectors, stored as a dense box of masses.

    Attributes:
      lo: lowest coordinate of the box along each axis.
      masses: n-dimensional array of masses.
      tail_tol: upper bound on mass outside the box.
    """

    lo: tuple
    masses: np.ndarray
    tail_tol: float = 0.0

    @property
    def total_mass(self) -> float:
        return math.fsum(self.masses.ravel())

    @property
    def missing_mass(self) -> float:
        return max(0.0, 1.0 - self.total_mass)

    @property
    def size(self) -> int:
        return int(self.masses.size)

    def prob(self, point) -> float:
        idx = tuple(int(x) - int(l) for x, l in zip(point, self.lo))
        if any(i < 0 or i >= s for i, s in zip(idx, self.masses.shape)):
            return 0.0
        return float(self.masses[idx])

    def marginal(self, axis: int) -> DiscreteDist:
        other = tuple(i for i in range(self.masses.ndim) if i != axis)
        m = self.masses.sum(axis=other) if other else self.masses
        return DiscreteDist(self.lo[axis], m, tail_tol=self.tail_tol)

    def linear_image(self, weights: Sequence[int]) -> DiscreteDist:
        """Distribution of sum_i weights[i] * x_i for x drawn from this box."""
        grids = np.meshgrid(*[np.arange(l, l + s) for l, s in zip(self.lo, self.masses.shape)],
                            indexing="ij")
        vals = sum(int(w) * g for w, g in zip(weights, grids))
        lo = int(vals.min())
        m = np.bincount((vals - lo).ravel(), weights=self.masses.ravel())
        return DiscreteDist(lo, m, tail_tol=self.tail_tol)
