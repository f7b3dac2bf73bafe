"""Hockey-stick divergence and (epsilon, delta) checks for additive noise.

Two routes compute the divergence of a shifted distribution:

* enumeration over stored pmfs (`hockey_stick`, `shift_divergence`), which
  works for any `DiscreteDist` and adds the truncated tail as a conservative
  correction, and
* a CDF route for negative binomial noise (`nb_shift_divergence`), which uses
  that the NB privacy loss ln P(v) - ln P(v - k) is monotone in v, so the
  region where it exceeds epsilon is a half-line.

Product distributions are handled exactly by `product_hockey_stick` or bounded
by basic composition (`composition_bound`).
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special, stats

from corrnoise import dist as dist_lib
from corrnoise.dist import DiscreteDist, JointDist, NegBinParams
from corrnoise.errors import CapacityError, ConfigurationError, ParameterDomainError

DEFAULT_PRODUCT_CAP = 10_000_000

Noise = Union[DiscreteDist, NegBinParams]


class Method(str, enum.Enum):
    EXACT = "exact"
    COMPOSITION = "composition"
    MONTE_CARLO = "monte_carlo"
    AUTO = "auto"


@dataclasses.dataclass(frozen=True)
class ShiftedFactor:
    """One coordinate of a product distribution and the shift applied to it."""

    dist: Noise
    shift: int


@dataclasses.dataclass(frozen=True)
class DpCheckReport:
    """Outcome of a numeric privacy check.

    Attributes:
      epsilon: privacy level the divergence was evaluated at.
      delta_bound: largest divergence found (an upper bound unless the method
        is Monte Carlo, in which case it is an estimate).
      method: "exact", "composition" or "monte_carlo".
      worst_shift: shift (scalar checks) or column pair (linear queries)
        attaining delta_bound.
      certified: False when delta_bound is only a sampling estimate.
    """

    epsilon: float
    delta_bound: float
    method: str
    worst_shift: object = None
    certified: bool = True

    def __post_init__(self):
        object.__setattr__(self, "delta_bound", float(self.delta_bound))
        if self.delta_bound < 0:
            raise ParameterDomainError(f"delta_bound must be nonnegative, got {self.delta_bound}")

    def passes(self, delta: float) -> bool:
        return self.certified and self.delta_bound <= delta


def _box(d):
    if isinstance(d, DiscreteDist):
        return (d.lo,), d.masses, d.missing_mass, d.tail_tol
    if isinstance(d, JointDist):
        return tuple(d.lo), d.masses, d.missing_mass, d.tail_tol
    raise ConfigurationError(f"unsupported distribution type {type(d).__name__}")


def _restrict(lo_target, shape, lo_src, m_src) -> np.ndarray:
    """Masses of the source box on the target box (zero outside the source)."""
    out = np.zeros(shape)
    src, dst = [], []
    for lt, s, ls, ss in zip(lo_target, shape, lo_src, m_src.shape):
        a = max(lt, ls)
        b = min(lt + s, ls + ss)
        if a >= b:
            return out
        dst.append(slice(a - lt, b - lt))
        src.append(slice(a - ls, b - ls))
    out[tuple(dst)] = m_src[tuple(src)]
    return out


def hockey_stick(d1, d2, epsilon: float, target_delta: Optional[float] = None) -> float:
    """d_eps(d1 || d2) = sum_v [P1(v) - e^eps P2(v)]_+ plus d1's missing mass.

    Works for `DiscreteDist` and for `JointDist` pairs of the same dimension.

    Args:
      d1, d2: the two distributions.
      epsilon: nonnegative privacy level; math.inf is allowed.
      target_delta: if given, both truncation tolerances must be at most
        target_delta / 100 so that truncation cannot dominate the answer.

    Raises:
      ConfigurationError: on dimension mismatch or tolerances too coarse for
        target_delta.
    """
    if epsilon < 0:
        raise ParameterDomainError(f"epsilon must be nonnegative, got {epsilon}")
    lo1, m1, missing1, tol1 = _box(d1)
    lo2, m2, _, tol2 = _box(d2)
    if len(lo1) != len(lo2):
        raise ConfigurationError("distributions have different dimensions")
    if target_delta is not None and max(tol1, tol2) > target_delta / 100:
        raise ConfigurationError(
            f"tail_tol {max(tol1, tol2):g} too coarse for target delta {target_delta:g}")
    p2 = _restrict(lo1, m1.shape, lo2, m2)
    if math.isinf(epsilon):
        diff = np.where(p2 > 0, 0.0, m1)
    else:
        diff = np.maximum(m1 - math.exp(epsilon) * p2, 0.0)
    return float(np.sum(diff)) + missing1


def shift_divergence(d: Noise, k: int, epsilon: float) -> float:
    """d_eps(D || k + D)."""
    if k == 0:
        return 0.0
    if isinstance(d, NegBinParams):
        return nb_shift_divergence(d, k, epsilon)
    return hockey_stick(d, dist_lib.negate_shift(d, 1, k), epsilon)


def _nb_loss(params: NegBinParams, k: int, v: int) -> float:
    """ln P(v) - ln P(v - k) for NB; +inf where P(v - k) = 0."""
    if v < 0:
        return -math.inf
    if v - k < 0:
        return math.inf
    r = params.r
    return (special.gammaln(v + r) - special.gammaln(v - k + r)
            - special.gammaln(v + 1) + special.gammaln(v - k + 1)
            + k * math.log(params.p))


def _last_true(pred, lo: int) -> int:
    """Largest v >= lo with pred(v), for pred true then false; lo - 1 if none."""
    if not pred(lo):
        return lo - 1
    step = 1
    hi = lo + step
    while pred(hi):
        lo = hi
        step *= 2
        hi = lo + step
    # pred(lo) true, pred(hi) false
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pred(mid):
            lo = mid
        else:
            hi = mid
    return lo


def nb_shift_divergence(params: NegBinParams, k: int, epsilon: float) -> float:
    """Exact d_eps(NB(r, p) || k + NB(r, p)) from CDFs.

    The loss v -> ln P(v) - ln P(v - k) is monotone: decreasing for r > 1,
    increasing for r < 1, constant for r = 1 (on the points where both masses
    are positive). The set where it exceeds epsilon is therefore an interval
    touching 0 or infinity, and the divergence is a difference of two CDF
    values.
    """
    if k == 0:
        return 0.0
    if epsilon < 0:
        raise ParameterDomainError(f"epsilon must be nonnegative, got {epsilon}")
    nb = stats.nbinom(params.r, 1 - params.p)
    e = math.exp(epsilon) if math.isfinite(epsilon) else math.inf
    r = params.r

    def bound(x):
        return float(max(0.0, min(1.0, x)))

    if k > 0:
        # v < k always counts (the shifted pmf is zero there).
        if r <= 1 or _nb_loss(params, k, k) <= epsilon:
            return bound(nb.cdf(k - 1))
        v_star = _last_true(lambda v: _nb_loss(params, k, v) > epsilon, k)
        return bound(nb.cdf(v_star) - e * nb.cdf(v_star - k))

    m = -k
    limit = -m * math.log(params.p)  # loss as v -> infinity
    if r == 1:
        return bound(1 - e * nb.sf(m - 1)) if limit > epsilon else 0.0
    if r > 1:
        # increasing towards `limit`
        if limit <= epsilon:
            return 0.0
        first = _last_true(lambda v: _nb_loss(params, k, v) <= epsilon, 0) + 1
        return bound(nb.sf(first - 1) - e * nb.sf(first + m - 1))
    # r < 1: decreasing towards `limit`
    if limit > epsilon:
        return bound(1 - e * nb.sf(m - 1))
    last = _last_true(lambda v: _nb_loss(params, k, v) > epsilon, 0)
    if last < 0:
        return 0.0
    return bound(nb.cdf(last) - e * (nb.cdf(last + m) - nb.cdf(m - 1)))


def dp_check_noise_addition(d: Noise, Delta: int, epsilon: float) -> DpCheckReport:
    """Largest d_eps(D || k + D) over shifts k in [-Delta, Delta].

    A D-noise addition mechanism for Delta-summation is (epsilon, delta)-DP iff
    this bound is at most delta. NB noise goes through the CDF route, anything
    else through enumeration.
    """
    if Delta < 1:
        raise ParameterDomainError(f"Delta must be positive, got {Delta}")
    best, worst = -1.0, 0
    for k in range(-Delta, Delta + 1):
        v = shift_divergence(d, k, epsilon)
        if v > best:
            best, worst = v, k
    return DpCheckReport(epsilon, max(best, 0.0), Method.EXACT.value, worst)


def composition_bound(factors: Sequence[ShiftedFactor],
                      epsilon_alloc: Sequence[float]) -> float:
    """Basic-composition bound sum_i d_{eps_i}(D_i || k_i + D_i).

    Upper-bounds the product divergence at epsilon = sum(epsilon_alloc).
    """
    if len(factors) != len(epsilon_alloc):
        raise ConfigurationError(
            f"{len(factors)} factors but {len(epsilon_alloc)} epsilon shares")
    if any(e < 0 for e in epsilon_alloc):
        raise ParameterDomainError("epsilon shares must be nonnegative")
    return math.fsum(shift_divergence(f.dist, f.shift, e)
                     for f, e in zip(factors, epsilon_alloc))


def product_hockey_stick(pairs: Sequence[tuple], epsilon: float,
                         cap: int = DEFAULT_PRODUCT_CAP) -> float:
    """Exact d_eps(prod_i P_i || prod_i Q_i) for independent coordinates.

    All factors but the largest are enumerated jointly; for the largest one the
    points are sorted by privacy loss so that, for every enumerated prefix, the
    points pushing the total loss above epsilon form a prefix summed by a
    binary search. The result is exact over the stored supports; the missing
    mass of prod_i P_i is added as a conservative correction.

    Args:
      pairs: sequence of (P_i, Q_i) `DiscreteDist` pairs.
      epsilon: privacy level.
      cap: largest allowed size of the jointly enumerated part.

    Raises:
      CapacityError: if the enumerated part exceeds `cap` points.
    """
    if not pairs:
        return 0.0
    coords = []
    stored = 1.0
    for p_dist, q_dist in pairs:
        keep = p_dist.masses > 0
        xs = p_dist.support[keep]
        p = p_dist.masses[keep]
        q = np.asarray(q_dist.pmf(xs), dtype=np.float64)
        coords.append((p, q))
        stored *= p_dist.total_mass
    missing = max(0.0, 1.0 - stored)
    order = sorted(range(len(coords)), key=lambda i: len(coords[i][0]))
    last = coords[order[-1]]
    rest = [coords[i] for i in order[:-1]]
    size = math.prod(len(c[0]) for c in rest)
    if size > cap:
        raise CapacityError(
            f"joint enumeration of {size} points exceeds cap {cap}; "
            "use composition_bound or a Monte Carlo estimate")

    with np.errstate(divide="ignore"):
        p_rest = np.ones(1)
        q_rest = np.ones(1)
        for p, q in rest:
            p_rest = np.outer(p_rest, p).ravel()
            q_rest = np.outer(q_rest, q).ravel()
        loss_rest = np.log(p_rest) - np.log(q_rest)
        p_last, q_last = last
        loss_last = np.log(p_last) - np.log(q_last)

    order_last = np.argsort(-loss_last, kind="stable")
    sl = loss_last[order_last]
    cum_p = np.concatenate(([0.0], np.cumsum(p_last[order_last])))
    cum_q = np.concatenate(([0.0], np.cumsum(q_last[order_last])))
    thresholds = epsilon - loss_rest
    # count of last-coordinate points with loss > threshold
    counts = np.searchsorted(-sl, -thresholds, side="left")
    counts = np.where(np.isneginf(thresholds) | np.isnan(thresholds), len(sl), counts)
    if math.isinf(epsilon):
        terms = np.where(q_rest == 0, p_rest * cum_p[-1],
                         p_rest * (cum_p[-1] - _mass_where_q_positive(p_last, q_last)))
    else:
        terms = p_rest * cum_p[counts] - math.exp(epsilon) * q_rest * cum_q[counts]
    return float(np.sum(np.maximum(terms, 0.0))) + missing


def _mass_where_q_positive(p, q) -> float:
    return float(np.sum(p[q > 0]))


def product_divergence_exact(factors: Sequence[ShiftedFactor], epsilon: float,
                             cap: int = DEFAULT_PRODUCT_CAP,
                             tail_tol: float = dist_lib.DEFAULT_TAIL_TOL) -> float:
    """Exact d_eps(prod_i D_i || prod_i (k_i + D_i)).

    Factors with zero shift are identical on both sides and drop out.
    """
    pairs = []
    for f in factors:
        if f.shift == 0:
            continue
        d = f.dist
        if isinstance(d, NegBinParams):
            d = dist_lib.nb_dist(d, tail_tol)
        pairs.append((d, dist_lib.negate_shift(d, 1, f.shift)))
    return product_hockey_stick(pairs, epsilon, cap)


def _as_dist(noise, tail_tol, cache, i) -> DiscreteDist:
    if i not in cache:
        if noise is None:
            cache[i] = dist_lib.point_mass(0)
        elif isinstance(noise, NegBinParams):
            cache[i] = dist_lib.nb_dist(noise, tail_tol)
        else:
            cache[i] = noise
    return cache[i]


def _composition_weights(shifts, noise, tprime):
    weights = []
    for i, k in shifts:
        if tprime is not None:
            w = abs(k) / tprime[i]
        elif isinstance(noise[i], NegBinParams):
            # p_i = exp(-c / t'_i), so 1 / t'_i is proportional to -ln p_i
            w = abs(k) * -math.log(noise[i].p)
        else:
            w = abs(k)
        weights.append(w)
    return weights


def _monte_carlo_delta(factors, noise, epsilon, rng, samples) -> float:
    loss = np.zeros(samples)
    for i, k in factors:
        params = noise[i]
        if params is None:
            return 1.0
        x = dist_lib.nb_sample(params, rng, size=samples)
        shifted = x - k
        with np.errstate(divide="ignore"):
            lq = np.where(shifted < 0, -np.inf, dist_lib.nb_logpmf(params, np.maximum(shifted, 0)))
        loss += dist_lib.nb_logpmf(params, x) - lq
    with np.errstate(over="ignore"):
        vals = np.maximum(0.0, 1.0 - np.exp(epsilon - loss))
    return float(vals.mean())


def linear_query_check(Q, noise: Sequence[Optional[Noise]], epsilon: float,
                       method: Union[str, Method] = Method.AUTO,
                       tprime: Optional[Sequence[float]] = None,
                       cap: int = DEFAULT_PRODUCT_CAP,
                       tail_tol: float = dist_lib.DEFAULT_TAIL_TOL,
                       rng: Optional[np.random.Generator] = None,
                       samples: int = 200_000) -> DpCheckReport:
    """Privacy of the noise-addition mechanism for a Q-linear query.

    Each user contributes one column of Q or the zero vector. For every
    unordered pair of distinct columns (the zero column included) the
    divergence between the unshifted noise product and the product shifted by
    the column difference is evaluated in both orientations.

    Args:
      Q: integer matrix, one row per noise coordinate.
      noise: per-row noise, NB parameters or a stored pmf; None means no noise.
      epsilon: privacy level.
      method: "exact" (joint enumeration, raises CapacityError when too big),
        "composition" (basic composition with epsilon split proportional to
        |shift_i| / t'_i), "monte_carlo" (sampled privacy loss; an estimate,
        never a certificate) or "auto" (exact when at most three coordinates
        move and the enumeration fits, composition otherwise).
      tprime: per-row domination weights used for the composition split; when
        omitted they are inferred from the NB parameters.
      cap: enumeration cap for the exact route.
      tail_tol: truncation tolerance for stored pmfs.
      rng: random source, required for Monte Carlo.
      samples: Monte Carlo sample size.

    Returns:
      DpCheckReport with the worst column pair as `worst_shift`.
    """
    method = Method(method)
    Q = np.asarray(Q, dtype=np.int64)
    if Q.ndim != 2:
        raise ConfigurationError("Q must be a 2-d integer matrix")
    if len(noise) != Q.shape[0]:
        raise ConfigurationError(f"Q has {Q.shape[0]} rows but noise has {len(noise)} entries")
    if method is Method.MONTE_CARLO and rng is None:
        raise ConfigurationError("Monte Carlo checks need a random source")

    cols = [np.zeros(Q.shape[0], dtype=np.int64)] + [Q[:, j] for j in range(Q.shape[1])]
    seen = {}
    for idx, c in enumerate(cols):
        seen.setdefault(tuple(c.tolist()), idx - 1)  # -1 labels the implicit zero column
    unique = [(label, np.array(key)) for key, label in seen.items()]

    cache = {}
    best, worst = 0.0, None
    used = set()
    for (ja, ca), (jb, cb) in itertools.combinations(unique, 2):
        diff = ca - cb
        for sign in (1, -1):
            shifts = [(i, int(sign * diff[i])) for i in np.nonzero(diff)[0]]
            if any(noise[i] is None for i, _ in shifts):
                value, how = 1.0, Method.EXACT
            elif method is Method.MONTE_CARLO:
                value, how = _monte_carlo_delta(shifts, noise, epsilon, rng, samples), method
            else:
                how = method
                if method is Method.AUTO:
                    how = Method.COMPOSITION
                    if len(shifts) <= 3:
                        dists = [_as_dist(noise[i], tail_tol, cache, i) for i, _ in shifts]
                        sizes = sorted(len(d) for d in dists)
                        if math.prod(sizes[:-1]) <= cap:
                            how = Method.EXACT
                if how is Method.EXACT:
                    factors = [ShiftedFactor(_as_dist(noise[i], tail_tol, cache, i), k)
                               for i, k in shifts]
                    value = product_divergence_exact(factors, epsilon, cap)
                else:
                    weights = _composition_weights(shifts, noise, tprime)
                    total = math.fsum(weights)
                    alloc = [epsilon * w / total for w in weights]
                    factors = [ShiftedFactor(noise[i], k) for i, k in shifts]
                    value = composition_bound(factors, alloc)
            used.add(how)
            if value > best or worst is None:
                best = max(best, value)
                worst = (ja, jb) if sign == 1 else (jb, ja)

    if Method.MONTE_CARLO in used:
        label = Method.MONTE_CARLO.value
    elif Method.COMPOSITION in used:
        label = Method.COMPOSITION.value
    else:
        label = Method.EXACT.value
    return DpCheckReport(epsilon, best, label, worst,
                         certified=Method.MONTE_CARLO not in used)
