"""Correlated-noise randomizer, shuffler, analyzer and the central equivalent.

A run is represented by its count vector u, indexed by the message values
-Delta..-1, 1..Delta: the shuffled multiset carries no information beyond it.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

from corrnoise import dist as dist_lib
from corrnoise.atoms import AtomSystem, NoiseAtom, build_right_inverse, message_values
from corrnoise.dist import DiscreteDist, JointDist, NegBinParams
from corrnoise.errors import (CapacityError, ConfigurationError, EncodingError,
                              InputDomainError, ParameterDomainError)

DEFAULT_JOINT_CAP = 10_000_000


def value_index(v: int, Delta: int) -> int:
    """Position of message value v in a u vector."""
    if v == 0 or abs(v) > Delta:
        raise InputDomainError(f"message {v} outside [-{Delta}, {Delta}] \\ {{0}}")
    return v + Delta if v < 0 else v + Delta - 1


@dataclasses.dataclass(frozen=True)
class ProtocolParams:
    """A calibrated protocol instance.

    Attributes:
      Delta: input range bound.
      n: number of users the noise is split across.
      central: distribution of z+ and z- in total over all users; None
        disables it.
      atom_noise: per atom, the NB components whose copies are all emitted on
        that atom (the {-1, +1} atom usually carries two). An empty tuple means
        the atom gets no noise.
      sys: the atom system.
    """

    Delta: int
    n: int
    central: Optional[NegBinParams]
    atom_noise: Mapping[NoiseAtom, Tuple[NegBinParams, ...]]
    sys: AtomSystem

    def __post_init__(self):
        if self.n < 1:
            raise ParameterDomainError(f"n must be positive, got {self.n}")
        if self.sys.Delta != self.Delta:
            raise ConfigurationError("atom system built for a different Delta")
        missing = [str(a) for a in self.sys.atoms if a not in self.atom_noise]
        if missing:
            raise ConfigurationError(f"no noise entry for atoms {missing}")

    @classmethod
    def noiseless(cls, Delta: int, n: int, sys: Optional[AtomSystem] = None) -> "ProtocolParams":
        """Every noise source replaced by a point mass at zero (test mode)."""
        sys = sys or build_right_inverse(Delta)
        return cls(Delta, n, None, {a: () for a in sys.atoms}, sys)

    def components(self) -> List[Tuple[np.ndarray, NegBinParams]]:
        """(direction in u-space, total NB) for every noise source."""
        width = 2 * self.Delta
        out = []
        if self.central is not None:
            for v in (1, -1):
                a = np.zeros(width, dtype=np.int64)
                a[value_index(v, self.Delta)] = 1
                out.append((a, self.central))
        for atom in self.sys.atoms:
            a = np.zeros(width, dtype=np.int64)
            for v, c in atom.counts.items():
                a[value_index(v, self.Delta)] += c
            for params in self.atom_noise[atom]:
                out.append((a, params))
        return out


@dataclasses.dataclass(frozen=True, eq=False)
class MessageBag:
    """Multiset of messages as its count vector u."""

    Delta: int
    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.int64)
        if u.shape != (2 * self.Delta,) or (u < 0).any():
            raise ConfigurationError("u must be a nonnegative vector of length 2 * Delta")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @classmethod
    def empty(cls, Delta: int) -> "MessageBag":
        return cls(Delta, np.zeros(2 * Delta, dtype=np.int64))

    @classmethod
    def from_counts(cls, Delta: int, counts: Mapping[int, int]) -> "MessageBag":
        u = np.zeros(2 * Delta, dtype=np.int64)
        for v, c in counts.items():
            u[value_index(v, Delta)] += c
        return cls(Delta, u)

    @property
    def counts(self) -> Dict[int, int]:
        return {v: int(c) for v, c in zip(message_values(self.Delta), self.u) if c}

    @property
    def total(self) -> int:
        return int(self.u.sum())

    def messages(self) -> List[int]:
        """Messages in canonical order (any order is an equally valid shuffle)."""
        return [v for v, c in zip(message_values(self.Delta), self.u) for _ in range(int(c))]

    def __add__(self, other: "MessageBag") -> "MessageBag":
        if other.Delta != self.Delta:
            raise ConfigurationError("cannot merge bags for different Delta")
        return MessageBag(self.Delta, self.u + other.u)

    def __eq__(self, other) -> bool:
        return (isinstance(other, MessageBag) and other.Delta == self.Delta
                and np.array_equal(self.u, other.u))

    def __repr__(self) -> str:
        return f"MessageBag({self.counts})"


@dataclasses.dataclass(frozen=True)
class Histogram:
    """Counts of each input value 1..Delta (zeros are implicit)."""

    Delta: int
    counts: Tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != self.Delta or any(c < 0 for c in counts):
            raise InputDomainError("histogram needs Delta nonnegative counts")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_inputs(cls, xs: Iterable[int], Delta: int) -> "Histogram":
        h = [0] * Delta
        for x in xs:
            _check_input(x, Delta)
            if x:
                h[x - 1] += 1
        return cls(Delta, tuple(h))

    def ext(self) -> np.ndarray:
        """h extended to u-space (zero on negative values)."""
        u = np.zeros(2 * self.Delta, dtype=np.int64)
        u[self.Delta:] = self.counts
        return u

    @property
    def total(self) -> int:
        return sum(i * c for i, c in enumerate(self.counts, 1))


@dataclasses.dataclass(frozen=True)
class NoiseDraw:
    """Realized noise: z+, z- and per-atom copy counts (components summed)."""

    z_plus: int
    z_minus: int
    z_atoms: Tuple[int, ...]

    def __add__(self, other: "NoiseDraw") -> "NoiseDraw":
        return NoiseDraw(self.z_plus + other.z_plus, self.z_minus + other.z_minus,
                         tuple(a + b for a, b in zip(self.z_atoms, other.z_atoms)))


def _check_input(x, Delta: int) -> None:
    if isinstance(x, bool) or not isinstance(x, (int, np.integer)) or not 0 <= x <= Delta:
        raise InputDomainError(f"input {x!r} outside {{0, ..., {Delta}}}")


def _draw(params: Optional[NegBinParams], divisor: int, rng) -> int:
    if params is None:
        return 0
    return int(dist_lib.nb_sample(dist_lib.nb_divide(params, divisor), rng))


def draw_noise(params: ProtocolParams, rng: np.random.Generator, divisor: int = 1) -> NoiseDraw:
    """Sample z+, z- and the atom copy counts, each NB divided by `divisor`."""
    zp = _draw(params.central, divisor, rng)
    zm = _draw(params.central, divisor, rng)
    za = tuple(sum(_draw(c, divisor, rng) for c in params.atom_noise[a])
               for a in params.sys.atoms)
    return NoiseDraw(zp, zm, za)


def _apply(h_ext: np.ndarray, draw: NoiseDraw, params: ProtocolParams) -> np.ndarray:
    u = h_ext.copy()
    u[value_index(1, params.Delta)] += draw.z_plus
    u[value_index(-1, params.Delta)] += draw.z_minus
    for atom, z in zip(params.sys.atoms, draw.z_atoms):
        if z:
            for v, c in atom.counts.items():
                u[value_index(v, params.Delta)] += c * z
    return u


def randomize(x: int, params: ProtocolParams, rng: np.random.Generator,
              return_draw: bool = False):
    """One user's messages: x (if nonzero), its share of z+/z-, its atom copies.

    Returns:
      The user's MessageBag, or (bag, NoiseDraw) with `return_draw`.
    """
    _check_input(x, params.Delta)
    draw = draw_noise(params, rng, divisor=params.n)
    h = np.zeros(2 * params.Delta, dtype=np.int64)
    if x:
        h[value_index(x, params.Delta)] = 1
    bag = MessageBag(params.Delta, _apply(h, draw, params))
    return (bag, draw) if return_draw else bag


def shuffle_round(inputs: Sequence[int], params: ProtocolParams, rng: np.random.Generator,
                  return_draws: bool = False):
    """All users randomize; the shuffler's output is the merged count vector.

    With `return_draws` the summed per-user noise is returned as well, so that
    `central_run` can be fed exactly the same totals.
    """
    if len(inputs) != params.n:
        raise ConfigurationError(f"expected {params.n} inputs, got {len(inputs)}")
    bag = MessageBag.empty(params.Delta)
    total = NoiseDraw(0, 0, (0,) * len(params.sys.atoms))
    for x in inputs:
        b, d = randomize(x, params, rng, return_draw=True)
        bag = bag + b
        total = total + d
    return (bag, total) if return_draws else bag


def analyze(bag: MessageBag) -> int:
    """Sum of all messages."""
    return int(np.dot(message_values(bag.Delta), bag.u))


def central_run(h: Histogram, params: ProtocolParams, rng: Optional[np.random.Generator] = None,
                draw: Optional[NoiseDraw] = None) -> MessageBag:
    """u = h_ext + z+ e_1 + z- e_-1 + A z with full (undivided) noise.

    Args:
      h: input histogram.
      params: protocol parameters.
      rng: random source, used when `draw` is not given.
      draw: pre-drawn noise totals (for coupling with `shuffle_round`).
    """
    if h.Delta != params.Delta:
        raise ConfigurationError("histogram and params disagree on Delta")
    if sum(h.counts) > params.n:
        raise InputDomainError("histogram has more users than n")
    if draw is None:
        if rng is None:
            raise ConfigurationError("central_run needs rng or draw")
        draw = draw_noise(params, rng)
    return MessageBag(params.Delta, _apply(h.ext(), draw, params))


def simulate_rounds(inputs: Sequence[int], params: ProtocolParams, rounds: int,
                    rng: np.random.Generator, chunk_users: int = 2_000_000) -> np.ndarray:
    """Count vectors of many independent rounds, drawn user by user.

    Every user draws each noise component from NB(r/n, p) and the per-user
    draws are summed, which is what the shuffler hands the analyzer. This is
    the vectorized form of `shuffle_round` for large experiments.

    Returns:
      Integer array of shape (rounds, 2 * Delta).
    """
    if len(inputs) != params.n:
        raise ConfigurationError(f"expected {params.n} inputs, got {len(inputs)}")
    h = Histogram.from_inputs(inputs, params.Delta).ext()
    out = np.tile(h, (rounds, 1))
    step = max(1, chunk_users // params.n)
    for direction, comp in params.components():
        share = dist_lib.nb_divide(comp, params.n)
        for start in range(0, rounds, step):
            stop = min(rounds, start + step)
            z = dist_lib.nb_sample(share, rng, size=(stop - start, params.n)).sum(axis=1)
            out[start:stop] += z[:, None] * direction[None, :]
    return out


def simulate_users(xs: np.ndarray, params: ProtocolParams,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized `randomize` over many users.

    Returns:
      (messages per user, total count vector over all simulated users).
    """
    xs = np.asarray(xs, dtype=np.int64)
    if ((xs < 0) | (xs > params.Delta)).any():
        raise InputDomainError("inputs outside {0, ..., Delta}")
    per_user = (xs != 0).astype(np.int64)
    u = np.zeros(2 * params.Delta, dtype=np.int64)
    for v in range(1, params.Delta + 1):
        u[value_index(v, params.Delta)] = int((xs == v).sum())
    for direction, comp in params.components():
        z = dist_lib.nb_sample(dist_lib.nb_divide(comp, params.n), rng, size=len(xs))
        per_user += int(direction.sum()) * z
        u += int(z.sum()) * direction
    return per_user, u


def _convolve_along(masses: np.ndarray, lo: List[int], direction: np.ndarray,
                    noise: DiscreteDist, cap: int):
    if noise.lo < 0:
        raise ConfigurationError("noise counts must be nonnegative")
    span = len(noise) - 1
    shape = tuple(int(s + span * d) for s, d in zip(masses.shape, direction))
    if math.prod(shape) > cap:
        raise CapacityError(f"joint support {shape} exceeds cap {cap}")
    out = np.zeros(shape)
    for z, w in enumerate(noise.masses):
        if w == 0:
            continue
        idx = tuple(slice(int(z * d), int(z * d) + s) for d, s in zip(direction, masses.shape))
        out[idx] += w * masses
    return out, [int(l + noise.lo * d) for l, d in zip(lo, direction)]


def exact_output_dist(h: Histogram, params: ProtocolParams,
                      tail_tol: float = dist_lib.DEFAULT_TAIL_TOL,
                      cap: int = DEFAULT_JOINT_CAP) -> JointDist:
    """Exact distribution of the central output u over truncated noise supports.

    Each noise source is truncated to `tail_tol` and convolved along its
    direction in u-space; the stored mass is at least 1 minus the summed tails.

    Raises:
      CapacityError: if the dense joint array would exceed `cap` cells.
    """
    masses = np.ones((1,) * (2 * params.Delta))
    lo = [int(v) for v in h.ext()]
    total_tol = 0.0
    for direction, comp in params.components():
        noise = dist_lib.nb_dist(comp, tail_tol)
        total_tol += noise.tail_tol
        masses, lo = _convolve_along(masses, lo, direction, noise, cap)
    return JointDist(tuple(lo), masses, tail_tol=total_tol)


def randomized_round(x: float, Delta: int, rng: np.random.Generator) -> int:
    """Unbiased rounding of x * Delta to an integer in {0, ..., Delta}."""
    return int(randomized_round_many(np.array([x]), Delta, rng)[0])


def randomized_round_many(xs: np.ndarray, Delta: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized `randomized_round`."""
    xs = np.asarray(xs, dtype=np.float64)
    if np.isnan(xs).any() or (xs < 0).any() or (xs > 1).any():
        raise InputDomainError("real inputs must lie in [0, 1]")
    scaled = xs * Delta
    base = np.floor(scaled)
    up = rng.random(xs.shape) < (scaled - base)
    return np.minimum(base.astype(np.int64) + up, Delta)


def real_delta_levels(n: int, epsilon: float, zeta: float) -> int:
    """Delta = ceil((epsilon / 2) sqrt(n / zeta))."""
    if n < 1 or epsilon <= 0 or not 0 < zeta < 1:
        raise ParameterDomainError("need n >= 1, epsilon > 0 and zeta in (0, 1)")
    return max(1, math.ceil(epsilon / 2 * math.sqrt(n / zeta)))


def real_mse_bound(epsilon: float, zeta: float) -> float:
    return 2 / ((1 - zeta) ** 2 * epsilon ** 2)


def real_round_trip(xs: Sequence[float], epsilon: float, delta: float, zeta: float,
                    rng: np.random.Generator, simulator: str = "central",
                    noiseless: bool = False, trials: int = 1) -> np.ndarray:
    """Private estimate of sum(xs) for xs in [0, 1].

    Inputs are rounded to {0, ..., Delta} and summed by the Delta-summation
    protocol calibrated with gamma = zeta / 2; the integer result is divided
    by Delta.

    Args:
      xs: real inputs.
      epsilon, delta, zeta: privacy and accuracy parameters.
      rng: random source.
      simulator: "central" (equivalent central run, fast) or "shuffle" (every
        user randomizes).
      noiseless: disable all noise (rounding still applies).
      trials: independent repetitions.

    Returns:
      Array of `trials` estimates.
    """
    from corrnoise import calibration  # calibration depends on this module

    xs = np.asarray(xs, dtype=np.float64)
    n = len(xs)
    Delta = real_delta_levels(n, epsilon, zeta)
    if noiseless:
        params = ProtocolParams.noiseless(Delta, n)
    else:
        params = calibration.dsum_params(epsilon, delta, zeta / 2, Delta, n,
                                         certify=False).params
    return _dsum_trials(xs, params, rng, simulator, trials) / Delta


def _dsum_trials(xs: np.ndarray, params: ProtocolParams, rng: np.random.Generator,
                 simulator: str, trials: int) -> np.ndarray:
    out = np.empty(trials)
    for t in range(trials):
        ys = randomized_round_many(xs, params.Delta, rng)
        if simulator == "central":
            h = np.bincount(ys, minlength=params.Delta + 1)[1:]
            out[t] = analyze(central_run(Histogram(params.Delta, tuple(h)), params, rng))
        elif simulator == "shuffle":
            out[t] = analyze(MessageBag(params.Delta,
                                        simulate_rounds(ys.tolist(), params, 1, rng)[0]))
        else:
            raise ConfigurationError(f"unknown simulator {simulator!r}")
    return out


def sparse_round_trip(vs, epsilon: float, delta: float, zeta: float,
                      rng: np.random.Generator, noiseless: bool = False,
                      simulator: str = "central") -> np.ndarray:
    """Private sum of 1-sparse vectors with entries in [0, 1].

    Each coordinate runs its own real-summation pipeline at (epsilon/2,
    delta/2); messages are tagged with their coordinate and the analyzer sums
    per tag.

    Raises:
      InputDomainError: if a vector has more than one nonzero entry or an
        entry outside [0, 1].
    """
    vs = np.asarray(vs, dtype=np.float64)
    if vs.ndim != 2:
        raise InputDomainError("expected an (n, d) array of vectors")
    if ((vs != 0).sum(axis=1) > 1).any():
        raise InputDomainError("every input vector must be 1-sparse")
    return np.array([real_round_trip(vs[:, j], epsilon / 2, delta / 2, zeta, rng,
                                     simulator=simulator, noiseless=noiseless)[0]
                     for j in range(vs.shape[1])])


def message_bits(Delta: int) -> int:
    """ceil(log2 Delta) + 1."""
    return (Delta - 1).bit_length() + 1


def sparse_message_bits(Delta: int, d: int) -> int:
    """Coordinate tag of ceil(log2 d) bits plus the value encoding."""
    return (d - 1).bit_length() + message_bits(Delta)


def encode_message(m: int, Delta: int) -> str:
    """Sign bit (0 for positive) then |m| - 1 in ceil(log2 Delta) bits."""
    if Delta < 1:
        raise EncodingError(f"Delta must be positive, got {Delta}")
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)) or m == 0 or abs(m) > Delta:
        raise EncodingError(f"cannot encode {m!r} for Delta={Delta}")
    width = message_bits(Delta) - 1
    mag = format(abs(m) - 1, f"0{width}b") if width else ""
    return ("0" if m > 0 else "1") + mag


def decode_message(bits: str, Delta: int) -> int:
    """Inverse of `encode_message`."""
    if len(bits) != message_bits(Delta) or set(bits) - {"0", "1"}:
        raise EncodingError(f"bad codeword {bits!r} for Delta={Delta}")
    mag = (int(bits[1:], 2) if len(bits) > 1 else 0) + 1
    if mag > Delta:
        raise EncodingError(f"codeword {bits!r} decodes outside range")
    return mag if bits[0] == "0" else -mag


def write_transcript(out: TextIO, bags: Sequence[MessageBag]) -> int:
    """CSV transcript with one row per (user, message): user,message,bits.

    Returns:
      Number of message rows written.
    """
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["user", "message", "bits"])
    rows = 0
    for user, bag in enumerate(bags):
        for m in bag.messages():
            writer.writerow([user, m, encode_message(m, bag.Delta)])
            rows += 1
    return rows
