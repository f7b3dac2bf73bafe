"""Noise calibration for Delta-summation and closed-form predictions.

The budget is split three ways: epsilon_star drives the central noise (and
hence the error), epsilon1 the noise D-hat that hides the count of +1
messages, and epsilon2 the atom noises that hide the remaining counts through
the linear query Q = [0 c_2 ... c_Delta].
"""

from __future__ import annotations

import dataclasses
import io
import math
import warnings
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from corrnoise import divergence
from corrnoise.atoms import AtomSystem, NoiseAtom, build_right_inverse
from corrnoise.dist import NegBinParams
from corrnoise.divergence import DpCheckReport
from corrnoise.errors import ConfigurationError, ParameterDomainError
from corrnoise.protocol import ProtocolParams, message_bits

LARGE_EPSILON = 8.0
NB_SCALE = 0.2  # p = exp(-0.2 * eps / sensitivity)


@dataclasses.dataclass(frozen=True)
class PrivacyBudget:
    """How (epsilon, delta) is divided between the noise sources.

    Attributes:
      epsilon, delta: the overall target.
      epsilon_star: level of the central (error-determining) noise.
      epsilon1, delta1: for D-hat.
      epsilon2, delta2: for the atom noises.
      gamma: the fraction withheld from epsilon_star, when the split came from
        a gamma (None for experiment splits).
    """

    epsilon: float
    delta: float
    epsilon_star: float
    epsilon1: float
    epsilon2: float
    delta1: float
    delta2: float
    gamma: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterDomainError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 0.5:
            raise ParameterDomainError(f"delta must be in (0, 1/2), got {self.delta}")
        if min(self.epsilon_star, self.epsilon1, self.epsilon2) <= 0:
            raise ParameterDomainError("every epsilon share must be positive")
        if self.epsilon_star + self.epsilon1 + self.epsilon2 > self.epsilon * (1 + 1e-12):
            raise ParameterDomainError("epsilon shares exceed epsilon")
        if not math.isclose(self.delta1 + self.delta2, self.delta, rel_tol=1e-12):
            raise ParameterDomainError("delta shares must add up to delta")


def theory_budget(epsilon: float, delta: float, gamma: float) -> PrivacyBudget:
    """eps* = (1 - gamma) eps, eps1 = eps2 = min(1, gamma eps) / 2, delta halved."""
    if not 0 < gamma < 0.5:
        raise ParameterDomainError(f"gamma must be in (0, 1/2), got {gamma}")
    e12 = min(1.0, gamma * epsilon) / 2
    return PrivacyBudget(epsilon, delta, (1 - gamma) * epsilon, e12, e12,
                         delta / 2, delta / 2, gamma)


def split_budget(epsilon: float, epsilon_star_fraction: float, epsilon1_share: float,
                 delta: float) -> PrivacyBudget:
    """Experiment split: eps* = fraction * eps, eps1 = share * (eps - eps*).

    Args:
      epsilon: total epsilon.
      epsilon_star_fraction: in (0, 1).
      epsilon1_share: in [0.5, 0.9].
      delta: total delta, split evenly.
    """
    if not 0 < epsilon_star_fraction < 1:
        raise ParameterDomainError(f"fraction must be in (0, 1), got {epsilon_star_fraction}")
    if not 0.5 <= epsilon1_share <= 0.9:
        raise ParameterDomainError(f"share must be in [0.5, 0.9], got {epsilon1_share}")
    e_star = epsilon_star_fraction * epsilon
    rest = epsilon - e_star
    e1 = epsilon1_share * rest
    return PrivacyBudget(epsilon, delta, e_star, e1, rest - e1, delta / 2, delta / 2)


def _check_eps_delta(epsilon: float, delta: float) -> None:
    if not epsilon > 0 or math.isinf(epsilon):
        raise ParameterDomainError(f"epsilon must be positive and finite, got {epsilon}")
    if not 0 < delta < 1:
        raise ParameterDomainError(f"delta must be in (0, 1), got {delta}")
    if epsilon > LARGE_EPSILON:
        warnings.warn(f"epsilon={epsilon} is outside the small-epsilon regime the "
                      "analytic calibration is designed for", stacklevel=3)


def nb_scalar_params(epsilon: float, delta: float, Delta: int) -> NegBinParams:
    """p = exp(-0.2 eps / Delta), r = 3 (1 + ln(1 / delta))."""
    _check_eps_delta(epsilon, delta)
    if Delta < 1:
        raise ParameterDomainError(f"Delta must be positive, got {Delta}")
    return NegBinParams(3 * (1 + math.log(1 / delta)), math.exp(-NB_SCALE * epsilon / Delta))


def nb_vector_params(tprime: Sequence[float], epsilon: float, delta: float,
                     set_size: Optional[int] = None) -> List[NegBinParams]:
    """p_i = exp(-0.2 eps / t'_i), r_i = 3 (1 + ln(|I| / delta)).

    Args:
      tprime: positive weights, one per noised coordinate.
      epsilon, delta: budget for the whole vector.
      set_size: |I|; defaults to len(tprime).
    """
    if len(tprime) == 0:
        raise ParameterDomainError("index set is empty")
    if any(t <= 0 for t in tprime):
        raise ParameterDomainError("every t' must be positive")
    _check_eps_delta(epsilon, delta)
    size = len(tprime) if set_size is None else set_size
    r = 3 * (1 + math.log(size / delta))
    return [NegBinParams(r, math.exp(-NB_SCALE * epsilon / t)) for t in tprime]


def column_pair_differences(Q: np.ndarray) -> np.ndarray:
    """|c_j - c_j'| for every unordered pair of distinct columns of Q."""
    cols = {tuple(Q[:, j]) for j in range(Q.shape[1])} | {(0,) * Q.shape[0]}
    cols = [np.array(c) for c in sorted(cols)]
    diffs = [np.abs(a - b) for i, a in enumerate(cols) for b in cols[i + 1:]]
    if not diffs:
        return np.zeros((0, Q.shape[0]), dtype=np.int64)
    return np.unique(np.array(diffs, dtype=np.int64), axis=0)


@dataclasses.dataclass(frozen=True)
class TprimeResult:
    """Outcome of `optimize_tprime`.

    Attributes:
      tprime: per atom weight; 0 for atoms that need no noise.
      objective: expected messages contributed by the atom noises, times n.
      fallback: True when the 2t fallback was kept.
      message: solver status.
    """

    tprime: Tuple[float, ...]
    objective: float
    fallback: bool
    message: str = ""


def _atom_objective(y: np.ndarray, sizes: np.ndarray, r: float, epsilon2: float) -> float:
    return float(np.sum(sizes * r / np.expm1(NB_SCALE * epsilon2 * y)))


def optimize_tprime(sys: AtomSystem, epsilon2: float, delta2: float) -> TprimeResult:
    """Domination weights t' minimizing the atom-noise message cost.

    With y = 1 / t' the cost sum_s ||s||_1 r / (exp(0.2 eps2 y_s) - 1) is convex
    and every pairwise column difference d of [0 c_2 ... c_Delta] gives a
    linear constraint sum_s |d_s| y_s <= 1. Atoms with zero sensitivity get
    t' = 0 and no noise. The result is never worse than t' = 2t.
    """
    Q = sys.query_matrix()
    active = np.flatnonzero(np.abs(Q).sum(axis=1))
    t2 = 2.0 * np.array(sys.t, dtype=np.float64)
    sizes_all = np.array([a.size for a in sys.atoms], dtype=np.float64)
    if len(active) == 0:
        return TprimeResult(tuple(0.0 for _ in sys.atoms), 0.0, False, "no sensitive atoms")
    D = column_pair_differences(Q[active]).astype(np.float64)
    sizes = sizes_all[active]
    r = 3 * (1 + math.log(len(active) / delta2))
    y0 = 1 / t2[active]
    base = _atom_objective(y0, sizes, r, epsilon2)

    def fun(y):
        return _atom_objective(y, sizes, r, epsilon2)

    def jac(y):
        c = NB_SCALE * epsilon2
        e = np.expm1(c * y)
        return -sizes * r * c * (e + 1) / e ** 2

    y_best, msg, fallback = y0, "fallback 2t", True
    try:
        res = optimize.minimize(
            fun, y0, jac=jac, method="SLSQP",
            bounds=[(1e-12, None)] * len(y0),
            constraints=[{"type": "ineq", "fun": lambda y: 1 - D @ y, "jac": lambda y: -D}],
            options={"maxiter": 500, "ftol": 1e-12})
        y = np.maximum(res.x, 1e-12)
        worst = float((D @ y).max())
        if worst > 1:
            y = y / worst
        if np.all(np.isfinite(y)) and fun(y) < base:
            y_best, msg, fallback = y, str(res.message), False
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:  # solver trouble
        msg = f"fallback 2t ({exc})"
    tprime = np.zeros(len(sys.atoms))
    tprime[active] = 1 / y_best
    return TprimeResult(tuple(float(t) for t in tprime), fun(y_best), fallback, msg)


@dataclasses.dataclass(frozen=True)
class CalibrationReport:
    """Calibrated parameters, predictions and privacy certificates.

    Attributes:
      params: the protocol instance.
      budget: the privacy split used.
      hat: parameters of D-hat.
      tilde: per atom D-tilde parameters (None for atoms without noise).
      tprime: domination weights the atom noise was derived from.
      predicted_mse, predicted_messages, predicted_bits: closed forms.
      dp_certificate: (D-hat check at (eps1, Delta), atom check at eps2), or
        None entries when only the analytic guarantee is claimed.
      certified: privacy is backed by a theorem-derived parameter choice or by
        numeric checks that passed.
      certification: "analytic", "numeric" or "estimate".
    """

    params: ProtocolParams
    budget: PrivacyBudget
    hat: NegBinParams
    tilde: Tuple[Optional[NegBinParams], ...]
    tprime: Tuple[float, ...]
    predicted_mse: float
    predicted_messages: float
    predicted_bits: float
    dp_certificate: Tuple[Optional[DpCheckReport], Optional[DpCheckReport]]
    certified: bool
    certification: str


def protocol_mse(params: ProtocolParams) -> float:
    """2 Var(central) = 2 r p / (1 - p)^2."""
    c = params.central
    return 0.0 if c is None else 2 * c.var


def expected_messages(params: ProtocolParams, nonzero_fraction: float = 1.0) -> float:
    """nonzero_fraction + (2 E[central] + sum_s |s| E[D^s]) / n."""
    noise = 0.0
    if params.central is not None:
        noise += 2 * params.central.mean
    for atom in params.sys.atoms:
        noise += atom.size * sum(c.mean for c in params.atom_noise[atom])
    return nonzero_fraction + noise / params.n


def expected_bits(params: ProtocolParams, nonzero_fraction: float = 1.0) -> float:
    return expected_messages(params, nonzero_fraction) * message_bits(params.Delta)


def _assemble(sys: AtomSystem, n: int, budget: PrivacyBudget, hat: NegBinParams,
              tilde: Sequence[Optional[NegBinParams]]) -> ProtocolParams:
    central = NegBinParams(1.0, math.exp(-budget.epsilon_star / sys.Delta))
    noise = {}
    for j, atom in enumerate(sys.atoms):
        comps = [] if tilde[j] is None else [tilde[j]]
        if j == 0:
            comps.append(hat)
        noise[atom] = tuple(comps)
    return ProtocolParams(sys.Delta, n, central, noise, sys)


def certify_components(sys: AtomSystem, budget: PrivacyBudget, hat: NegBinParams,
                       tilde: Sequence[Optional[NegBinParams]],
                       method: str = "auto") -> Tuple[DpCheckReport, DpCheckReport]:
    """Numeric checks of D-hat (scalar) and the atom noises (linear query)."""
    hat_report = divergence.dp_check_noise_addition(hat, sys.Delta, budget.epsilon1)
    atom_report = divergence.linear_query_check(sys.query_matrix(), list(tilde),
                                                budget.epsilon2, method=method)
    return hat_report, atom_report


def _passes(reports, budget: PrivacyBudget) -> bool:
    hat_r, atom_r = reports
    return hat_r.passes(budget.delta1) and atom_r.passes(budget.delta2)


def dsum_params(epsilon: float, delta: float, gamma: float, Delta: int, n: int, *,
                budget: Optional[PrivacyBudget] = None, tprime: str = "analytic",
                certify: Union[bool, str] = True,
                sys: Optional[AtomSystem] = None) -> CalibrationReport:
    """Calibrate the correlated-noise protocol for Delta-summation.

    Args:
      epsilon, delta: privacy target.
      gamma: accuracy slack; eps* = (1 - gamma) eps unless `budget` is given.
      Delta: input range bound.
      n: number of users.
      budget: explicit split, overriding gamma.
      tprime: "analytic" (t' = 2t on every atom) or "optimized"
        (`optimize_tprime`, zero-sensitivity atoms left noiseless).
      certify: True or "numeric" runs the divergence checks; False or
        "analytic" relies on the parameter formulas alone.
      sys: a prebuilt atom system for Delta.

    Returns:
      CalibrationReport. With numeric certification, `certified` reflects
      whether both checks passed.
    """
    if Delta < 1 or n < 1:
        raise ParameterDomainError("Delta and n must be positive")
    budget = budget or theory_budget(epsilon, delta, gamma)
    _check_eps_delta(budget.epsilon, budget.delta)
    sys = sys or build_right_inverse(Delta)
    hat = nb_scalar_params(budget.epsilon1, budget.delta1, Delta)
    if tprime == "analytic":
        tp = tuple(2.0 * t for t in sys.t)
    elif tprime == "optimized":
        tp = optimize_tprime(sys, budget.epsilon2, budget.delta2).tprime
    else:
        raise ConfigurationError(f"unknown tprime mode {tprime!r}")
    noised = [j for j, t in enumerate(tp) if t > 0]
    tilde: List[Optional[NegBinParams]] = [None] * len(sys.atoms)
    if noised:
        vec = nb_vector_params([tp[j] for j in noised], budget.epsilon2, budget.delta2)
        for j, p in zip(noised, vec):
            tilde[j] = p
    params = _assemble(sys, n, budget, hat, tilde)
    if certify is True or certify == "numeric":
        certs = certify_components(sys, budget, hat, tilde)
        certified, how = _passes(certs, budget), "numeric"
    elif certify is False or certify == "analytic":
        certs, certified, how = (None, None), True, "analytic"
    else:
        raise ConfigurationError(f"unknown certify mode {certify!r}")
    return CalibrationReport(params, budget, hat, tuple(tilde), tp, protocol_mse(params),
                             expected_messages(params), expected_bits(params), certs,
                             certified, how)


def _less_noise(p: NegBinParams, which: str, factor: float) -> NegBinParams:
    if which == "r":
        return NegBinParams(p.r * factor, p.p)
    # factor > 1 moves p towards 0
    return NegBinParams(p.r, p.p ** factor)


def refine_params(report: CalibrationReport, search_budget: int,
                  seed: int = 0, method: str = "auto") -> CalibrationReport:
    """Seeded coordinate descent that lowers expected messages.

    Each step picks one noise component (D-hat or an atom's D-tilde) and one
    of its parameters, and tries a multiplicative move towards less noise. A
    move is kept only when both numeric checks still pass and the expected
    message count drops; a rejected move halves that coordinate's step size.
    The starting point must itself pass the numeric checks, otherwise the
    input is returned unchanged.

    Args:
      report: starting calibration.
      search_budget: number of candidate moves to evaluate.
      seed: seed of the move order.
      method: divergence method for the atom check.
    """
    if search_budget <= 0:
        return report
    sys = report.params.sys
    budget = report.budget
    hat, tilde = report.hat, list(report.tilde)
    certs = certify_components(sys, budget, hat, tilde, method)
    if not _passes(certs, budget):
        return report
    rng = np.random.default_rng(seed)
    slots = [("hat", None)] + [("tilde", j) for j, t in enumerate(tilde) if t is not None]
    steps = {(s, w): 0.5 for s in slots for w in ("r", "p")}
    n = report.params.n
    best = expected_messages(report.params)
    for _ in range(search_budget):
        slot = slots[rng.integers(len(slots))]
        which = ("r", "p")[rng.integers(2)]
        step = steps[(slot, which)]
        if step < 1e-3:
            continue
        factor = 1 - step if which == "r" else 1 + step
        cand_hat, cand_tilde = hat, list(tilde)
        if slot[0] == "hat":
            cand_hat = _less_noise(hat, which, factor)
        else:
            cand_tilde[slot[1]] = _less_noise(tilde[slot[1]], which, factor)
        cand_params = _assemble(sys, n, budget, cand_hat, cand_tilde)
        msgs = expected_messages(cand_params)
        if msgs >= best:
            steps[(slot, which)] = step / 2
            continue
        cand_certs = certify_components(sys, budget, cand_hat, cand_tilde, method)
        if _passes(cand_certs, budget):
            hat, tilde, certs, best = cand_hat, cand_tilde, cand_certs, msgs
        else:
            steps[(slot, which)] = step / 2
    params = _assemble(sys, n, budget, hat, tilde)
    if hat == report.hat and tuple(tilde) == report.tilde:
        return report
    return dataclasses.replace(report, params=params, hat=hat, tilde=tuple(tilde),
                               predicted_mse=protocol_mse(params),
                               predicted_messages=expected_messages(params),
                               predicted_bits=expected_bits(params),
                               dp_certificate=certs, certified=True,
                               certification="numeric")


# --- key-value serialization -------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def dump_report(report: CalibrationReport) -> str:
    """Key-value text form: one `key = value` per line, `#` comments allowed."""
    b = report.budget
    p = report.params
    kv = [
        ("epsilon", float(b.epsilon)), ("delta", float(b.delta)),
        ("gamma", "" if b.gamma is None else float(b.gamma)),
        ("epsilon_star", float(b.epsilon_star)), ("epsilon1", float(b.epsilon1)),
        ("epsilon2", float(b.epsilon2)), ("delta1", float(b.delta1)), ("delta2", float(b.delta2)),
        ("delta_levels", p.Delta), ("n", p.n),
        ("central.r", float(p.central.r)), ("central.p", float(p.central.p)),
        ("hat.r", float(report.hat.r)), ("hat.p", float(report.hat.p)),
    ]
    for j, atom in enumerate(p.sys.atoms):
        kv.append((f"atom.{j}.values", " ".join(str(v) for v in atom.values)))
        kv.append((f"atom.{j}.tprime", float(report.tprime[j])))
        t = report.tilde[j]
        kv.append((f"atom.{j}.r", "" if t is None else float(t.r)))
        kv.append((f"atom.{j}.p", "" if t is None else float(t.p)))
    kv += [("predicted_mse", report.predicted_mse),
           ("predicted_messages", report.predicted_messages),
           ("predicted_bits", report.predicted_bits),
           ("certified", report.certified), ("certification", report.certification)]
    for name, cert in zip(("hat", "atoms"), report.dp_certificate):
        if cert is not None:
            kv += [(f"certificate.{name}.delta_bound", float(cert.delta_bound)),
                   (f"certificate.{name}.method", cert.method)]
    buf = io.StringIO()
    for k, v in kv:
        buf.write(f"{k} = {_fmt(v)}\n")
    return buf.getvalue()


def parse_key_values(text: str) -> Dict[str, str]:
    """Parse `key = value` lines; blank lines and `#` comments are ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_report(text: str) -> CalibrationReport:
    """Rebuild a report written by `dump_report`."""
    kv = parse_key_values(text)
    try:
        f = lambda k: float(kv[k])
        gamma = float(kv["gamma"]) if kv.get("gamma") else None
        budget = PrivacyBudget(f("epsilon"), f("delta"), f("epsilon_star"), f("epsilon1"),
                               f("epsilon2"), f("delta1"), f("delta2"), gamma)
        Delta, n = int(kv["delta_levels"]), int(kv["n"])
        sys = build_right_inverse(Delta)
        hat = NegBinParams(f("hat.r"), f("hat.p"))
        tilde, tprime = [], []
        for j, atom in enumerate(sys.atoms):
            if NoiseAtom(tuple(int(v) for v in kv[f"atom.{j}.values"].split())) != atom:
                raise ConfigurationError(f"atom {j} does not match the construction")
            tprime.append(f(f"atom.{j}.tprime"))
            tilde.append(NegBinParams(f(f"atom.{j}.r"), f(f"atom.{j}.p"))
                         if kv[f"atom.{j}.r"] else None)
        params = _assemble(sys, n, budget, hat, tilde)
        certs = []
        for name in ("hat", "atoms"):
            key = f"certificate.{name}.delta_bound"
            certs.append(DpCheckReport(budget.epsilon1 if name == "hat" else budget.epsilon2,
                                       float(kv[key]), kv[f"certificate.{name}.method"])
                         if key in kv else None)
        return CalibrationReport(params, budget, hat, tuple(tilde), tuple(tprime),
                                 f("predicted_mse"), f("predicted_messages"),
                                 f("predicted_bits"), tuple(certs),
                                 kv["certified"] == "true", kv["certification"])
    except KeyError as exc:
        raise ConfigurationError(f"calibration file lacks key {exc}") from exc
