"""Experiment driver: parameter sweeps, real-data runs and the Laplace gap table.

Sweep configuration is a flat text file of `key = value` lines; list values
are comma separated and `#` starts a comment:

    algorithms = corrnoise, ikos, rappor, dlap-central
    n = 1000, 10000
    delta_levels = 2, 4, 8
    epsilon = 1.0
    delta = 1e-6
    trials = 1000
    seed = 7
    mode = both                # closed_form | monte_carlo | both
    epsilon_star_fraction = 0.9
    epsilon1_share = 0.5
    inputs = worst             # worst (all users at Delta) | uniform
    tprime = analytic          # analytic | optimized
    ikos_g =                   # blank: heuristic
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np

from corrnoise import baselines, calibration
from corrnoise import dist as dist_lib
from corrnoise import protocol
from corrnoise.dist import NegBinParams
from corrnoise.errors import (ConfigurationError, CorrNoiseError, InputDomainError,
                              ParameterDomainError)

CSV_COLUMNS = ("algorithm", "n", "delta_levels", "epsilon", "delta", "rmse_closed",
               "rmse_empirical", "messages_expected", "bits_expected", "certified")
MODES = ("closed_form", "monte_carlo", "both")
# Above this many per-user draws a Monte Carlo cell uses the central
# equivalent (sum of n NB(r/n, p) shares is NB(r, p)).
PER_USER_DRAW_LIMIT = 2_000_000


@dataclasses.dataclass(frozen=True)
class SweepConfig:
    algorithms: Sequence[str]
    n: Sequence[int]
    delta_levels: Sequence[int]
    epsilon: Sequence[float]
    delta: Sequence[float]
    trials: int = 1000
    seed: int = 0
    mode: str = "closed_form"
    epsilon_star_fraction: float = 0.9
    epsilon1_share: float = 0.5
    inputs: str = "worst"
    tprime: str = "analytic"
    ikos_g: Optional[int] = None

    def __post_init__(self):
        for name in ("algorithms", "n", "delta_levels", "epsilon", "delta"):
            if not getattr(self, name):
                raise ConfigurationError(f"grid {name!r} is empty")
        for tag in self.algorithms:
            if tag not in baselines.TAGS:
                raise ConfigurationError(f"unknown algorithm {tag!r}")
        if self.trials < 1:
            raise ConfigurationError("trials must be at least 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.inputs not in ("worst", "uniform"):
            raise ConfigurationError("inputs must be 'worst' or 'uniform'")


_LIST_KEYS = {"algorithms": str, "n": int, "delta_levels": int, "epsilon": float, "delta": float}
_SCALAR_KEYS = {"trials": int, "seed": int, "mode": str, "epsilon_star_fraction": float,
                "epsilon1_share": float, "inputs": str, "tprime": str, "ikos_g": int}


def parse_config(text: str, **overrides) -> SweepConfig:
    """Build a SweepConfig from key-value text; keyword overrides win."""
    kv = calibration.parse_key_values(text)
    args = {}
    for key, value in kv.items():
        try:
            if key in _LIST_KEYS:
                args[key] = tuple(_LIST_KEYS[key](v.strip()) for v in value.split(",") if v.strip())
            elif key in _SCALAR_KEYS:
                if value:
                    args[key] = _SCALAR_KEYS[key](value)
            else:
                raise ConfigurationError(f"unknown config key {key!r}")
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key!r}: {value!r}") from exc
    args.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SweepConfig(**args)
    except TypeError as exc:
        raise ConfigurationError(f"incomplete config: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class SweepRow:
    algorithm: str
    n: int
    delta_levels: int
    epsilon: float
    delta: float
    rmse_closed: float
    rmse_empirical: Optional[float]
    messages_expected: float
    bits_expected: float
    certified: bool


def _cell_rng(seed: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, cell]))


def _inputs(cfg: SweepConfig, n: int, Delta: int, rng) -> np.ndarray:
    if cfg.inputs == "worst":
        return np.full(n, Delta, dtype=np.int64)
    return rng.integers(0, Delta + 1, size=n)


def _noise_errors(central: Optional[NegBinParams], n: int, trials: int, rng) -> np.ndarray:
    """z+ - z- over `trials` rounds, drawn per user when affordable."""
    if central is None:
        return np.zeros(trials)
    if n * trials <= PER_USER_DRAW_LIMIT:
        share = dist_lib.nb_divide(central, n)
        zp = dist_lib.nb_sample(share, rng, size=(trials, n)).sum(axis=1)
        zm = dist_lib.nb_sample(share, rng, size=(trials, n)).sum(axis=1)
    else:
        zp = dist_lib.nb_sample(central, rng, size=trials)
        zm = dist_lib.nb_sample(central, rng, size=trials)
    return (zp - zm).astype(np.float64)


def _rmse(errors: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(errors))))


def _corrnoise_row(cfg, n, Delta, eps, delta, rng) -> SweepRow:
    budget = calibration.split_budget(eps, cfg.epsilon_star_fraction, cfg.epsilon1_share, delta)
    rep = calibration.dsum_params(eps, delta, 0.1, Delta, n, budget=budget,
                                  tprime=cfg.tprime, certify=False)
    emp = None
    if cfg.mode != "closed_form":
        xs = _inputs(cfg, n, Delta, rng)
        if n * cfg.trials <= PER_USER_DRAW_LIMIT // max(1, len(rep.params.components())):
            u = protocol.simulate_rounds(xs.tolist(), rep.params, cfg.trials, rng)
            sums = u @ np.array(protocol.message_values(Delta))
            emp = _rmse(sums - xs.sum())
        else:
            emp = _rmse(_noise_errors(rep.params.central, n, cfg.trials, rng))
    return SweepRow("corrnoise", n, Delta, eps, delta, math.sqrt(rep.predicted_mse), emp,
                    rep.predicted_messages, rep.predicted_bits, rep.certified)


def _dlap_row(tag, cfg, n, Delta, eps, delta, rng) -> SweepRow:
    rmse = baselines.dlap_rmse(eps, Delta)
    p = baselines.dlap_p(eps, Delta)
    central = NegBinParams(1.0, p) if p > 0 else None
    emp = _rmse(_noise_errors(central, n, cfg.trials, rng)) if cfg.mode != "closed_form" else None
    if tag == "ikos":
        ik = baselines.ikos_calibrate(n, eps, delta, Delta, g=cfg.ikos_g)
        messages, bits = float(ik.g), float(ik.bits_per_user)
    else:
        messages, bits = 1.0, float(max(1, Delta.bit_length()))
    return SweepRow(tag, n, Delta, eps, delta, rmse, emp, messages, bits, True)


def _rappor_row(cfg, n, Delta, eps, delta, rng) -> SweepRow:
    rp = baselines.rappor_calibrate(eps, delta, Delta, n)
    rmse = math.sqrt(baselines.rappor_variance(n, rp.f, Delta))
    emp = None
    if cfg.mode != "closed_form":
        xs = _inputs(cfg, n, Delta, rng)
        u = np.bincount(xs, minlength=Delta + 1)[1:]
        c = rng.binomial(u, 1 - rp.f, size=(cfg.trials, Delta)) + \
            rng.binomial(n - u, rp.f, size=(cfg.trials, Delta))
        est = baselines.rappor_debias(c, n, rp.f) @ np.arange(1, Delta + 1)
        emp = _rmse(est - xs.sum())
    msgs = baselines.rappor_expected_messages(rp.f, Delta)
    return SweepRow("rappor", n, Delta, eps, delta, rmse, emp, msgs,
                    msgs * baselines.rappor_bits_per_message(Delta), False)


def run_sweep(cfg: SweepConfig) -> List[SweepRow]:
    """One row per algorithm and grid point, in grid order.

    Each cell draws from its own stream derived from (seed, cell index), so the
    output is reproducible and independent of which cells are run. A cell whose
    calibration fails yields a row of NaNs flagged uncertified.
    """
    rows = []
    cell = 0
    for tag in cfg.algorithms:
        for n in cfg.n:
            for Delta in cfg.delta_levels:
                for eps in cfg.epsilon:
                    for delta in cfg.delta:
                        rng = _cell_rng(cfg.seed, cell)
                        cell += 1
                        try:
                            if tag == "corrnoise":
                                row = _corrnoise_row(cfg, n, Delta, eps, delta, rng)
                            elif tag == "rappor":
                                row = _rappor_row(cfg, n, Delta, eps, delta, rng)
                            else:
                                row = _dlap_row(tag, cfg, n, Delta, eps, delta, rng)
                        except CorrNoiseError:
                            nan = float("nan")
                            row = SweepRow(tag, n, Delta, eps, delta, nan, nan, nan, nan, False)
                        rows.append(row)
    return rows


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_csv(rows: Sequence, out: TextIO, columns: Sequence[str] = CSV_COLUMNS) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in columns])


def rows_to_csv(rows: Sequence, columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    write_csv(rows, buf, columns)
    return buf.getvalue()


# --- real data ------------------------------------------------------------------

class DataFileError(CorrNoiseError, OSError):
    """A data file is missing or lacks the requested column."""


@dataclasses.dataclass(frozen=True)
class IngestResult:
    values: np.ndarray
    kept: int
    dropped: int


def ingest_column(path: str, column: str, clamp_max: float) -> IngestResult:
    """Read one numeric CSV column, drop values above clamp_max, scale to [0, 1].

    Raises:
      DataFileError: missing file or column.
      InputDomainError: non-numeric or negative cell (message names the row).
    """
    if not clamp_max > 0:
        raise ParameterDomainError(f"clamp_max must be positive, got {clamp_max}")
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise DataFileError(f"cannot open {path}: {exc}") from exc
    values, dropped = [], 0
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise DataFileError(f"{path} has no column {column!r}")
        for row_no, row in enumerate(reader, 2):
            cell = (row[column] or "").strip()
            try:
                v = float(cell)
            except ValueError:
                raise InputDomainError(f"{path} row {row_no}: {cell!r} is not a number") from None
            if not math.isfinite(v) or v < 0:
                raise InputDomainError(f"{path} row {row_no}: {cell!r} is not a nonnegative number")
            if v > clamp_max:
                dropped += 1
            else:
                values.append(v / clamp_max)
    return IngestResult(np.array(values), len(values), dropped)


REAL_COLUMNS = ("algorithm", "delta_levels", "rmse_closed", "rmse_empirical", "bits_expected")
REAL_ALGORITHMS = ("corrnoise", "ikos", "rappor", "dlap-central", "discretized")


@dataclasses.dataclass(frozen=True)
class RealRow:
    algorithm: str
    delta_levels: int
    rmse_closed: float
    rmse_empirical: float
    bits_expected: float


def _rounding_var(data: np.ndarray, Delta: int) -> float:
    frac = data * Delta - np.floor(data * Delta)
    return float(np.sum(frac * (1 - frac)))


def real_sweep(data: Sequence[float], levels: Sequence[int], epsilon: float, delta: float,
               trials: int, seed: int, clamp_max: float = 1.0,
               epsilon_star_fraction: float = 0.1, epsilon1_share: float = 0.5,
               noiseless: bool = False,
               algorithms: Sequence[str] = REAL_ALGORITHMS) -> List[RealRow]:
    """Real summation of data in [0, 1] at each discretization level.

    Every algorithm rounds inputs to {0, ..., Delta} without bias; errors are
    reported in the original units (times clamp_max). The "discretized"
    baseline sends the rounded value with no noise.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        raise InputDomainError("no data")
    if (data < 0).any() or (data > 1).any():
        raise InputDomainError("data must lie in [0, 1]")
    n = len(data)
    truth = float(data.sum())
    rows = []
    for li, Delta in enumerate(levels):
        for ai, tag in enumerate(algorithms):
            rng = _cell_rng(seed, li * len(algorithms) + ai)
            noise_var, central, rp = 0.0, None, None
            if tag == "corrnoise":
                budget = calibration.split_budget(epsilon, epsilon_star_fraction,
                                                  epsilon1_share, delta)
                rep = calibration.dsum_params(epsilon, delta, 0.1, Delta, n, budget=budget,
                                              certify=False)
                central, bits = rep.params.central, rep.predicted_bits
            elif tag in ("ikos", "dlap-central"):
                central = NegBinParams(1.0, baselines.dlap_p(epsilon, Delta))
                if tag == "ikos":
                    bits = baselines.ikos_calibrate(n, epsilon, delta, Delta).bits_per_user
                else:
                    bits = max(1, Delta.bit_length())
            elif tag == "rappor":
                rp = baselines.rappor_calibrate(epsilon, delta, Delta, n)
                noise_var = 0.0 if noiseless else baselines.rappor_variance(n, rp.f, Delta)
                bits = (baselines.rappor_expected_messages(rp.f, Delta)
                        * baselines.rappor_bits_per_message(Delta))
            elif tag == "discretized":
                bits = max(1, (Delta - 1).bit_length())
            else:
                raise ConfigurationError(f"unknown algorithm {tag!r}")
            if noiseless:
                central = None
            if central is not None:
                noise_var = 2 * central.var
            closed = math.sqrt((_rounding_var(data, Delta) + noise_var) / Delta ** 2) * clamp_max
            errs = np.empty(trials)
            for t in range(trials):
                ys = protocol.randomized_round_many(data, Delta, rng)
                if tag == "rappor" and not noiseless:
                    u = np.bincount(ys, minlength=Delta + 1)[1:]
                    c = rng.binomial(u, 1 - rp.f) + rng.binomial(n - u, rp.f)
                    s = float(baselines.rappor_debias(c, n, rp.f) @ np.arange(1, Delta + 1))
                else:
                    s = float(ys.sum()) + float(_noise_errors(central, n, 1, rng)[0])
                errs[t] = s / Delta - truth
            rows.append(RealRow(tag, Delta, closed, _rmse(errs) * clamp_max, float(bits)))
    return rows


# --- Laplace vs Discrete Laplace ----------------------------------------------------

@dataclasses.dataclass(frozen=True)
class GapRow:
    epsilon: float
    rmse_laplace: float
    rmse_dlap: float
    ratio: float


GAP_COLUMNS = ("epsilon", "rmse_laplace", "rmse_dlap", "ratio")


def optimality_gap_table(epsilons: Sequence[float]) -> List[GapRow]:
    """Laplace RMSE sqrt(2)/eps against Discrete Laplace sqrt(2 e^-eps)/(1 - e^-eps)."""
    rows = []
    for eps in epsilons:
        if not eps > 0:
            raise ParameterDomainError(f"epsilon must be positive, got {eps}")
        lap = math.sqrt(2) / eps
        dl = math.sqrt(2 * math.exp(-eps)) / -math.expm1(-eps)
        rows.append(GapRow(eps, lap, dl, lap / dl))
    return rows
