"""Zero-sum noise atoms, their message-count matrix and its integer right inverse.

Atoms are ordered {-1, +1} first, then {i, -floor(i/2), -ceil(i/2)} for
i = 2, -2, 3, -3, ..., Delta, -Delta. Rows of A are the message values
-Delta..-1, 1..Delta; A-tilde drops the row for +1. Columns of C are indexed by
-Delta..-1, 2..Delta (the same values as the rows of A-tilde), so that
A-tilde @ C is the identity.
"""

from __future__ import annotations

import collections
import dataclasses
import math
from fractions import Fraction
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from corrnoise.errors import ConstructionError, ParameterDomainError


@dataclasses.dataclass(frozen=True)
class NoiseAtom:
    """A zero-sum multiset of nonzero messages.

    Attributes:
      values: sorted message values, with repetition.
    """

    values: Tuple[int, ...]

    def __post_init__(self):
        vals = tuple(sorted(int(v) for v in self.values))
        if not vals or 0 in vals:
            raise ParameterDomainError(f"atom must be nonempty without zeros, got {vals}")
        if sum(vals) != 0:
            raise ParameterDomainError(f"atom must sum to zero, got {vals}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def of(cls, *values: int) -> "NoiseAtom":
        return cls(tuple(values))

    @property
    def counts(self) -> Dict[int, int]:
        return dict(collections.Counter(self.values))

    @property
    def size(self) -> int:
        """||s||_1, the number of messages in one copy."""
        return len(self.values)

    @property
    def large(self) -> int:
        """The element of largest magnitude (the i in {i, -i1, -i2})."""
        return max(self.values, key=abs) if self.size > 2 else 1

    def __str__(self) -> str:
        return "{" + ",".join(f"{v:+d}" for v in self.values) + "}"


def _check_delta(Delta: int) -> None:
    if not isinstance(Delta, (int, np.integer)) or Delta < 1:
        raise ParameterDomainError(f"Delta must be a positive integer, got {Delta!r}")


def message_values(Delta: int) -> List[int]:
    """Row labels of A: -Delta..-1, 1..Delta."""
    return list(range(-Delta, 0)) + list(range(1, Delta + 1))


def column_labels(Delta: int) -> List[int]:
    """Column labels of C (and row labels of A-tilde): -Delta..-1, 2..Delta."""
    return list(range(-Delta, 0)) + list(range(2, Delta + 1))


def _signed_order(Delta: int):
    for m in range(2, Delta + 1):
        yield m
        yield -m


def build_atoms(Delta: int) -> List[NoiseAtom]:
    """The atom collection for Delta; 2 * Delta - 1 atoms."""
    _check_delta(Delta)
    atoms = [NoiseAtom.of(-1, 1)]
    for i in _signed_order(Delta):
        m = abs(i)
        sign = 1 if i > 0 else -1
        atoms.append(NoiseAtom.of(i, -sign * (m // 2), -sign * ((m + 1) // 2)))
    return atoms


def gamma_value(Delta: int) -> int:
    """Gamma = Delta * ceil(1 + log2 Delta), computed exactly."""
    _check_delta(Delta)
    return Delta * (1 + (Delta - 1).bit_length())


def build_domination(Delta: int) -> Tuple[int, Dict[NoiseAtom, int]]:
    """Gamma and the domination vector t over the atoms."""
    gamma = gamma_value(Delta)
    t = {}
    for atom in build_atoms(Delta):
        m = abs(atom.large)
        t[atom] = gamma if atom.size == 2 else -(-gamma // m)
    return gamma, t


@dataclasses.dataclass(frozen=True)
class AtomSystem:
    """Atoms, the matrix A, the right inverse C and the domination vector t.

    C is stored column-sparse: `columns[i]` maps atom index to coefficient for
    column label i.
    """

    Delta: int
    atoms: Tuple[NoiseAtom, ...]
    columns: Mapping[int, Mapping[int, int]]
    t: Tuple[int, ...]
    Gamma: int

    @property
    def atom_index(self) -> Dict[NoiseAtom, int]:
        return {a: j for j, a in enumerate(self.atoms)}

    @property
    def A(self) -> np.ndarray:
        """Message-count matrix, rows -Delta..-1, 1..Delta; columns atoms."""
        rows = {v: j for j, v in enumerate(message_values(self.Delta))}
        a = np.zeros((2 * self.Delta, len(self.atoms)), dtype=np.int64)
        for j, atom in enumerate(self.atoms):
            for v, c in atom.counts.items():
                a[rows[v], j] += c
        return a

    @property
    def A_tilde(self) -> np.ndarray:
        """A without the row for message +1."""
        a = self.A
        return np.delete(a, self.Delta, axis=0)

    @property
    def C(self) -> np.ndarray:
        """Dense C, rows atoms, columns `column_labels(Delta)`."""
        labels = column_labels(self.Delta)
        c = np.zeros((len(self.atoms), len(labels)), dtype=np.int64)
        for j, label in enumerate(labels):
            for s, coef in self.columns[label].items():
                c[s, j] = coef
        return c

    def query_matrix(self) -> np.ndarray:
        """[0 c_2 ... c_Delta]: the columns a user's input 0..Delta maps to."""
        q = np.zeros((len(self.atoms), self.Delta + 1), dtype=np.int64)
        for i in range(2, self.Delta + 1):
            for s, coef in self.columns[i].items():
                q[s, i] = coef
        return q

    @property
    def t_norm(self) -> int:
        return sum(a.size * t for a, t in zip(self.atoms, self.t))

    def t_norm_bound(self) -> int:
        return 3 * (self.Gamma + sum(2 * -(-self.Gamma // m) for m in range(2, self.Delta + 1)))


def build_right_inverse(Delta: int, verify: bool = True) -> AtomSystem:
    """Build the atom system with C from the halving recursion.

    c_{-1} is the unit vector on {-1, +1}, c_1 is zero, and for i >= 2 with
    i1 = floor(i/2), i2 = ceil(i/2):
        c_i  = e_{i, -i1, -i2} - c_{-i1} - c_{-i2}
        c_-i = e_{-i, i1, i2}  - c_{i1}  - c_{i2}

    Raises:
      ConstructionError: if `verify` is set and the result fails verification.
    """
    atoms = build_atoms(Delta)
    gamma, t_map = build_domination(Delta)
    index = {a: j for j, a in enumerate(atoms)}
    cols: Dict[int, Dict[int, int]] = {-1: {0: 1}, 1: {}}

    def add(acc, col, coef):
        for s, c in col.items():
            v = acc.get(s, 0) + coef * c
            if v:
                acc[s] = v
            else:
                acc.pop(s, None)

    for m in range(2, Delta + 1):
        i1, i2 = m // 2, (m + 1) // 2
        for sign in (1, -1):
            atom = NoiseAtom.of(sign * m, -sign * i1, -sign * i2)
            col = {index[atom]: 1}
            add(col, cols[-sign * i1], -1)
            add(col, cols[-sign * i2], -1)
            cols[sign * m] = col
    del cols[1]
    sys = AtomSystem(Delta, tuple(atoms), cols, tuple(t_map[a] for a in atoms), gamma)
    if verify:
        report = verify_system(sys)
        if not report.passed:
            raise ConstructionError(f"atom system failed verification at Delta={Delta}: {report}")
    return sys


@dataclasses.dataclass(frozen=True)
class VerificationReport:
    """Result of `verify_system`.

    Attributes:
      inverse_ok: A-tilde @ C equals the identity exactly.
      domination: per column label, sum_s |C[s, i]| / t[s] as a Fraction.
      max_domination: largest domination sum.
      induction_ok: every domination sum is at most |i| ceil(1 + log2 |i|) / Gamma.
      t_norm: ||t||_S.
      t_norm_bound: 3 (Gamma + sum_m 2 ceil(Gamma / m)).
    """

    inverse_ok: bool
    domination: Mapping[int, Fraction]
    max_domination: Fraction
    induction_ok: bool
    t_norm: int
    t_norm_bound: int

    @property
    def passed(self) -> bool:
        return (self.inverse_ok and self.max_domination <= 1 and self.induction_ok
                and self.t_norm <= self.t_norm_bound)


def verify_system(sys: AtomSystem) -> VerificationReport:
    """Exact integer and rational checks of an atom system."""
    labels = column_labels(sys.Delta)
    counts = [a.counts for a in sys.atoms]
    inverse_ok = True
    for label in labels:
        # A-tilde @ c_label computed sparsely
        acc = collections.Counter()
        for s, coef in sys.columns[label].items():
            for v, c in counts[s].items():
                if v != 1:
                    acc[v] += coef * c
        got = {v: c for v, c in acc.items() if c}
        if got != {label: 1}:
            inverse_ok = False
            break
    domination = {}
    induction_ok = True
    for label in labels:
        col = sys.columns[label]
        denom = math.lcm(*(sys.t[s] for s in col)) if col else 1
        total = Fraction(sum(abs(c) * (denom // sys.t[s]) for s, c in col.items()), denom)
        domination[label] = total
        m = abs(label)
        if total * sys.Gamma > m * (1 + (m - 1).bit_length()):
            induction_ok = False
    max_dom = max(domination.values()) if domination else Fraction(0)
    return VerificationReport(inverse_ok, domination, max_dom, induction_ok,
                              sys.t_norm, sys.t_norm_bound())


def dump_system(sys: AtomSystem) -> str:
    """Text form: header, one atom per line, C as sparse triples, then t.

    Lines:
        delta <Delta>
        gamma <Gamma>
        atom <index> <v1> <v2> ...
        c <column label> <atom index> <coefficient>
        t <atom index> <value>
    """
    lines = [f"delta {sys.Delta}", f"gamma {sys.Gamma}"]
    for j, a in enumerate(sys.atoms):
        lines.append(f"atom {j} " + " ".join(str(v) for v in a.values))
    for label in column_labels(sys.Delta):
        for s, coef in sorted(sys.columns[label].items()):
            lines.append(f"c {label} {s} {coef}")
    for j, t in enumerate(sys.t):
        lines.append(f"t {j} {t}")
    return "\n".join(lines) + "\n"


def load_system(text: str) -> AtomSystem:
    """Parse `dump_system` output."""
    delta = gamma = None
    atoms: Dict[int, NoiseAtom] = {}
    cols: Dict[int, Dict[int, int]] = {}
    t: Dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            nums = [int(x) for x in rest]
        except ValueError as exc:
            raise ParameterDomainError(f"line {lineno}: non-integer field in {raw!r}") from exc
        if key == "delta":
            delta = nums[0]
        elif key == "gamma":
            gamma = nums[0]
        elif key == "atom":
            atoms[nums[0]] = NoiseAtom(tuple(nums[1:]))
        elif key == "c":
            cols.setdefault(nums[0], {})[nums[1]] = nums[2]
        elif key == "t":
            t[nums[0]] = nums[1]
        else:
            raise ParameterDomainError(f"line {lineno}: unknown record {key!r}")
    if delta is None or gamma is None:
        raise ParameterDomainError("missing delta or gamma record")
    for label in column_labels(delta):
        cols.setdefault(label, {})
    order = sorted(atoms)
    return AtomSystem(delta, tuple(atoms[j] for j in order), cols,
                      tuple(t[j] for j in order), gamma)
