"""Linear SNMM bases and the design matrix mapping blip parameters to point effects.

For a stratum ``(t, x_t, z_t)`` the design row is

    c_j = f_j(t, x_t, z_t)
          + sum_{s>t} E[f_j(s, X_s, Z_s) | x_t, z_t]
          - sum_{s>t} E[f_j(s, X_s, Z_s) | x_t, z_t = 0]

with the expectations taken over the joint transition ``P(x_s, z_s | x_t, z_t)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import chi2_contingency

from .errors import EstimabilityError, IdentifiabilityError
from .seqdata import SequentialDataset, Stratum, as_key

__all__ = [
    "AssignmentReport",
    "CellGrid",
    "DesignMatrix",
    "IndicatorBasis",
    "LinearBasis",
    "SnmmSpec",
    "TransitionTable",
    "build_design_matrix",
    "check_assignment_condition",
    "design_row",
    "empirical_transitions",
]

CONTROL = 0
RANK_RTOL = 1e-10


def _key(v):
    if isinstance(v, (list, tuple)):
        return tuple(_key(u) for u in v)
    if isinstance(v, str):
        return as_key(float(v))
    return as_key(v)


# ---------------------------------------------------------------------------
# SNMM basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndicatorBasis:
    """``f(t', x, z) = 1`` when ``t' == t``, ``x`` in ``x_in`` and ``z`` in ``z_in``.

    ``x_in=None`` matches every covariate level.
    """

    t: int
    z_in: frozenset
    x_in: frozenset | None = None
    label: str | None = None

    def __post_init__(self):
        z_in = frozenset(_key(z) for z in self.z_in)
        if CONTROL in z_in:
            raise ValueError("an indicator basis may not include the control treatment 0")
        object.__setattr__(self, "z_in", z_in)
        if self.x_in is not None:
            object.__setattr__(self, "x_in", frozenset(_key(x) for x in self.x_in))

    def __call__(self, t: int, x, z) -> float:
        if t != self.t or z not in self.z_in:
            return 0.0
        return float(self.x_in is None or x in self.x_in)

    def to_json(self) -> dict:
        return {
            "type": "indicator",
            "t": self.t,
            "x_in": None if self.x_in is None else sorted(self.x_in),
            "z_in": sorted(self.z_in),
            "label": self.label,
        }


@dataclass(frozen=True)
class LinearBasis:
    """``f(t, x, z) = z * g(x)`` for ``t`` in ``t_set``; ``g`` defaults to 1."""

    t_set: frozenset | None = None
    g: Mapping | None = None
    default: float | None = None
    label: str | None = None

    def __post_init__(self):
        if self.t_set is not None:
            object.__setattr__(self, "t_set", frozenset(int(t) for t in self.t_set))
        if self.g is not None:
            object.__setattr__(self, "g", {_key(k): float(v) for k, v in dict(self.g).items()})

    def __hash__(self):
        g = None if self.g is None else tuple(sorted(self.g.items()))
        return hash((self.t_set, g, self.default, self.label))

    def __call__(self, t: int, x, z) -> float:
        if self.t_set is not None and t not in self.t_set:
            return 0.0
        if self.g is None:
            gx = 1.0
        elif x in self.g:
            gx = self.g[x]
        elif self.default is not None:
            gx = self.default
        else:
            raise KeyError(f"linear basis has no value for covariate level {x!r}")
        return float(z) * gx

    def to_json(self) -> dict:
        return {
            "type": "linear",
            "t_set": None if self.t_set is None else sorted(self.t_set),
            "g": None if self.g is None else {str(k): v for k, v in self.g.items()},
            "default": self.default,
            "label": self.label,
        }


Basis = IndicatorBasis | LinearBasis


@dataclass(frozen=True)
class SnmmSpec:
    """Linear SNMM ``phi(t, x_t, z_t) = sum_j gamma_j f_j(t, x_t, z_t)``."""

    basis: tuple[Basis, ...]

    def __post_init__(self):
        object.__setattr__(self, "basis", tuple(self.basis))
        if not self.basis:
            raise ValueError("an SNMM needs at least one basis function")

    @property
    def k(self) -> int:
        return len(self.basis)

    @property
    def labels(self) -> list[str]:
        return [b.label or f"gamma{j + 1}" for j, b in enumerate(self.basis)]

    def evaluate(self, t: int, x, z) -> np.ndarray:
        return np.array([f(t, x, z) for f in self.basis])

    def blip(self, gamma, t: int, x, z) -> float:
        return float(self.evaluate(t, x, z) @ np.asarray(gamma, dtype=float))

    def matrix(self, grid: "CellGrid", t: int) -> np.ndarray:
        """Basis values on every cell of ``grid`` (rows in cell order)."""
        return np.array([self.evaluate(t, x, z) for x, z in grid.cells]).reshape(grid.size, self.k)

    # -- construction --------------------------------------------------------
    @classmethod
    def stratified(cls, x_levels: Mapping[int, Sequence], treated=(1,)) -> "SnmmSpec":
        """One indicator per ``(t, x_t)``: a separate blip for every stratum.

        ``x_levels`` maps each time to its covariate levels; ``None`` gives a
        single blip at that time regardless of the covariate.
        """
        basis = []
        for t in sorted(x_levels):
            levels = x_levels[t]
            if levels is None:
                basis.append(IndicatorBasis(t, frozenset(treated), None, f"gamma{t}"))
            else:
                for x in levels:
                    basis.append(IndicatorBasis(t, frozenset(treated), frozenset([x]), f"gamma{t}{x}"))
        return cls(tuple(basis))

    @classmethod
    def dose(cls, times: Iterable[int] | None = None) -> "SnmmSpec":
        """Single common effect ``phi = gamma * z_t``."""
        return cls((LinearBasis(None if times is None else frozenset(times), label="gamma"),))

    @classmethod
    def from_json(cls, obj) -> "SnmmSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        entries = obj["basis"] if isinstance(obj, dict) else obj
        basis = []
        for e in entries:
            kind = e.get("type")
            if kind == "indicator":
                x_in = e.get("x_in")
                basis.append(
                    IndicatorBasis(int(e["t"]), frozenset(e["z_in"]), None if x_in is None else frozenset(_key(x) for x in x_in), e.get("label"))
                )
            elif kind == "linear":
                t_set = e.get("t_set")
                basis.append(
                    LinearBasis(None if t_set is None else frozenset(t_set), e.get("g"), e.get("default"), e.get("label"))
                )
            else:
                raise ValueError(f"unknown basis type {kind!r}")
        return cls(tuple(basis))

    def to_json(self) -> dict:
        return {"basis": [b.to_json() for b in self.basis]}


# ---------------------------------------------------------------------------
# Transition probabilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellGrid:
    """All ``(x, z)`` level combinations at one time, x-major."""

    x_levels: tuple
    z_levels: tuple

    @property
    def size(self) -> int:
        return len(self.x_levels) * len(self.z_levels)

    @property
    def cells(self) -> list[tuple]:
        return [(x, z) for x in self.x_levels for z in self.z_levels]

    def index(self, x, z) -> int | None:
        try:
            return self.x_levels.index(x) * len(self.z_levels) + self.z_levels.index(z)
        except ValueError:
            return None

    @classmethod
    def of(cls, dataset: SequentialDataset, t: int) -> "CellGrid":
        return cls(tuple(dataset.covariate_levels(t)), tuple(dataset.treatment_levels(t)))


@dataclass(frozen=True)
class TransitionTable:
    """Conditional probabilities ``P(x_s, z_s | x_t, z_t)`` for all ``t < s``.

    ``joint[(t, s)]`` is ``(grid_t.size, grid_s.size)``; rows whose
    conditioning cell has zero mass are NaN (undefined).  ``mass[t-1]`` holds
    the count (or probability) of every cell at ``t``.
    """

    grids: tuple[CellGrid, ...]
    joint: dict = field(repr=False)
    mass: tuple = field(repr=False)

    @property
    def T(self) -> int:
        return len(self.grids)

    def conditional(self, t: int, x, z, s: int) -> np.ndarray:
        i = self.grids[t - 1].index(x, z)
        if i is None or not self.mass[t - 1][i] > 0:
            raise EstimabilityError(
                f"transition from cell (t={t}, x={x!r}, z={z!r}) is undefined: no observations",
                [Stratum(t, x, z)],
            )
        return self.joint[(t, s)][i]

    def prob(self, t: int, x, z, s: int, xs, zs) -> float:
        j = self.grids[s - 1].index(xs, zs)
        if j is None:
            return 0.0
        return float(self.conditional(t, x, z, s)[j])

    @classmethod
    def from_joint_counts(cls, grids: Sequence[CellGrid], counts: Mapping, mass: Sequence[np.ndarray]) -> "TransitionTable":
        joint = {}
        for (t, s), c in counts.items():
            c = np.asarray(c, dtype=float)
            total = c.sum(axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                joint[(t, s)] = np.where(total > 0, c / total, np.nan)
        return cls(tuple(grids), joint, tuple(np.asarray(m, dtype=float) for m in mass))


def _cell_codes(dataset: SequentialDataset, t: int) -> np.ndarray:
    _, xc = dataset.x_codes(t)
    zl, zc = dataset.z_codes(t)
    return xc * len(zl) + zc


def empirical_transitions(dataset: SequentialDataset) -> TransitionTable:
    """Transition proportions counted directly from the data (not chained)."""
    T = dataset.T
    grids = [CellGrid.of(dataset, t) for t in range(1, T + 1)]
    codes = [_cell_codes(dataset, t) for t in range(1, T + 1)]
    mass = [np.bincount(codes[t], minlength=grids[t].size).astype(float) for t in range(T)]
    counts = {}
    for t in range(1, T + 1):
        for s in range(t + 1, T + 1):
            ns = grids[s - 1].size
            flat = np.bincount(codes[t - 1] * ns + codes[s - 1], minlength=grids[t - 1].size * ns)
            counts[(t, s)] = flat.reshape(grids[t - 1].size, ns)
    return TransitionTable.from_joint_counts(grids, counts, mass)


# ---------------------------------------------------------------------------
# Design matrix
# ---------------------------------------------------------------------------


def design_row(snmm: SnmmSpec, transitions: TransitionTable, stratum, *, _basis_cache=None) -> np.ndarray:
    """Coefficients ``c_j(x_t; z_t)`` of one point effect on the blip parameters."""
    t, x, z = stratum
    if z == CONTROL:
        raise ValueError("design rows are defined for treated strata only")
    cache = {} if _basis_cache is None else _basis_cache
    row = snmm.evaluate(t, x, z)
    for s in range(t + 1, transitions.T + 1):
        if s not in cache:
            cache[s] = snmm.matrix(transitions.grids[s - 1], s)
        diff = transitions.conditional(t, x, z, s) - transitions.conditional(t, x, CONTROL, s)
        row = row + diff @ cache[s]
    return row


@dataclass(frozen=True)
class DesignMatrix:
    matrix: np.ndarray
    strata: tuple[Stratum, ...]
    labels: tuple[str, ...]
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        s = self.singular_values
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > RANK_RTOL * s[0]))

    @property
    def condition_number(self) -> float:
        s = self.singular_values
        if s.size == 0 or s[-1] == 0:
            return float("inf")
        return float(s[0] / s[-1])

    @property
    def zero_rows(self) -> list[Stratum]:
        """Strata whose point effect does not load on any blip parameter."""
        return [s for s, r in zip(self.strata, self.matrix) if not np.any(r)]

    @property
    def shape(self):
        return self.matrix.shape


def build_design_matrix(
    snmm: SnmmSpec, transitions: TransitionTable, strata_order: Sequence, *, check_rank: bool = True
) -> DesignMatrix:
    """Stack :func:`design_row` over ``strata_order`` and verify column rank ``k``."""
    strata = tuple(Stratum(*s) for s in strata_order)
    cache: dict = {}
    C = np.array([design_row(snmm, transitions, s, _basis_cache=cache) for s in strata]).reshape(len(strata), snmm.k)
    sv = np.linalg.svd(C, compute_uv=False) if C.size else np.zeros(0)
    dm = DesignMatrix(C, strata, tuple(snmm.labels), sv)
    if check_rank and dm.rank < snmm.k:
        dependent = _dependent_columns(C, dm.rank)
        names = [snmm.labels[j] for j in dependent]
        raise IdentifiabilityError(
            f"design matrix has rank {dm.rank} < k={snmm.k}; dependent column(s): {', '.join(names)}",
            names,
        )
    return dm


def _dependent_columns(C: np.ndarray, rank: int) -> list[int]:
    if C.shape[0] == 0:
        return list(range(C.shape[1]))
    _, _, piv = linalg.qr(C, pivoting=True, mode="economic")
    return sorted(int(j) for j in piv[rank:])


# ---------------------------------------------------------------------------
# Assignment-condition diagnostic
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssignmentCheck:
    t: int
    x: object
    n: int
    statistic: float | None
    dof: int | None
    p_value: float | None

    @property
    def applicable(self) -> bool:
        return self.p_value is not None


@dataclass(frozen=True)
class AssignmentReport:
    checks: tuple[AssignmentCheck, ...]

    def p_values(self) -> list[float]:
        return [c.p_value for c in self.checks if c.applicable]

    def flagged(self, alpha: float = 0.05) -> list[AssignmentCheck]:
        return [c for c in self.checks if c.applicable and c.p_value < alpha]


def check_assignment_condition(dataset: SequentialDataset) -> AssignmentReport:
    """Pearson independence test of ``z_t`` against ``z_{t-1}`` within each ``x_t`` level.

    Advisory only: a small p-value suggests treatment assignment depends on
    history beyond the latest covariate.
    """
    checks = []
    for t in range(1, dataset.T + 1):
        xl, xc = dataset.x_codes(t)
        if t == 1:
            checks.extend(AssignmentCheck(1, x, int(np.sum(xc == i)), None, None, None) for i, x in enumerate(xl))
            continue
        _, zc = dataset.z_codes(t)
        _, pc = dataset.z_codes(t - 1)
        for i, x in enumerate(xl):
            sel = xc == i
            table = np.zeros((pc.max() + 1, zc.max() + 1))
            np.add.at(table, (pc[sel], zc[sel]), 1)
            table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
            if table.shape[0] < 2 or table.shape[1] < 2:
                checks.append(AssignmentCheck(t, x, int(sel.sum()), None, None, None))
                continue
            res = chi2_contingency(table, correction=False)
            checks.append(AssignmentCheck(t, x, int(sel.sum()), float(res.statistic), int(res.dof), float(res.pvalue)))
    return AssignmentReport(tuple(checks))
