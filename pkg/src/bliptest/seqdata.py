"""Sequential treatment data: records of ``(x1, z1, ..., xT, zT, y)``.

The CSV layout is ``id, x1, z1, x2, z2, ..., xT, zT, y``.  Covariate columns are
optional at every time; several covariates at one time are written
``x{t}_{name}``.  The compact form ``x{t}{k}`` (e.g. ``x11``, ``x13``) is also
recognised when ``t`` is a single digit and the full number exceeds ``T``.
"""

from __future__ import annotations

import csv
import enum
import io
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence, TextIO

import numpy as np

from .errors import DomainError, EmptyDatasetError, ParseError, SchemaError

__all__ = [
    "OutcomeFamily",
    "Schema",
    "SequentialDataset",
    "Stratum",
    "parse_dataset",
    "read_dataset",
    "serialize_dataset",
    "stratum_cells",
    "write_dataset",
]

DUMMY_LEVEL = 0


class OutcomeFamily(str, enum.Enum):
    NORMAL = "normal"
    BERNOULLI = "bernoulli"
    POISSON = "poisson"

    @classmethod
    def coerce(cls, value: "OutcomeFamily | str") -> "OutcomeFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown outcome family {value!r}") from None

    def invalid_mask(self, y: np.ndarray) -> np.ndarray:
        """Boolean mask of outcomes outside the family's support."""
        y = np.asarray(y, dtype=float)
        bad = ~np.isfinite(y)
        if self is OutcomeFamily.BERNOULLI:
            bad |= (y != 0) & (y != 1)
        elif self is OutcomeFamily.POISSON:
            with np.errstate(invalid="ignore"):
                bad |= (y < 0) | (np.floor(y) != y)
        return bad


class Stratum(NamedTuple):
    """Cell ``(t, x_t, z_t)`` defined by the latest covariate and treatment."""

    t: int
    x: object
    z: object


def as_key(value):
    """Hashable, sortable level for a covariate or treatment value."""
    if isinstance(value, tuple):
        return tuple(as_key(v) for v in value)
    v = float(value)
    if v.is_integer():
        return int(v)
    return v


def _fmt(value: float) -> str:
    v = float(value)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


@dataclass(frozen=True)
class Schema:
    """Column declaration for :func:`parse_dataset`.

    ``covariate_columns`` maps a time index to its covariate column names.  When
    omitted, the layout is inferred from the header.
    """

    family: OutcomeFamily | str = OutcomeFamily.NORMAL
    covariate_columns: Mapping[int, Sequence[str]] | None = None


@dataclass(frozen=True, eq=False)
class SequentialDataset:
    """Immutable collection of ``n`` subjects observed over ``T`` treatment times.

    ``covariates[t-1]`` is an ``(n, p_t)`` array whose columns are named by
    ``covariate_names[t-1]``; ``p_t = 0`` means no covariate was measured at
    ``t`` and every subject sits in the single dummy level ``0``.
    """

    ids: tuple[str, ...]
    covariate_names: tuple[tuple[str, ...], ...]
    covariates: tuple[np.ndarray, ...]
    treatments: np.ndarray
    outcome: np.ndarray
    family: OutcomeFamily = OutcomeFamily.NORMAL
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        family = OutcomeFamily.coerce(self.family)
        object.__setattr__(self, "family", family)
        n = len(self.ids)
        if n < 1:
            raise EmptyDatasetError("dataset has no records")
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise DomainError(f"duplicate subject id {dup!r}")
        z = np.array(self.treatments, dtype=float).reshape(n, -1)
        y = np.array(self.outcome, dtype=float).reshape(n)
        T = z.shape[1]
        if T < 1:
            raise SchemaError("at least one treatment time is required")
        if len(self.covariates) != T or len(self.covariate_names) != T:
            raise SchemaError("covariates must be given for every time (possibly empty)")
        xs = []
        for t, (names, x) in enumerate(zip(self.covariate_names, self.covariates), start=1):
            x = np.array(x, dtype=float).reshape(n, len(names))
            if not np.all(np.isfinite(x)):
                raise DomainError(f"non-finite covariate value at time {t}")
            x.flags.writeable = False
            xs.append(x)
        if not np.all(np.isfinite(z)):
            raise DomainError("non-finite treatment value")
        bad = family.invalid_mask(y)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DomainError(
                f"outcome {y[i]!r} of subject {self.ids[i]!r} is invalid for family {family.value}"
            )
        z.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        object.__setattr__(self, "covariate_names", tuple(tuple(c) for c in self.covariate_names))
        object.__setattr__(self, "covariates", tuple(xs))
        object.__setattr__(self, "treatments", z)
        object.__setattr__(self, "outcome", y)

    # -- shape -----------------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def T(self) -> int:
        return self.treatments.shape[1]

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"time index {t} outside 1..{self.T}")

    # -- levels and codes ------------------------------------------------
    def x_codes(self, t: int) -> tuple[list, np.ndarray]:
        """Sorted covariate levels at ``t`` and each subject's level index."""
        self._check_t(t)
        key = ("x", t)
        if key not in self._cache:
            x = self.covariates[t - 1]
            if x.shape[1] == 0:
                levels, codes = [DUMMY_LEVEL], np.zeros(self.n, dtype=np.intp)
            elif x.shape[1] == 1:
                vals, codes = np.unique(x[:, 0], return_inverse=True)
                levels = [as_key(v) for v in vals]
            else:
                vals, codes = np.unique(x, axis=0, return_inverse=True)
                levels = [as_key(tuple(row)) for row in vals]
            self._cache[key] = (levels, np.asarray(codes, dtype=np.intp).reshape(-1))
        levels, codes = self._cache[key]
        return list(levels), codes

    def z_codes(self, t: int) -> tuple[list, np.ndarray]:
        self._check_t(t)
        key = ("z", t)
        if key not in self._cache:
            vals, codes = np.unique(self.treatments[:, t - 1], return_inverse=True)
            self._cache[key] = ([as_key(v) for v in vals], np.asarray(codes, dtype=np.intp).reshape(-1))
        levels, codes = self._cache[key]
        return list(levels), codes

    def covariate_levels(self, t: int) -> list:
        return self.x_codes(t)[0]

    def treatment_levels(self, t: int) -> list:
        return self.z_codes(t)[0]

    def x(self, t: int) -> list:
        """Stratum covariate value of every subject at time ``t``."""
        levels, codes = self.x_codes(t)
        return [levels[c] for c in codes]

    def z(self, t: int) -> np.ndarray:
        self._check_t(t)
        return self.treatments[:, t - 1]

    def column(self, name: str) -> np.ndarray:
        """Values of a covariate or treatment column by its CSV header name."""
        for names, x in zip(self.covariate_names, self.covariates):
            if name in names:
                return x[:, names.index(name)]
        m = re.fullmatch(r"z(\d+)", name)
        if m and 1 <= int(m.group(1)) <= self.T:
            return self.z(int(m.group(1)))
        if name == "y":
            return self.outcome
        raise SchemaError(f"no column named {name!r}")

    # -- derived datasets ------------------------------------------------
    def subset(self, index: Iterable[int]) -> "SequentialDataset":
        """Rows ``index`` (repeats allowed; repeated ids get a ``#k`` suffix)."""
        index = np.asarray(list(index), dtype=np.intp)
        ids, seen = [], {}
        for i in index:
            base = self.ids[i]
            k = seen.get(base, 0)
            seen[base] = k + 1
            ids.append(base if k == 0 else f"{base}#{k}")
        return SequentialDataset(
            ids=tuple(ids),
            covariate_names=self.covariate_names,
            covariates=tuple(x[index] for x in self.covariates),
            treatments=self.treatments[index],
            outcome=self.outcome[index],
            family=self.family,
        )

    def with_outcome(self, y: np.ndarray) -> "SequentialDataset":
        return SequentialDataset(
            ids=self.ids,
            covariate_names=self.covariate_names,
            covariates=self.covariates,
            treatments=self.treatments,
            outcome=np.asarray(y, dtype=float),
            family=self.family,
        )

    def drop_covariates(self, times: Iterable[int]) -> "SequentialDataset":
        """Copy with the covariates at ``times`` removed (dummy level there)."""
        drop = set(times)
        names = tuple(() if t in drop else n for t, n in enumerate(self.covariate_names, 1))
        xs = tuple(
            np.empty((self.n, 0)) if t in drop else x for t, x in enumerate(self.covariates, 1)
        )
        return SequentialDataset(self.ids, names, xs, self.treatments, self.outcome, self.family)

    # -- comparison ------------------------------------------------------
    def equals(self, other: "SequentialDataset") -> bool:
        return (
            isinstance(other, SequentialDataset)
            and self.family == other.family
            and self.ids == other.ids
            and self.covariate_names == other.covariate_names
            and all(np.array_equal(a, b) for a, b in zip(self.covariates, other.covariates))
            and np.array_equal(self.treatments, other.treatments)
            and np.array_equal(self.outcome, other.outcome)
        )

    __eq__ = equals
    __hash__ = None

    def __repr__(self):
        return f"SequentialDataset(n={self.n}, T={self.T}, family={self.family.value})"


def stratum_cells(dataset: SequentialDataset, t: int) -> dict[Stratum, np.ndarray]:
    """Partition subject indices by ``(x_t, z_t)``; keys sorted by ``(x, z)``."""
    xl, xc = dataset.x_codes(t)
    zl, zc = dataset.z_codes(t)
    cell = xc * len(zl) + zc
    order = np.argsort(cell, kind="stable")
    bounds = np.flatnonzero(np.diff(cell[order])) + 1
    cells = {}
    for group in np.split(order, bounds):
        c = cell[group[0]]
        cells[Stratum(t, xl[c // len(zl)], zl[c % len(zl)])] = group
    return cells


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

_X_RE = re.compile(r"x(\d+)(?:_(\w+))?")
_Z_RE = re.compile(r"z(\d+)")


def _layout(header: list[str], schema: Schema):
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in header")
    if not header or header[0] != "id":
        raise SchemaError("first column must be 'id'")
    if header[-1] != "y":
        raise SchemaError("last column must be 'y'")
    z_cols = {}
    for j, name in enumerate(header):
        m = _Z_RE.fullmatch(name)
        if m:
            z_cols[int(m.group(1))] = j
    T = max(z_cols, default=0)
    if T < 1 or sorted(z_cols) != list(range(1, T + 1)):
        raise SchemaError("treatment columns must be z1..zT")
    x_cols: dict[int, list[int]] = {t: [] for t in range(1, T + 1)}
    if schema.covariate_columns is not None:
        for t, names in schema.covariate_columns.items():
            if not 1 <= int(t) <= T:
                raise SchemaError(f"covariate time {t} outside 1..{T}")
            for name in names:
                if name not in header:
                    raise SchemaError(f"declared covariate column {name!r} not in header")
                x_cols[int(t)].append(header.index(name))
        used = {j for cols in x_cols.values() for j in cols} | set(z_cols.values())
        extra = [h for j, h in enumerate(header[1:-1], 1) if j not in used]
        if extra:
            raise SchemaError(f"undeclared columns {extra}")
    else:
        for j, name in enumerate(header[1:-1], 1):
            if _Z_RE.fullmatch(name):
                continue
            m = _X_RE.fullmatch(name)
            if not m:
                raise SchemaError(f"unrecognised column {name!r}")
            digits = m.group(1)
            t = int(digits)
            if m.group(2) is None and t > T and len(digits) >= 2:
                t = int(digits[0])
            if not 1 <= t <= T:
                raise SchemaError(f"covariate column {name!r} refers to a time outside 1..{T}")
            x_cols[t].append(j)
    return T, x_cols, z_cols


def parse_dataset(text: str | TextIO, schema: Schema | OutcomeFamily | str = Schema()) -> SequentialDataset:
    """Parse CSV text (or an open text stream) into a validated dataset."""
    if not isinstance(schema, Schema):
        schema = Schema(family=schema)
    family = OutcomeFamily.coerce(schema.family)
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyDatasetError("no header row", line=1) from None
    T, x_cols, z_cols = _layout(header, schema)
    width = len(header)
    ids, rows, lines = [], [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", line=line)
        try:
            values = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", line=line) from None
        ids.append(row[0].strip())
        rows.append(values)
        lines.append(line)
    if not rows:
        raise EmptyDatasetError("dataset body is empty", line=2)
    data = np.array(rows, dtype=float)
    y = data[:, -1]
    bad = family.invalid_mask(y)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"line {lines[i]}: outcome {_fmt(y[i])} of subject {ids[i]!r} "
            f"is invalid for family {family.value}"
        )
    finite = np.isfinite(data[:, :-1]).all(axis=1)
    if not finite.all():
        i = int(np.flatnonzero(~finite)[0])
        raise ParseError("non-finite covariate or treatment", line=lines[i])
    seen = {}
    for i, sid in enumerate(ids):
        if sid in seen:
            raise ParseError(f"duplicate subject id {sid!r} (first on line {seen[sid]})", line=lines[i])
        seen[sid] = lines[i]
    return SequentialDataset(
        ids=tuple(ids),
        covariate_names=tuple(tuple(header[j] for j in x_cols[t]) for t in range(1, T + 1)),
        covariates=tuple(data[:, [j - 1 for j in x_cols[t]]] for t in range(1, T + 1)),
        treatments=data[:, [z_cols[t] - 1 for t in range(1, T + 1)]],
        outcome=y,
        family=family,
    )


def serialize_dataset(dataset: SequentialDataset) -> str:
    """CSV text in temporal column order; exact inverse of :func:`parse_dataset`."""
    header = ["id"]
    blocks = []
    for t in range(1, dataset.T + 1):
        header.extend(dataset.covariate_names[t - 1])
        header.append(f"z{t}")
        blocks.append(dataset.covariates[t - 1])
        blocks.append(dataset.treatments[:, t - 1 : t])
    blocks.append(dataset.outcome[:, None])
    header.append("y")
    values = np.hstack(blocks)
    out = io.StringIO()
    out.write(",".join(header) + "\n")
    for sid, row in zip(dataset.ids, values):
        out.write(sid + "," + ",".join(_fmt(v) for v in row) + "\n")
    return out.getvalue()


def read_dataset(path, schema: Schema | OutcomeFamily | str = Schema()) -> SequentialDataset:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_dataset(fh, schema)


def write_dataset(dataset: SequentialDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(serialize_dataset(dataset))
