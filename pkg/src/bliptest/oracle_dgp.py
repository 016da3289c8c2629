"""Exact data-generating processes with known blip effects.

A process over ``T`` times with binary treatments is specified by

* covariate and treatment probability tables ``P(x_t | past)`` and
  ``P(z_t = 1 | past, x_t)``,
* blip effects from a linear SNMM and a true parameter vector,
* covariate point effects ``zeta(past; x_t)`` (zero at ``x_t = 0``) and a
  grand mean ``E(Y)``.

The treatment point effects at every full history follow from the blips and
the probability tables, and together with ``zeta`` and the grand mean they
determine the conditional outcome mean on every path (the "standard
parameters").  Everything here is exact enumeration over the ``prod(2 n_t)``
paths; it serves as the oracle for the estimator.

Tables are stored compactly and broadcast against the full history shape
``(n_1, 2, n_2, 2, ..., n_t)`` with numpy's right-aligned rules, so a table
of ``P(z_2 = 1 | x_2)`` is just a vector over the levels of ``x_2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import poisson

from ._seeding import philox
from .blip_model import CellGrid, SnmmSpec, TransitionTable, build_design_matrix
from .errors import DomainError
from .seqdata import OutcomeFamily, SequentialDataset, Stratum

__all__ = [
    "DecompositionCheck",
    "DgpSpec",
    "StandardParams",
    "build_standard_params",
    "default_spec",
    "exact_blip_decomposition_check",
    "exact_point_effects",
    "exact_transitions",
    "generate_dataset",
    "gformula_blips",
    "load_spec",
    "random_spec",
]

PROB_ATOL = 1e-12
SHIPPED = ("normal", "bernoulli", "poisson")


def _as_table(a) -> np.ndarray:
    return np.asarray(a, dtype=float)


@dataclass(frozen=True, eq=False)
class DgpSpec:
    """Probability tables, blip and covariate effects of an exact process.

    ``n_levels[t-1]`` is the number of covariate levels at time ``t`` (levels
    are ``0 .. n-1``; ``1`` means no covariate is measured).  ``p_x[t-1]``
    broadcasts to ``(n_1, 2, ..., n_{t-1}, 2, n_t)``, ``p_z[t-1]`` (the
    probability of ``z_t = 1``) and ``zeta[t-1]`` to the history shape ending
    in ``n_t``.  With ``latest_covariate_only`` the treatment probability may
    depend on ``x_t`` alone, which makes the point-effect decomposition exact.
    """

    family: OutcomeFamily
    n_levels: tuple[int, ...]
    p_x: tuple[np.ndarray, ...]
    p_z: tuple[np.ndarray, ...]
    zeta: tuple[np.ndarray, ...]
    snmm: SnmmSpec
    gamma: np.ndarray
    grand_mean: float
    sigma: float = 1.0
    name: str = ""
    latest_covariate_only: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", OutcomeFamily.coerce(self.family))
        object.__setattr__(self, "n_levels", tuple(int(n) for n in self.n_levels))
        T = len(self.n_levels)
        zeta = tuple(self.zeta) if self.zeta else ()
        if not zeta:
            zeta = tuple(np.zeros(n) for n in self.n_levels)
        for name, tables in (("p_x", self.p_x), ("p_z", self.p_z), ("zeta", zeta)):
            if len(tables) != T:
                raise ValueError(f"{name} needs one table per time ({T})")
        object.__setattr__(self, "p_x", tuple(_as_table(a) for a in self.p_x))
        object.__setattr__(self, "p_z", tuple(_as_table(a) for a in self.p_z))
        object.__setattr__(self, "zeta", tuple(_as_table(a) for a in zeta))
        gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        if gamma.shape[0] != self.snmm.k:
            raise ValueError(f"gamma has {gamma.shape[0]} entries for an SNMM with k={self.snmm.k}")
        object.__setattr__(self, "gamma", gamma)
        if self.family is OutcomeFamily.NORMAL and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        self._validate()

    # -- shapes ----------------------------------------------------------
    @property
    def T(self) -> int:
        return len(self.n_levels)

    def history_shape(self, t: int) -> tuple[int, ...]:
        """Shape of ``(x_1, z_1, ..., x_{t-1}, z_{t-1})``."""
        shape = []
        for n in self.n_levels[: t - 1]:
            shape += [n, 2]
        return tuple(shape)

    def x_shape(self, t: int) -> tuple[int, ...]:
        return self.history_shape(t) + (self.n_levels[t - 1],)

    @property
    def path_shape(self) -> tuple[int, ...]:
        return self.history_shape(self.T + 1)

    def px(self, t: int) -> np.ndarray:
        return np.broadcast_to(self.p_x[t - 1], self.x_shape(t))

    def pz(self, t: int) -> np.ndarray:
        return np.broadcast_to(self.p_z[t - 1], self.x_shape(t))

    def zeta_full(self, t: int) -> np.ndarray:
        return np.broadcast_to(self.zeta[t - 1], self.x_shape(t))

    def blips(self, t: int) -> np.ndarray:
        """Blip of ``z_t = 1`` for each level of ``x_t``."""
        return np.array([self.snmm.blip(self.gamma, t, x, 1) for x in range(self.n_levels[t - 1])])

    def grid(self, t: int) -> CellGrid:
        return CellGrid(tuple(range(self.n_levels[t - 1])), (0, 1))

    def _validate(self) -> None:
        for t in range(1, self.T + 1):
            try:
                px, pz, zeta = self.px(t), self.pz(t), self.zeta_full(t)
            except ValueError:
                raise ValueError(f"tables at time {t} do not broadcast to shape {self.x_shape(t)}") from None
            if np.any(px <= 0) or np.any(np.abs(px.sum(axis=-1) - 1) > PROB_ATOL):
                raise ValueError(f"P(x_{t} | past) must be strictly positive and sum to 1")
            if np.any(pz <= 0) or np.any(pz >= 1):
                raise ValueError(f"P(z_{t} = 1 | past) must lie strictly inside (0, 1)")
            if np.any(zeta[..., 0] != 0):
                raise ValueError(f"zeta at time {t} must vanish at x_{t} = 0")
            if self.latest_covariate_only:
                flat = pz.reshape(-1, pz.shape[-1])
                if np.any(flat != flat[:1]):
                    raise ValueError(f"P(z_{t} = 1) may depend on x_{t} only")
            for x in range(self.n_levels[t - 1]):
                if self.snmm.blip(self.gamma, t, x, 0) != 0:
                    raise ValueError("blip effects must vanish at the control treatment")

    # -- JSON ------------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "name": self.name,
            "family": self.family.value,
            "n_levels": list(self.n_levels),
            "p_x": [a.tolist() for a in self.p_x],
            "p_z": [a.tolist() for a in self.p_z],
            "zeta": [a.tolist() for a in self.zeta],
            "snmm": self.snmm.to_json(),
            "gamma": self.gamma.tolist(),
            "grand_mean": self.grand_mean,
            "sigma": self.sigma,
            "latest_covariate_only": self.latest_covariate_only,
        }

    @classmethod
    def from_json(cls, obj) -> "DgpSpec":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(
            family=obj["family"],
            n_levels=obj["n_levels"],
            p_x=obj["p_x"],
            p_z=obj["p_z"],
            zeta=obj.get("zeta") or (),
            snmm=SnmmSpec.from_json(obj["snmm"]),
            gamma=obj["gamma"],
            grand_mean=float(obj["grand_mean"]),
            sigma=float(obj.get("sigma", 1.0)),
            name=obj.get("name", ""),
            latest_covariate_only=bool(obj.get("latest_covariate_only", True)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @cached_property
    def standard(self) -> "StandardParams":
        return build_standard_params(self)


def load_spec(source) -> DgpSpec:
    """A shipped spec by family name, or a JSON file path."""
    if isinstance(source, str) and source in SHIPPED:
        text = resources.files("bliptest").joinpath("data", f"{source}.json").read_text()
        return DgpSpec.from_json(text)
    return DgpSpec.from_json(Path(source).read_text())


def default_spec(family: OutcomeFamily | str = OutcomeFamily.NORMAL) -> DgpSpec:
    return load_spec(OutcomeFamily.coerce(family).value)


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


def _expand(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def _z_dist(pz: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - pz, pz], axis=-1)


def path_probabilities(spec: DgpSpec) -> np.ndarray:
    """``P(x_1, z_1, ..., x_T, z_T)`` over :attr:`DgpSpec.path_shape`."""
    P = np.ones(())
    for t in range(1, spec.T + 1):
        P = P[..., None] * spec.px(t)
        P = P[..., None] * _z_dist(spec.pz(t))
    return P


def history_point_effects(spec: DgpSpec) -> list[np.ndarray]:
    """Treatment point effects ``theta_t(history, x_t)`` at every full history.

    ``theta_t = phi_t(x_t) + E[sum_{s>t} phi_s | h, z_t=1] - E[... | h, z_t=0]``,
    the expectations running over the process's own future laws.  Computed
    backwards: ``future[t]`` is the expected sum of later blips given the
    history through ``z_t``.
    """
    T = spec.T
    future = np.zeros(spec.x_shape(T) + (2,))
    thetas: list[np.ndarray] = [None] * T
    for t in range(T, 0, -1):
        phi = spec.blips(t)
        thetas[t - 1] = phi + future[..., 1] - future[..., 0]
        if t == 1:
            break
        # value of the history through x_t: average over z_t of blip + later blips
        zd = _z_dist(spec.pz(t))
        value = (zd * (phi[:, None] * np.array([0.0, 1.0]) + future)).sum(axis=-1)
        future = (spec.px(t) * value).sum(axis=-1)
    return [np.broadcast_to(th, spec.x_shape(t)).copy() for t, th in enumerate(thetas, 1)]


@dataclass(frozen=True, eq=False)
class StandardParams:
    """Conditional outcome mean ``mu`` and probability of every full path."""

    mu: np.ndarray
    prob: np.ndarray
    theta_history: tuple[np.ndarray, ...] = field(repr=False)

    def paths(self):
        """``(path, mu, probability)`` for every path, in row-major order."""
        for idx in np.ndindex(self.mu.shape):
            yield idx, float(self.mu[idx]), float(self.prob[idx])

    @property
    def mean(self) -> float:
        return float(np.sum(self.mu * self.prob))


def build_standard_params(spec: DgpSpec) -> StandardParams:
    """Outcome means on every path from point effects, covariate effects and grand mean.

    ``mu(path) = E(Y) + sum_t theta_t(h) (z_t - P(z_t=1 | h))
                 + sum_t (zeta_t(h; x_t) - sum_x zeta_t(h; x) P(x | h))``
    """
    full = len(spec.path_shape)
    thetas = history_point_effects(spec)
    mu = np.full(spec.path_shape, float(spec.grand_mean))
    for t in range(1, spec.T + 1):
        zeta, px = spec.zeta_full(t), spec.px(t)
        centred = zeta - (zeta * px).sum(axis=-1, keepdims=True)
        mu = mu + _expand(centred, full)
        z_term = thetas[t - 1][..., None] * (np.array([0.0, 1.0]) - spec.pz(t)[..., None])
        mu = mu + _expand(z_term, full)
    prob = path_probabilities(spec)
    family = spec.family
    if family is OutcomeFamily.BERNOULLI:
        bad = np.argwhere((mu <= 0) | (mu >= 1))
        if bad.size:
            raise DomainError(f"Bernoulli mean {mu[tuple(bad[0])]:.4g} outside (0, 1) on path {tuple(bad[0])}")
    elif family is OutcomeFamily.POISSON:
        bad = np.argwhere(mu <= 0)
        if bad.size:
            raise DomainError(f"Poisson mean {mu[tuple(bad[0])]:.4g} not positive on path {tuple(bad[0])}")
    return StandardParams(mu, prob, tuple(thetas))


def _axes(t: int) -> tuple[int, int]:
    return 2 * (t - 1), 2 * (t - 1) + 1


def _marginal(P: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    drop = tuple(a for a in range(P.ndim) if a not in keep)
    return P.sum(axis=drop)


def exact_point_effects(spec: DgpSpec, route: str = "enumeration") -> dict[Stratum, float]:
    """Exact ``theta(x_t; z_t=1)`` for every time and covariate level.

    ``route="enumeration"`` differences ``mu(x_t, z_t) = sum mu(path) P(path | x_t, z_t)``;
    ``route="history"`` averages the history-level closed forms over
    ``P(history | x_t)`` and never touches ``mu(path)``.
    """
    sp = spec.standard
    P = sp.prob
    out = {}
    for t in range(1, spec.T + 1):
        ax, az = _axes(t)
        if route == "enumeration":
            mass = _marginal(P, (ax, az))
            mean = _marginal(P * sp.mu, (ax, az)) / mass
            effects = mean[:, 1] - mean[:, 0]
        elif route == "history":
            # P(history, x_t) over the history shape through x_t
            hx = _marginal(P, tuple(range(az)))
            theta = sp.theta_history[t - 1]
            flat_p = hx.reshape(-1, hx.shape[-1])
            effects = (flat_p * theta.reshape(-1, theta.shape[-1])).sum(axis=0) / flat_p.sum(axis=0)
        else:
            raise ValueError(f"unknown route {route!r}")
        for x, v in enumerate(effects):
            out[Stratum(t, x, 1)] = float(v)
    return out


def exact_transitions(spec: DgpSpec) -> TransitionTable:
    """True ``P(x_s, z_s | x_t, z_t)`` for all ``t < s``."""
    P = spec.standard.prob
    T = spec.T
    grids = [spec.grid(t) for t in range(1, T + 1)]
    mass = [_marginal(P, _axes(t)).reshape(-1) for t in range(1, T + 1)]
    joint = {}
    for t in range(1, T + 1):
        for s in range(t + 1, T + 1):
            j = _marginal(P, _axes(t) + _axes(s)).reshape(grids[t - 1].size, grids[s - 1].size)
            joint[(t, s)] = j
    return TransitionTable.from_joint_counts(grids, joint, mass)


def gformula_blips(spec: DgpSpec) -> list[np.ndarray]:
    """Blips recomputed from ``mu(path)`` by the g-formula with later treatments set to 0.

    Returns, per time, an array over the history shape through ``x_t``; each
    entry is ``E[Y(past, z_t=1, 0...)] - E[Y(past, 0, 0...)]`` at that history.
    """
    mu = spec.standard.mu
    out = []
    for t in range(1, spec.T + 1):
        arr = mu
        for s in range(spec.T, t, -1):
            arr = arr[..., 0]
            arr = (spec.px(s) * arr).sum(axis=-1)
        out.append(arr[..., 1] - arr[..., 0])
    return out


@dataclass(frozen=True)
class DecompositionCheck:
    residual: float
    theta: np.ndarray
    design: np.ndarray
    strata: tuple[Stratum, ...]


def exact_blip_decomposition_check(spec: DgpSpec) -> DecompositionCheck:
    """``max |C gamma - theta|`` with ``C`` built from the true transitions.

    Zero up to rounding when treatment depends on the latest covariate only;
    otherwise the residual measures the failure of the decomposition.
    """
    theta = exact_point_effects(spec)
    strata = tuple(theta)
    C = build_design_matrix(spec.snmm, exact_transitions(spec), strata, check_rank=False).matrix
    th = np.array([theta[s] for s in strata])
    res = float(np.max(np.abs(C @ spec.gamma - th))) if th.size else 0.0
    return DecompositionCheck(res, th, C, strata)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

_U_EPS = 2.0**-53


def generate_dataset(spec: DgpSpec, n: int, seed=0) -> SequentialDataset:
    """Draw ``n`` subjects; subject ``i`` uses row ``i`` of one uniform matrix.

    Each subject consumes ``2T + 1`` uniforms from a Philox stream keyed by
    ``seed`` and the variables are obtained by inverse-CDF transforms, so a
    dataset is identical on every platform and prefixes agree across ``n``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    T = spec.T
    sp = spec.standard
    u = philox(seed).random((n, 2 * T + 1))
    u = np.clip(u, _U_EPS, 1.0 - _U_EPS)
    hist: list[np.ndarray] = []
    for t in range(1, T + 1):
        px = spec.px(t)[tuple(hist)]
        cdf = np.cumsum(px, axis=-1)
        x = np.minimum((u[:, 2 * t - 2, None] >= cdf).sum(axis=1), spec.n_levels[t - 1] - 1)
        hist.append(x)
        pz = spec.pz(t)[tuple(hist)]
        hist.append((u[:, 2 * t - 1] < pz).astype(np.intp))
    mu = sp.mu[tuple(hist)]
    v = u[:, 2 * T]
    if spec.family is OutcomeFamily.NORMAL:
        y = mu + spec.sigma * ndtri(v)
    elif spec.family is OutcomeFamily.BERNOULLI:
        if np.any((mu <= 0) | (mu >= 1)):
            raise DomainError("Bernoulli mean outside (0, 1)")
        y = (v < mu).astype(float)
    else:
        if np.any(mu <= 0):
            raise DomainError("Poisson mean not positive")
        y = poisson.ppf(v, mu)
    names, covs = [], []
    for t in range(1, T + 1):
        if spec.n_levels[t - 1] > 1:
            names.append((f"x{t}",))
            covs.append(hist[2 * t - 2][:, None].astype(float))
        else:
            names.append(())
            covs.append(np.empty((n, 0)))
    z = np.column_stack(hist[1::2]).astype(float)
    return SequentialDataset(
        ids=tuple(str(i + 1) for i in range(n)),
        covariate_names=tuple(names),
        covariates=tuple(covs),
        treatments=z,
        outcome=y,
        family=spec.family,
    )


def random_spec(
    rng: np.random.Generator,
    *,
    T: int | None = None,
    max_levels: int = 3,
    latest_covariate_only: bool = True,
    family: OutcomeFamily | str = OutcomeFamily.NORMAL,
) -> DgpSpec:
    """A random valid spec with one blip parameter per ``(t, x_t)``.

    Probabilities are bounded away from 0 and 1.  For non-normal families the
    effects are scaled down so every path mean stays in range.
    """
    family = OutcomeFamily.coerce(family)
    T = int(rng.integers(1, 4)) if T is None else T
    n_levels = tuple(int(v) for v in rng.integers(1, max_levels + 1, size=T))
    hist_shape: list[int] = []
    p_x, p_z, zeta = [], [], []
    for t, nx in enumerate(n_levels, 1):
        shape = tuple(hist_shape) + (nx,)
        w = rng.uniform(0.2, 1.0, size=shape)
        p_x.append(w / w.sum(axis=-1, keepdims=True))
        if latest_covariate_only:
            p_z.append(rng.uniform(0.2, 0.8, size=nx))
        else:
            p_z.append(rng.uniform(0.1, 0.9, size=shape))
        zt = rng.normal(size=shape)
        zt[..., 0] = 0.0
        zeta.append(zt)
        hist_shape += [nx, 2]
    snmm = SnmmSpec.stratified({t: list(range(n)) for t, n in enumerate(n_levels, 1)})
    gamma = rng.normal(size=snmm.k)
    grand_mean = float(rng.normal())
    if family is not OutcomeFamily.NORMAL:
        scale = 0.02 / T
        gamma *= scale
        zeta = [z * scale for z in zeta]
        grand_mean = 0.5 if family is OutcomeFamily.BERNOULLI else 5.0
    return DgpSpec(
        family=family,
        n_levels=n_levels,
        p_x=tuple(p_x),
        p_z=tuple(p_z),
        zeta=tuple(zeta),
        snmm=snmm,
        gamma=gamma,
        grand_mean=grand_mean,
        sigma=float(rng.uniform(0.5, 2.0)),
        name="random",
        latest_covariate_only=latest_covariate_only,
    )
