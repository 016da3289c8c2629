"""Per-time point effects ``theta(x_t; z_t) = mu(x_t, z_t) - mu(x_t, 0)``.

Two estimators are provided: stratified cell means (the default, used by the
simulation pipeline) and an identity-link quasi-likelihood regression with
binomial variance, for data whose covariates are partly continuous.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import block_diag

from .errors import ConvergenceError, EstimabilityError, IdentifiabilityError, SchemaError
from .seqdata import DUMMY_LEVEL, OutcomeFamily, SequentialDataset, Stratum, as_key, stratum_cells

__all__ = [
    "CellMoments",
    "MeanModelSpec",
    "PointEffectEstimate",
    "RegressionFit",
    "VarianceMode",
    "estimate_all_point_effects",
    "estimate_point_effects",
    "pooled_variance",
    "regression_point_effects",
    "stratum_means",
]

CONTROL = 0


class VarianceMode(str, enum.Enum):
    SAMPLE = "sample"
    POOLED_NORMAL = "pooled_normal"
    PLUGIN_FAMILY = "plugin_family"


class CellMoments(NamedTuple):
    mean: float
    count: int
    variance: float


def _moments(y: np.ndarray) -> CellMoments:
    n = len(y)
    m = float(np.mean(y))
    v = float(np.var(y, ddof=1)) if n > 1 else 0.0
    return CellMoments(m, n, v)


def stratum_means(dataset: SequentialDataset, t: int) -> dict[Stratum, CellMoments]:
    """Mean, count and sample variance (denominator ``count - 1``) per cell."""
    y = dataset.outcome
    return {s: _moments(y[idx]) for s, idx in stratum_cells(dataset, t).items()}


def pooled_variance(dataset: SequentialDataset) -> float:
    """Within-cell variance pooled over every cell at every time."""
    ss, dof = 0.0, 0
    for t in range(1, dataset.T + 1):
        for m in stratum_means(dataset, t).values():
            ss += m.variance * (m.count - 1)
            dof += m.count - 1
    if dof <= 0:
        raise EstimabilityError("no within-cell replication to pool a variance from")
    return ss / dof


def _mean_variance(m: CellMoments, mode: VarianceMode, family: OutcomeFamily, pooled: float | None) -> float:
    """Variance of a cell mean under ``mode``."""
    if mode is VarianceMode.POOLED_NORMAL:
        return pooled / m.count
    if mode is VarianceMode.PLUGIN_FAMILY:
        if family is OutcomeFamily.BERNOULLI:
            return m.mean * (1.0 - m.mean) / m.count
        if family is OutcomeFamily.POISSON:
            return m.mean / m.count
    return m.variance / m.count


@dataclass(frozen=True)
class PointEffectEstimate:
    """Stacked point-effect estimates with a block-diagonal covariance.

    ``strata`` fixes the ordering shared with the design matrix.  ``blocks``
    maps each time to the covariance of that time's entries; entries of
    different times are uncorrelated by construction.  ``skipped`` lists
    treated strata dropped because their control cell was empty.
    """

    strata: tuple[Stratum, ...]
    theta: np.ndarray
    blocks: dict[int, np.ndarray]
    skipped: tuple[Stratum, ...] = ()
    variance_mode: VarianceMode = VarianceMode.SAMPLE

    @property
    def times(self) -> list[int]:
        return sorted(self.blocks)

    @property
    def sigma(self) -> np.ndarray:
        blocks = [self.blocks[t] for t in self.times]
        if not blocks:
            return np.zeros((0, 0))
        return block_diag(*blocks)

    def __len__(self):
        return len(self.strata)

    @staticmethod
    def concat(parts: Sequence["PointEffectEstimate"]) -> "PointEffectEstimate":
        blocks = {}
        for p in parts:
            for t, b in p.blocks.items():
                if t in blocks:
                    raise ValueError(f"time {t} appears twice")
                blocks[t] = b
        mode = parts[0].variance_mode if parts else VarianceMode.SAMPLE
        return PointEffectEstimate(
            strata=tuple(s for p in parts for s in p.strata),
            theta=np.concatenate([p.theta for p in parts]) if parts else np.zeros(0),
            blocks=blocks,
            skipped=tuple(s for p in parts for s in p.skipped),
            variance_mode=mode,
        )


def estimate_point_effects(
    dataset: SequentialDataset,
    t: int,
    variance_mode: VarianceMode | str = VarianceMode.SAMPLE,
    *,
    pooled: float | None = None,
    drop_inestimable: bool = False,
) -> PointEffectEstimate:
    """Stratified point effects at time ``t`` and their covariance block.

    Two effects sharing a control cell covary by that cell's mean variance;
    effects in different covariate levels are uncorrelated.
    """
    mode = VarianceMode(variance_mode)
    if mode is VarianceMode.POOLED_NORMAL and pooled is None:
        pooled = pooled_variance(dataset)
    cells = stratum_means(dataset, t)
    strata, skipped = [], []
    for s in cells:
        if s.z == CONTROL:
            continue
        if Stratum(t, s.x, CONTROL) not in cells:
            skipped.append(s)
        else:
            strata.append(s)
    if skipped and not drop_inestimable:
        names = ", ".join(f"(t={s.t}, x={s.x!r}, z={s.z!r})" for s in skipped)
        raise EstimabilityError(f"empty control cell for treated strata {names}", skipped)
    m = len(strata)
    theta = np.empty(m)
    var_t = np.empty(m)
    var_c = np.empty(m)
    for i, s in enumerate(strata):
        treated, control = cells[s], cells[Stratum(t, s.x, CONTROL)]
        theta[i] = treated.mean - control.mean
        var_t[i] = _mean_variance(treated, mode, dataset.family, pooled)
        var_c[i] = _mean_variance(control, mode, dataset.family, pooled)
    block = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            if strata[i].x == strata[j].x:
                block[i, j] = var_c[i]
        block[i, i] = var_t[i] + var_c[i]
    return PointEffectEstimate(tuple(strata), theta, {t: block}, tuple(skipped), mode)


def estimate_all_point_effects(
    dataset: SequentialDataset,
    variance_mode: VarianceMode | str = VarianceMode.SAMPLE,
    *,
    times: Sequence[int] | None = None,
    drop_inestimable: bool = False,
) -> PointEffectEstimate:
    mode = VarianceMode(variance_mode)
    pooled = pooled_variance(dataset) if mode is VarianceMode.POOLED_NORMAL else None
    times = range(1, dataset.T + 1) if times is None else times
    parts = []
    skipped = []
    for t in times:
        try:
            parts.append(
                estimate_point_effects(dataset, t, mode, pooled=pooled, drop_inestimable=drop_inestimable)
            )
        except EstimabilityError as exc:
            skipped.extend(exc.strata)
    if skipped:
        names = ", ".join(f"(t={s.t}, x={s.x!r}, z={s.z!r})" for s in skipped)
        raise EstimabilityError(f"empty control cell for treated strata {names}", skipped)
    return PointEffectEstimate.concat(parts)


# ---------------------------------------------------------------------------
# Quasi-likelihood regression (identity link, binomial variance, dispersion 1)
# ---------------------------------------------------------------------------

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
MU_CLAMP = 1e-6


@dataclass(frozen=True)
class MeanModelSpec:
    """Linear predictor for ``E(Y | covariates, z_t)`` at treatment time ``t``.

    ``covariates`` are column names (earlier treatments such as ``"z1"`` are
    allowed).  With ``split_by`` set, a separate model is fitted in each level
    of that column and yields one point effect per level.
    """

    t: int
    covariates: tuple[str, ...] = ()
    split_by: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))


@dataclass
class _SubModel:
    level: object
    names: list[str]
    coef: np.ndarray
    cov: np.ndarray
    n: int
    iterations: int
    clamped: bool


@dataclass
class RegressionFit:
    """Result of :func:`regression_point_effects`.

    ``coefficients`` and ``covariance`` stack every sub-model (block-diagonal
    across sub-models, which use disjoint subjects).
    """

    spec: MeanModelSpec
    names: list[str]
    coefficients: np.ndarray
    covariance: np.ndarray
    point_effects: PointEffectEstimate
    models: list[_SubModel] = field(default_factory=list)

    def __iter__(self):
        yield self.coefficients
        yield self.covariance

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def irls_identity_binomial(
    X: np.ndarray,
    y: np.ndarray,
    *,
    weights: np.ndarray | None = None,
    tol: float = IRLS_TOL,
    max_iter: int = IRLS_MAX_ITER,
    warn: bool = True,
):
    """Identity-link fit with variance ``mu(1 - mu)`` and dispersion fixed at 1.

    ``weights`` are case weights (e.g. bootstrap counts).  Returns
    ``(beta, cov, iterations, clamped)``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    cw = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    p = X.shape[1]
    if np.linalg.matrix_rank(X[cw > 0]) < p:
        raise IdentifiabilityError("design matrix of the mean model is rank deficient")
    root = np.sqrt(cw)
    beta = np.linalg.lstsq(X * root[:, None], y * root, rcond=None)[0]
    clamped = False
    for it in range(1, max_iter + 1):
        mu = X @ beta
        if np.any(mu < MU_CLAMP) or np.any(mu > 1 - MU_CLAMP):
            clamped = True
            mu = np.clip(mu, MU_CLAMP, 1 - MU_CLAMP)
        sw = root / np.sqrt(mu * (1.0 - mu))
        new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        step = np.max(np.abs(new - beta))
        beta = new
        if step < tol:
            break
    else:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", last=beta)
    mu = np.clip(X @ beta, MU_CLAMP, 1 - MU_CLAMP)
    w = cw / (mu * (1.0 - mu))
    cov = np.linalg.inv((X * w[:, None]).T @ X)
    if clamped and warn:
        warnings.warn("fitted mean left (0, 1) during IRLS and was clamped", RuntimeWarning, stacklevel=2)
    return beta, cov, it, clamped


def regression_point_effects(dataset: SequentialDataset, spec: MeanModelSpec) -> RegressionFit:
    """Point effects of ``z_t`` as treatment coefficients of identity-link models."""
    t = spec.t
    z = dataset.z(t)
    cols = [dataset.column(c) for c in spec.covariates]
    if spec.split_by is not None:
        split = dataset.column(spec.split_by)
        levels = sorted({as_key(v) for v in split})
        groups = [(lvl, np.flatnonzero(split == lvl)) for lvl in levels]
    else:
        groups = [(DUMMY_LEVEL, np.arange(dataset.n))]
    models, strata, thetas, blocks = [], [], [], []
    for level, idx in groups:
        zl = sorted({as_key(v) for v in z[idx]})
        treated = [v for v in zl if v != CONTROL]
        if CONTROL not in zl or not treated:
            raise EstimabilityError(
                f"time {t}, level {level!r}: treatment has no contrast with control",
                [Stratum(t, level, v) for v in treated] or [Stratum(t, level, CONTROL)],
            )
        X = np.column_stack(
            [np.ones(len(idx))] + [c[idx] for c in cols] + [(z[idx] == v).astype(float) for v in treated]
        )
        names = ["intercept", *spec.covariates, *[f"z{t}={v}" for v in treated]]
        try:
            beta, cov, iters, clamped = irls_identity_binomial(X, dataset.outcome[idx])
        except IdentifiabilityError as exc:
            raise IdentifiabilityError(f"time {t}, level {level!r}: {exc}") from None
        models.append(_SubModel(level, names, beta, cov, len(idx), iters, clamped))
        k = len(treated)
        strata.extend(Stratum(t, level, v) for v in treated)
        thetas.append(beta[-k:])
        blocks.append(cov[-k:, -k:])
    pe = PointEffectEstimate(
        strata=tuple(strata),
        theta=np.concatenate(thetas),
        blocks={t: block_diag(*blocks)},
        variance_mode=VarianceMode.SAMPLE,
    )
    prefix = (lambda m: f"[{spec.split_by}={m.level}] ") if spec.split_by else (lambda m: "")
    return RegressionFit(
        spec=spec,
        names=[prefix(m) + nm for m in models for nm in m.names],
        coefficients=np.concatenate([m.coef for m in models]),
        covariance=block_diag(*[m.cov for m in models]),
        point_effects=pe,
        models=models,
    )


def check_columns(dataset: SequentialDataset, names: Sequence[str]) -> None:
    missing = []
    for name in names:
        try:
            dataset.column(name)
        except SchemaError:
            missing.append(name)
    if missing:
        raise SchemaError(f"missing columns {missing}")
