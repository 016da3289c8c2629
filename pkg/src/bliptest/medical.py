"""Two-period analysis with a binary outcome and partly continuous baseline covariates.

Point effects come from identity-link mean models fitted by quasi-likelihood
(binomial variance): one model for the first treatment and one per level of
the intermediate covariate ``x2`` for the second.  The second treatment is the
last, so its point effects are its blips; the first blip follows by
subtracting the expected later blips,

    gamma1 = theta1 - sum_j c2j gamma2j,
    c2j = P(x2=j, z2=1 | z1=1) - P(x2=j, z2=1 | z1=0).

Standard errors come from a subject bootstrap of the whole procedure.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._seeding import child_seed, philox
from .blip_model import IndicatorBasis, SnmmSpec, build_design_matrix, empirical_transitions
from .errors import BootstrapError, SchemaError, StatisticalError
from .estimator import MAX_FAIL_FRACTION, chi2_survival, resample_weights
from .point_effects import (
    MeanModelSpec,
    PointEffectEstimate,
    RegressionFit,
    check_columns,
    irls_identity_binomial,
    regression_point_effects,
)
from .seqdata import OutcomeFamily, SequentialDataset, as_key

__all__ = [
    "CoefficientReport",
    "MedicalDesign",
    "MedicalReport",
    "analyze_medical",
    "generate_medical",
]

Z_CRIT = 1.96
SELECT_LEVEL = 0.1


@dataclass(frozen=True)
class MedicalDesign:
    """Covariates of the two mean models; the second is fitted within each ``split_by`` level."""

    t1_covariates: tuple[str, ...] = ("x11", "x13")
    t2_covariates: tuple[str, ...] = ("x11", "z1")
    split_by: str = "x2"

    def __post_init__(self):
        object.__setattr__(self, "t1_covariates", tuple(self.t1_covariates))
        object.__setattr__(self, "t2_covariates", tuple(self.t2_covariates))


@dataclass(frozen=True)
class CoefficientReport:
    name: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    W: float
    p_value: float

    @classmethod
    def from_estimate(cls, name: str, est: float, var: float) -> "CoefficientReport":
        se = math.sqrt(var) if var > 0 else 0.0
        W = est * est / var if var > 0 else float("nan")
        p = chi2_survival(W, 1) if var > 0 else float("nan")
        return cls(name, float(est), se, est - Z_CRIT * se, est + Z_CRIT * se, W, p)


@dataclass
class MedicalReport:
    blip: list[CoefficientReport]
    point: list[CoefficientReport]
    design: np.ndarray
    cov_blip: np.ndarray
    cov_point: np.ndarray
    mean_models: list[dict]
    selection: dict | None
    B: int
    seed: int
    n_failed: int
    n: int
    clamped: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def rows(rs):
            return [r.__dict__ for r in rs]

        return {
            "n": self.n,
            "B": self.B,
            "seed": self.seed,
            "bootstrap_failed": self.n_failed,
            "bootstrap_clamped": self.clamped,
            "blip_effects": rows(self.blip),
            "point_effects": rows(self.point),
            "design_matrix": self.design,
            "cov_blip": self.cov_blip,
            "cov_point": self.cov_point,
            "mean_models": self.mean_models,
            "selection": self.selection,
            "warnings": self.warnings,
        }

    def format(self) -> str:
        lines = [f"n = {self.n}, bootstrap B = {self.B} (failed {self.n_failed}), seed = {self.seed}", ""]
        head = f"{'':<10}{'estimate':>10}{'SE':>9}{'95% CI':>22}{'p':>9}"
        for title, rs in (("Blip effects", self.blip), ("Point effects", self.point)):
            lines += [title, head]
            for r in rs:
                ci = f"({r.ci_low:.4f}, {r.ci_high:.4f})"
                lines.append(f"{r.name:<10}{r.estimate:10.4f}{r.se:9.4f}{ci:>22}{r.p_value:9.4f}")
            lines.append("")
        lines.append("Mean models (model-based SE)")
        for m in self.mean_models:
            lines.append(f"  {m['model']}: n = {m['n']}")
            for name, b, se, p in zip(m["names"], m["coefficients"], m["se"], m["p_values"]):
                lines.append(f"    {name:<12}{b:10.4f}{se:9.4f}   p = {p:.4f}")
        if self.selection:
            lines.append(f"Backward selection at {self.selection['level']}: dropped {self.selection['dropped'] or 'nothing'}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------


def _check(dataset: SequentialDataset, design: MedicalDesign) -> None:
    if dataset.T != 2:
        raise SchemaError(f"the two-period workflow needs 2 treatment times, got {dataset.T}")
    if dataset.family is not OutcomeFamily.BERNOULLI:
        raise SchemaError("the two-period workflow needs a bernoulli outcome")
    check_columns(dataset, [*design.t1_covariates, *design.t2_covariates, design.split_by, "z1", "z2"])
    for t in (1, 2):
        if set(dataset.treatment_levels(t)) != {0, 1}:
            raise SchemaError(f"z{t} must be binary 0/1 with both levels present")


def _snmm(levels) -> SnmmSpec:
    basis = [IndicatorBasis(1, frozenset([1]), None, "gamma1")]
    basis += [IndicatorBasis(2, frozenset([1]), frozenset([x]), f"gamma2{x}") for x in levels]
    return SnmmSpec(tuple(basis))


def _model_summary(fit: RegressionFit) -> list[dict]:
    out = []
    for m in fit.models:
        se = np.sqrt(np.diag(m.cov))
        p = [chi2_survival((b / s) ** 2, 1) if s > 0 else float("nan") for b, s in zip(m.coef, se)]
        label = f"t={fit.spec.t}" + (f", {fit.spec.split_by}={m.level}" if fit.spec.split_by else "")
        out.append(
            {"model": label, "n": m.n, "names": m.names, "coefficients": m.coef, "se": se, "p_values": p,
             "iterations": m.iterations, "clamped": m.clamped}
        )
    return out


def _backward_select(dataset, t, covariates, split_by, level):
    covs, dropped = list(covariates), []
    while covs:
        fit = regression_point_effects(dataset, MeanModelSpec(t, tuple(covs), split_by))
        worst, worst_p = None, -1.0
        for c in covs:
            # keep a covariate that matters in any split level
            p = min(m["p_values"][m["names"].index(c)] for m in _model_summary(fit))
            if p > worst_p:
                worst, worst_p = c, p
        if worst_p <= level:
            break
        covs.remove(worst)
        dropped.append(worst)
    return tuple(covs), dropped


class _FastFit:
    """Array form of the workflow for repeated weighted evaluation."""

    def __init__(self, dataset: SequentialDataset, design: MedicalDesign, levels):
        y = dataset.outcome
        z1, z2 = dataset.z(1), dataset.z(2)
        split = dataset.column(design.split_by)
        n = dataset.n
        self.y = y
        self.X1 = np.column_stack([np.ones(n)] + [dataset.column(c) for c in design.t1_covariates] + [z1])
        self.groups = []
        for lvl in levels:
            idx = np.flatnonzero(split == lvl)
            X = np.column_stack([np.ones(len(idx))] + [dataset.column(c)[idx] for c in design.t2_covariates] + [z2[idx]])
            self.groups.append((idx, X))
        self.treated = z1 == 1
        self.cell = [(split == lvl) & (z2 == 1) for lvl in levels]

    def run(self, w: np.ndarray):
        theta = [irls_identity_binomial(self.X1, self.y, weights=w, warn=False)]
        for idx, X in self.groups:
            theta.append(irls_identity_binomial(X, self.y[idx], weights=w[idx], warn=False))
        clamped = any(r[3] for r in theta)
        th = np.array([r[0][-1] for r in theta])
        n1, n0 = w[self.treated].sum(), w[~self.treated].sum()
        if n1 <= 0 or n0 <= 0:
            raise StatisticalError("a first-treatment arm is empty")
        c = np.array([w[self.treated & m].sum() / n1 - w[~self.treated & m].sum() / n0 for m in self.cell])
        gamma = th.copy()
        gamma[0] = th[0] - c @ th[1:]
        return gamma, th, clamped


def analyze_medical(
    dataset: SequentialDataset,
    *,
    B: int = 500,
    seed=0,
    design: MedicalDesign = MedicalDesign(),
    auto_select: bool = False,
    select_level: float = SELECT_LEVEL,
) -> MedicalReport:
    """Blip and point effects with bootstrap CIs and Wald p-values."""
    _check(dataset, design)
    if B < 2:
        raise ValueError("the bootstrap needs B >= 2")
    selection = None
    if auto_select:
        t1, d1 = _backward_select(dataset, 1, design.t1_covariates, None, select_level)
        t2, d2 = _backward_select(dataset, 2, design.t2_covariates, design.split_by, select_level)
        selection = {"level": select_level, "dropped": d1 + d2, "t1_covariates": t1, "t2_covariates": t2}
        design = MedicalDesign(t1, t2, design.split_by)

    caught: list[str] = []
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always", RuntimeWarning)
        fit1 = regression_point_effects(dataset, MeanModelSpec(1, design.t1_covariates))
        fit2 = regression_point_effects(dataset, MeanModelSpec(2, design.t2_covariates, design.split_by))
    caught += [str(w.message) for w in rec]
    pe = PointEffectEstimate.concat([fit1.point_effects, fit2.point_effects])
    levels = sorted({as_key(v) for v in dataset.column(design.split_by)})
    snmm = _snmm(levels)
    reduced = dataset.drop_covariates([1])
    C = build_design_matrix(snmm, empirical_transitions(reduced), pe.strata)
    gamma = np.linalg.solve(C.matrix, pe.theta)

    fast = _FastFit(dataset, design, levels)
    gs, ts, clamped, failed = [], [], 0, 0
    for b in range(B):
        w = resample_weights(dataset.n, seed, b)
        try:
            g, th, cl = fast.run(w)
        except (StatisticalError, np.linalg.LinAlgError):
            failed += 1
            continue
        clamped += cl
        gs.append(g)
        ts.append(th)
    if failed > MAX_FAIL_FRACTION * B or len(gs) < 2:
        raise BootstrapError(f"{failed} of {B} bootstrap replicates failed")
    cov_g = np.cov(np.array(gs), rowvar=False, ddof=1)
    cov_t = np.cov(np.array(ts), rowvar=False, ddof=1)
    if clamped:
        caught.append(f"fitted means were clamped into (0, 1) in {clamped} bootstrap replicates")

    labels = snmm.labels
    point_labels = ["theta1"] + [f"theta2{x}" for x in levels]
    return MedicalReport(
        blip=[CoefficientReport.from_estimate(n, g, v) for n, g, v in zip(labels, gamma, np.diag(cov_g))],
        point=[CoefficientReport.from_estimate(n, t, v) for n, t, v in zip(point_labels, pe.theta, np.diag(cov_t))],
        design=C.matrix,
        cov_blip=cov_g,
        cov_point=cov_t,
        mean_models=_model_summary(fit1) + _model_summary(fit2),
        selection=selection,
        B=B,
        seed=int(seed) if not isinstance(seed, np.random.SeedSequence) else int(seed.entropy),
        n_failed=failed,
        n=dataset.n,
        clamped=clamped,
        warnings=caught,
    )


# ---------------------------------------------------------------------------
# Synthetic data with planted blips
# ---------------------------------------------------------------------------


def generate_medical(
    n: int = 1070,
    seed=0,
    gamma=(-0.08, 0.02, -0.05),
    *,
    confounded: bool = True,
    base: float = 0.35,
    b_x11: float = 0.1,
    b_age: float = 0.04,
    delta: float = 0.1,
) -> SequentialDataset:
    """Two-period data whose blips are exactly ``gamma = (gamma1, gamma20, gamma21)``.

    ``x11``, ``x12`` are binary and ``x13`` a standardized age; ``z1``
    depends on ``x11`` and ``x12`` unless ``confounded`` is false; ``x2``
    depends on ``z1`` and ``z2`` on ``x2`` only.  The outcome mean is
    ``base + b_x11 x11 + b_age x13 + a z1 + delta x2 + gamma2[x2] z2`` with
    ``a`` chosen so the first blip equals ``gamma1``.
    """
    g1, g20, g21 = (float(v) for v in gamma)
    rng = philox(child_seed(seed, 0))
    u = rng.random((n, 7))
    x11 = (u[:, 0] < 0.5).astype(float)
    x12 = (u[:, 1] < 0.4).astype(float)
    x13 = np.clip(np.round(rng.standard_normal(n), 3), -3.0, 3.0)
    pz1 = 0.3 + 0.2 * x11 + 0.2 * x12 if confounded else np.full(n, 0.5)
    z1 = (u[:, 2] < pz1).astype(float)
    q = (0.4, 0.6)  # P(x2 = 1 | z1)
    x2 = (u[:, 3] < np.where(z1 == 1, q[1], q[0])).astype(float)
    z2 = (u[:, 4] < 0.35 + 0.3 * x2).astype(float)
    a = g1 - delta * (q[1] - q[0])
    mu = base + b_x11 * x11 + b_age * x13 + a * z1 + delta * x2 + np.where(x2 == 1, g21, g20) * z2
    if np.any((mu <= 0) | (mu >= 1)):
        raise ValueError("parameters give an outcome probability outside (0, 1)")
    y = (u[:, 5] < mu).astype(float)
    return SequentialDataset(
        ids=tuple(str(i + 1) for i in range(n)),
        covariate_names=(("x11", "x12", "x13"), ("x2",)),
        covariates=(np.column_stack([x11, x12, x13]), x2[:, None]),
        treatments=np.column_stack([z1, z2]),
        outcome=y,
        family=OutcomeFamily.BERNOULLI,
    )
