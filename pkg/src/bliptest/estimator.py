"""GLS estimation of blip parameters, bootstrap covariance and Wald tests."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.stats import chi2 as _chi2

from .blip_model import (
    CONTROL,
    CellGrid,
    DesignMatrix,
    SnmmSpec,
    TransitionTable,
    build_design_matrix,
    empirical_transitions,
)
from .errors import (
    BootstrapError,
    ConstraintError,
    DegenerateTestError,
    EstimabilityError,
    IdentifiabilityError,
    StatisticalError,
    WeightingError,
)
from .point_effects import PointEffectEstimate, VarianceMode, estimate_all_point_effects
from .seqdata import OutcomeFamily, SequentialDataset, Stratum
from ._seeding import child_seed, philox

__all__ = [
    "BlipEstimate",
    "BlipFit",
    "BootstrapResult",
    "Hypothesis",
    "ReplicatePipeline",
    "WaldResult",
    "bootstrap",
    "bootstrap_marginal_cov",
    "chi2_quantile",
    "chi2_survival",
    "fit_blip",
    "gls",
    "noncentral_chi2_survival",
    "noncentral_power",
    "restricted_gls",
    "wald",
]

PD_RTOL = 1e-12
COND_MAX = 1e12
MAX_FAIL_FRACTION = 0.10
BOOT_CHUNK = 50


# ---------------------------------------------------------------------------
# Chi-square distribution
# ---------------------------------------------------------------------------

_EPS = 1e-16
_TINY = 1e-300


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(100000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(a * math.log(x) - x - math.lgamma(a))


def _gamma_q_cf(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, 100000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(a * math.log(x) - x - math.lgamma(a)) * h


def chi2_survival(w: float, l: int) -> float:
    """``P(chi2_l > w)`` as the regularized upper incomplete gamma ``Q(l/2, w/2)``."""
    if l <= 0:
        raise ValueError("degrees of freedom must be positive")
    w = float(w)
    if w < 0 or math.isnan(w):
        raise ValueError("w must be non-negative")
    if w == 0:
        return 1.0
    if math.isinf(w):
        return 0.0
    a, x = 0.5 * l, 0.5 * w
    if w < l + 2:
        return max(0.0, 1.0 - _gamma_p_series(a, x))
    return min(1.0, _gamma_q_cf(a, x))


def chi2_quantile(alpha: float, l: int) -> float:
    """Upper ``alpha`` quantile of ``chi2_l``."""
    return float(_chi2.isf(alpha, l))


def noncentral_chi2_survival(w: float, l: int, lam: float, *, mass_tol: float = 1e-12) -> float:
    """Tail of the noncentral chi-square as a Poisson(lam/2) mixture of central tails."""
    if lam < 0:
        raise ValueError("noncentrality must be non-negative")
    if lam == 0:
        return chi2_survival(w, l)
    mu = 0.5 * lam
    # start at the Poisson mode and sweep outwards so large lam stays cheap
    mode = int(mu)
    logp_mode = mode * math.log(mu) - mu - math.lgamma(mode + 1)
    total = mass = 0.0
    j, logp = mode, logp_mode
    while j >= 0:
        p = math.exp(logp)
        total += p * chi2_survival(w, l + 2 * j)
        mass += p
        if p < mass_tol * 1e-3 and j < mode:
            break
        logp -= math.log(mu) - math.log(j) if j > 0 else 0.0
        j -= 1
    j, logp = mode + 1, logp_mode + math.log(mu) - math.log(mode + 1)
    while mass < 1.0 - mass_tol:
        p = math.exp(logp)
        total += p * chi2_survival(w, l + 2 * j)
        mass += p
        j += 1
        logp += math.log(mu) - math.log(j)
        if j > mode + 100 + 50 * math.sqrt(mu + 1):
            break
    return min(1.0, total)


# ---------------------------------------------------------------------------
# Result types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    """``H0: H gamma = rho`` with ``H`` of full row rank ``l <= k``."""

    H: np.ndarray
    rho: np.ndarray
    name: str = ""

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float)).reshape(-1)
        if rho.shape[0] != H.shape[0]:
            raise ValueError("rho must have one entry per row of H")
        if H.shape[0] > H.shape[1]:
            raise ValueError("H has more rows than parameters")
        if np.linalg.matrix_rank(H) < H.shape[0]:
            raise ValueError("H must have full row rank")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "rho", rho)

    @property
    def l(self) -> int:
        return self.H.shape[0]

    @property
    def k(self) -> int:
        return self.H.shape[1]

    @classmethod
    def coordinate(cls, k: int, j: int, value: float = 0.0, name: str = "") -> "Hypothesis":
        H = np.zeros((1, k))
        H[0, j] = 1.0
        return cls(H, [value], name)

    @classmethod
    def from_json(cls, obj) -> "Hypothesis":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(obj["H"], obj["rho"], obj.get("name", ""))

    def to_json(self) -> dict:
        return {"name": self.name, "H": self.H.tolist(), "rho": self.rho.tolist()}


@dataclass(frozen=True)
class BlipEstimate:
    gamma_hat: np.ndarray
    cov_conditional: np.ndarray
    cov_marginal: np.ndarray | None = None
    n: int = 0
    strata: tuple[Stratum, ...] = ()
    labels: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.gamma_hat.shape[0]

    def with_marginal(self, cov: np.ndarray) -> "BlipEstimate":
        return replace(self, cov_marginal=np.asarray(cov, dtype=float))


@dataclass(frozen=True)
class WaldResult:
    W: float
    df: int
    p_value: float
    alpha: float
    critical_value: float
    reject: bool
    name: str = ""
    noncentrality: float | None = None
    power_at_alpha: float | None = None


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------


def _check_pd(S: np.ndarray, what: str, exc=WeightingError) -> None:
    ev = np.linalg.eigvalsh(S)
    if not (ev[-1] > 0 and ev[0] > PD_RTOL * ev[-1]):
        raise exc(f"{what} is not positive definite (eigenvalues {ev[0]:.3g} .. {ev[-1]:.3g})")


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _whitened_qr(Sigma, C, theta):
    L = np.linalg.cholesky(Sigma)
    Cw = linalg.solve_triangular(L, C, lower=True)
    tw = linalg.solve_triangular(L, theta, lower=True)
    Q, R = np.linalg.qr(Cw)
    return Q, R, tw


def gls(theta: PointEffectEstimate, C: DesignMatrix | np.ndarray) -> BlipEstimate:
    """``gamma = (C' S^-1 C)^-1 C' S^-1 theta`` with ``S`` the point-effect covariance.

    Solved by Cholesky whitening and a QR factorization; ``S`` is never inverted.
    """
    if isinstance(C, DesignMatrix):
        if tuple(C.strata) != tuple(theta.strata):
            raise ValueError("design matrix rows and point effects use different strata orderings")
        labels, Cm = C.labels, C.matrix
    else:
        Cm = np.asarray(C, dtype=float)
        labels = tuple(f"gamma{j + 1}" for j in range(Cm.shape[1]))
    Sigma = theta.sigma
    m, k = Cm.shape
    if m < k:
        raise IdentifiabilityError(f"{m} point effects cannot identify {k} parameters")
    _check_pd(Sigma, "point-effect covariance (try variance_mode='pooled_normal')")
    Q, R, tw = _whitened_qr(Sigma, Cm, theta.theta)
    d = np.abs(np.diag(R))
    cond = np.linalg.cond(R) if d.min() > 0 else np.inf
    if not cond < COND_MAX:
        raise IdentifiabilityError(f"weighted design is ill-conditioned (condition number {cond:.3g})")
    gamma = linalg.solve_triangular(R, Q.T @ tw)
    Rinv = linalg.solve_triangular(R, np.eye(k))
    cov = _sym(Rinv @ Rinv.T)
    n = 0
    return BlipEstimate(gamma, cov, None, n, tuple(theta.strata), tuple(labels))


def restricted_gls(est: BlipEstimate, hyp: Hypothesis) -> BlipEstimate:
    """Project ``gamma_hat`` onto ``{gamma : H gamma = rho}`` in the ``cov_conditional`` metric."""
    V = est.cov_conditional
    H, rho = hyp.H, hyp.rho
    if H.shape[1] != est.k:
        raise ValueError("hypothesis dimension does not match the estimate")
    VH = V @ H.T
    M = _sym(H @ VH)
    _check_pd(M, "H V H'", ConstraintError)
    cf = linalg.cho_factor(M)
    resid = H @ est.gamma_hat - rho
    gamma_r = est.gamma_hat - VH @ linalg.cho_solve(cf, resid)
    # one refinement step tightens H gamma_r = rho to rounding level
    gamma_r = gamma_r - VH @ linalg.cho_solve(cf, H @ gamma_r - rho)
    cov_r = _sym(V - VH @ linalg.cho_solve(cf, VH.T))
    return replace(est, gamma_hat=gamma_r, cov_conditional=cov_r, cov_marginal=None)


def _quadratic_form(d: np.ndarray, M: np.ndarray) -> float:
    cf = linalg.cho_factor(M)
    return max(0.0, float(d @ linalg.cho_solve(cf, d)))


def wald(est: BlipEstimate, hyp: Hypothesis, alpha: float = 0.05, *, cov: np.ndarray | None = None) -> WaldResult:
    """Wald statistic ``(H g - rho)' (H V H')^-1 (H g - rho)`` against ``chi2_l``.

    ``V`` is the marginal (bootstrap) covariance unless ``cov`` overrides it.
    """
    V = est.cov_marginal if cov is None else np.asarray(cov, dtype=float)
    if V is None:
        raise ValueError("the estimate carries no marginal covariance; run the bootstrap first")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    H, rho = hyp.H, hyp.rho
    d = H @ est.gamma_hat - rho
    M = _sym(H @ V @ H.T)
    _check_pd(M, "H cov H'", DegenerateTestError)
    W = _quadratic_form(d, M) if np.any(d) else 0.0
    crit = chi2_quantile(alpha, hyp.l)
    return WaldResult(W, hyp.l, chi2_survival(W, hyp.l), alpha, crit, W > crit, hyp.name)


def noncentral_power(hyp: Hypothesis, gamma_true, cov, alpha: float = 0.05) -> tuple[float, float]:
    """Noncentrality ``lambda`` and asymptotic power of the level-``alpha`` Wald test."""
    d = hyp.H @ np.asarray(gamma_true, dtype=float) - hyp.rho
    M = _sym(hyp.H @ np.asarray(cov, dtype=float) @ hyp.H.T)
    _check_pd(M, "H cov H'", DegenerateTestError)
    lam = _quadratic_form(d, M) if np.any(d) else 0.0
    crit = chi2_quantile(alpha, hyp.l)
    return lam, noncentral_chi2_survival(crit, hyp.l, lam)


# ---------------------------------------------------------------------------
# Full pipeline on one dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlipFit:
    point_effects: PointEffectEstimate
    transitions: TransitionTable
    design: DesignMatrix
    estimate: BlipEstimate


def fit_blip(
    dataset: SequentialDataset,
    snmm: SnmmSpec,
    variance_mode: VarianceMode | str = VarianceMode.SAMPLE,
    *,
    drop_inestimable: bool = False,
) -> BlipFit:
    """Stratum means, transition proportions, design matrix and GLS in one call."""
    pe = estimate_all_point_effects(dataset, variance_mode, drop_inestimable=drop_inestimable)
    tr = empirical_transitions(dataset)
    C = build_design_matrix(snmm, tr, pe.strata)
    est = replace(gls(pe, C), n=dataset.n)
    return BlipFit(pe, tr, C, est)


# ---------------------------------------------------------------------------
# Weighted replicates (bootstrap engine)
# ---------------------------------------------------------------------------


class ReplicatePipeline:
    """The full estimation pipeline evaluated for many subject-weight vectors at once.

    A weight vector of resampling counts reproduces the estimate on the
    corresponding bootstrap resample exactly; unit weights reproduce
    :func:`fit_blip`.  Strata and cell grids are fixed from ``dataset``.
    """

    def __init__(
        self,
        dataset: SequentialDataset,
        snmm: SnmmSpec,
        variance_mode: VarianceMode | str = VarianceMode.SAMPLE,
        strata: Sequence[Stratum] | None = None,
    ):
        self.dataset = dataset
        self.snmm = snmm
        self.mode = VarianceMode(variance_mode)
        self.family = dataset.family
        T = self.T = dataset.T
        if strata is None:
            strata = estimate_all_point_effects(dataset, self.mode).strata
        self.strata = tuple(strata)
        self.grids = [CellGrid.of(dataset, t) for t in range(1, T + 1)]
        self.sizes = [g.size for g in self.grids]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.codes = []
        for t in range(1, T + 1):
            _, xc = dataset.x_codes(t)
            _, zc = dataset.z_codes(t)
            self.codes.append(xc * len(self.grids[t - 1].z_levels) + zc)
        self.F = [snmm.matrix(g, t) for t, g in enumerate(self.grids, 1)]
        m, total = len(self.strata), int(self.offsets[-1])
        self.treated = np.empty(m, dtype=np.intp)
        self.control = np.empty(m, dtype=np.intp)
        self.time = np.empty(m, dtype=np.intp)
        D = np.zeros((m, total))
        for i, s in enumerate(self.strata):
            a = self.grids[s.t - 1].index(s.x, s.z)
            b = self.grids[s.t - 1].index(s.x, CONTROL)
            if a is None or b is None:
                raise EstimabilityError(f"stratum {s} has no cells in the data", [s])
            self.treated[i], self.control[i], self.time[i] = a, b, s.t
            D[i, self.offsets[s.t - 1] + a] = 1.0
            D[i, self.offsets[s.t - 1] + b] = -1.0
        self.D = D
        self.referenced = np.flatnonzero(np.any(D != 0, axis=0))
        # centre outcomes on the observed cell means for accurate variances
        y = dataset.outcome
        self.centre = np.zeros(total)
        self.yc = []
        for t in range(T):
            cnt = np.bincount(self.codes[t], minlength=self.sizes[t])
            sm = np.bincount(self.codes[t], weights=y, minlength=self.sizes[t])
            c = np.divide(sm, cnt, out=np.zeros(self.sizes[t]), where=cnt > 0)
            self.centre[self.offsets[t] : self.offsets[t + 1]] = c
            self.yc.append(y - c[self.codes[t]])

    @property
    def k(self) -> int:
        return self.snmm.k

    def _binned(self, R, codes, size, values):
        idx = (np.arange(R)[:, None] * size + codes[None, :]).ravel()
        return np.bincount(idx, weights=values.ravel(), minlength=R * size).reshape(R, size)

    def run(self, weights: np.ndarray):
        """Estimates for each row of ``weights`` (shape ``(R, n)``).

        Returns ``(gamma, cov, ok)`` with ``gamma`` ``(R, k)``, ``cov``
        ``(R, k, k)`` and ``ok`` flagging replicates where every step was
        estimable; failed rows are NaN.
        """
        W = np.atleast_2d(np.asarray(weights, dtype=float))
        R = W.shape[0]
        N, S, Q = [], [], []
        for t in range(self.T):
            size, codes, yc = self.sizes[t], self.codes[t], self.yc[t]
            N.append(self._binned(R, codes, size, W))
            Wy = W * yc
            S.append(self._binned(R, codes, size, Wy))
            Q.append(self._binned(R, codes, size, Wy * yc))
        N, S, Q = (np.concatenate(a, axis=1) for a in (N, S, Q))
        ok = np.all(N[:, self.referenced] > 0, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = self.centre + S / N
            ss = np.maximum(Q - S * S / N, 0.0)
            svar = np.where(N > 1, ss / (N - 1), 0.0)
            if self.mode is VarianceMode.POOLED_NORMAL:
                occupied = N > 0
                pooled = np.where(occupied, ss, 0.0).sum(axis=1) / np.where(occupied, N - 1, 0.0).sum(axis=1)
                vm = pooled[:, None] / N
            elif self.mode is VarianceMode.PLUGIN_FAMILY and self.family is OutcomeFamily.BERNOULLI:
                vm = mean * (1.0 - mean) / N
            elif self.mode is VarianceMode.PLUGIN_FAMILY and self.family is OutcomeFamily.POISSON:
                vm = mean / N
            else:
                vm = svar / N
        ref = self.referenced
        D = self.D[:, ref]
        mean_r = np.where(ok[:, None], mean[:, ref], 0.0)
        vm_r = np.where(ok[:, None], vm[:, ref], 1.0)
        theta = mean_r @ D.T
        Sigma = np.einsum("ic,rc,jc->rij", D, vm_r, D)

        m, k = len(self.strata), self.k
        C = np.empty((R, m, k))
        for i in range(m):
            t = self.time[i] - 1
            C[:, i, :] = self.F[t][self.treated[i]]
        for t in range(self.T):
            rows = np.flatnonzero(self.time == t + 1)
            if rows.size == 0:
                continue
            Nt = N[:, self.offsets[t] : self.offsets[t + 1]]
            for s in range(t + 1, self.T):
                size_s = self.sizes[s]
                joint = self._binned(R, self.codes[t] * size_s + self.codes[s], self.sizes[t] * size_s, W)
                joint = joint.reshape(R, self.sizes[t], size_s)
                with np.errstate(invalid="ignore", divide="ignore"):
                    P = joint / Nt[:, :, None]
                G = P @ self.F[s]
                C[:, rows, :] += G[:, self.treated[rows], :] - G[:, self.control[rows], :]

        gamma = np.full((R, k), np.nan)
        cov = np.full((R, k, k), np.nan)
        idx = np.flatnonzero(ok)
        if idx.size:
            ev = np.linalg.eigvalsh(Sigma[idx])
            good = (ev[:, -1] > 0) & (ev[:, 0] > PD_RTOL * ev[:, -1])
            idx = idx[good]
        if idx.size:
            L = np.linalg.cholesky(Sigma[idx])
            Cw = np.linalg.solve(L, C[idx])
            tw = np.linalg.solve(L, theta[idx][:, :, None])
            Qm, Rm = np.linalg.qr(Cw)
            cond = np.linalg.cond(Rm)
            good = np.isfinite(cond) & (cond < COND_MAX)
            idx, Qm, Rm, tw = idx[good], Qm[good], Rm[good], tw[good]
        if idx.size:
            g = np.linalg.solve(Rm, np.swapaxes(Qm, 1, 2) @ tw)[:, :, 0]
            Rinv = np.linalg.inv(Rm)
            gamma[idx] = g
            cov[idx] = _sym(Rinv @ np.swapaxes(Rinv, 1, 2))
        okf = np.zeros(R, dtype=bool)
        okf[idx] = True
        return gamma, cov, okf


@dataclass(frozen=True)
class BootstrapResult:
    replicates: np.ndarray  # (B_ok, k) in replicate order
    n_failed: int
    B: int
    cov: np.ndarray = field(repr=False)


def resample_weights(n: int, seed, b: int) -> np.ndarray:
    """Resampling counts of replicate ``b``; depends only on ``(seed, b)``."""
    rng = philox(child_seed(seed, b))
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)


def bootstrap(
    dataset: SequentialDataset,
    snmm: SnmmSpec,
    B: int = 500,
    seed=0,
    variance_mode: VarianceMode | str = VarianceMode.SAMPLE,
    *,
    strata: Sequence[Stratum] | None = None,
    threads: int = 1,
    max_fail_fraction: float = MAX_FAIL_FRACTION,
    pipeline: ReplicatePipeline | None = None,
) -> BootstrapResult:
    """Nonparametric subject bootstrap of the whole pipeline.

    Replicates run in fixed chunks of ``BOOT_CHUNK``, each seeded by its
    index, so output is bitwise identical for any ``threads``.
    """
    if B < 2:
        raise ValueError("the bootstrap needs B >= 2")
    pipe = pipeline or ReplicatePipeline(dataset, snmm, variance_mode, strata)
    n = dataset.n
    chunks = [range(lo, min(lo + BOOT_CHUNK, B)) for lo in range(0, B, BOOT_CHUNK)]

    def work(chunk):
        W = np.stack([resample_weights(n, seed, b) for b in chunk])
        gamma, _, ok = pipe.run(W)
        return gamma, ok

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    gamma = np.concatenate([p[0] for p in parts])
    ok = np.concatenate([p[1] for p in parts])
    n_failed = int(B - ok.sum())
    if n_failed > max_fail_fraction * B:
        raise BootstrapError(f"{n_failed} of {B} bootstrap replicates were not estimable")
    reps = gamma[ok]
    if reps.shape[0] < 2:
        raise BootstrapError("fewer than two usable bootstrap replicates")
    cov = np.atleast_2d(np.cov(reps, rowvar=False, ddof=1))
    return BootstrapResult(reps, n_failed, B, _sym(cov))


def bootstrap_marginal_cov(
    dataset: SequentialDataset,
    snmm: SnmmSpec,
    B: int = 500,
    seed=0,
    variance_mode: VarianceMode | str = VarianceMode.SAMPLE,
    **kwargs,
) -> np.ndarray:
    """Bootstrap estimate of the marginal covariance of ``gamma_hat``."""
    return bootstrap(dataset, snmm, B, seed, variance_mode, **kwargs).cov


def is_statistical_failure(exc: BaseException) -> bool:
    return isinstance(exc, (StatisticalError, np.linalg.LinAlgError))
