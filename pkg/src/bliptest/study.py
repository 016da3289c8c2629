"""Monte Carlo study of the Wald tests: error rates and estimator moments."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ._seeding import child_seed
from .errors import BootstrapError, StatisticalError
from .estimator import Hypothesis, ReplicatePipeline, bootstrap, fit_blip, restricted_gls, wald
from .oracle_dgp import SHIPPED, DgpSpec, generate_dataset, load_spec
from .point_effects import VarianceMode
from .seqdata import OutcomeFamily

__all__ = [
    "ErrorRateTable",
    "StudyConfig",
    "StudyResult",
    "battery",
    "canonical_json",
    "run_study",
]

DEFAULT_SHIFT = {
    OutcomeFamily.NORMAL: 1.0,
    OutcomeFamily.BERNOULLI: 0.1,
    OutcomeFamily.POISSON: 1.0,
}
MAX_FAIL_FRACTION = 0.10
SHIFT_STEPS = (0, 1, 2)


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------


def _canon(obj):
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return None
        x = float(f"{x:.12g}")
        return 0.0 if x == 0 else x
    return obj


def canonical_json(obj, indent: int | None = 1) -> str:
    """Sorted keys, floats rounded to 12 significant digits, NaN as null."""
    return json.dumps(_canon(obj), sort_keys=True, indent=indent, allow_nan=False)


# ---------------------------------------------------------------------------
# Hypothesis battery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatteryEntry:
    """A hypothesis family ``H gamma = base + step * shift`` for ``step = 0, 1, 2``."""

    name: str
    H: np.ndarray
    base: np.ndarray
    shift: float

    def variant(self, step: int) -> Hypothesis:
        return Hypothesis(self.H, self.base + step * self.shift, f"{self.name}{step}")


def battery(gamma_true, shift: float) -> list[BatteryEntry]:
    """Hypotheses A through J on ``(g1, g20..g23, g30..g33)``.

    A-I test one component each at its true value; J tests ``g2j = g3j``
    jointly (true when the two blip vectors coincide).
    """
    gamma_true = np.asarray(gamma_true, dtype=float)
    if gamma_true.shape != (9,):
        raise ValueError("the A-J battery needs the 9-parameter stratified SNMM")
    entries = []
    for j, name in enumerate("ABCDEFGHI"):
        H = np.zeros((1, 9))
        H[0, j] = 1.0
        entries.append(BatteryEntry(name, H, H @ gamma_true, shift))
    HJ = np.zeros((4, 9))
    for j in range(4):
        HJ[j, 1 + j] = 1.0
        HJ[j, 5 + j] = -1.0
    entries.append(BatteryEntry("J", HJ, np.zeros(4), shift))
    return entries


def _restriction(entries: Sequence[BatteryEntry]) -> Hypothesis | None:
    for e in entries:
        if e.name == "J":
            return e.variant(0)
    return None


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    """Monte Carlo design.

    ``dgp`` lists shipped family names, JSON spec paths or inline spec
    dictionaries.  ``hypotheses`` is ``"battery"`` for A-J or a list of
    ``{"name", "H", "rho", "shift"}`` entries (``shift`` optional).
    ``bootstrap_B = 0`` skips the bootstrap and all tests, leaving only the
    estimator moments.
    """

    dgp: tuple = ("normal",)
    n_list: tuple[int, ...] = (1000,)
    mc_reps: int = 1000
    bootstrap_B: int = 500
    alpha: float = 0.05
    seed: int = 0
    hypotheses: Any = "battery"
    shift: dict = field(default_factory=dict)
    variance_mode: str = VarianceMode.SAMPLE.value

    def __post_init__(self):
        dgp = self.dgp
        if isinstance(dgp, (str, dict)):
            dgp = (dgp,)
        object.__setattr__(self, "dgp", tuple(dgp))
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mc_reps < 1:
            raise ValueError("mc_reps must be at least 1")
        if self.bootstrap_B == 1 or self.bootstrap_B < 0:
            raise ValueError("bootstrap_B must be 0 (no tests) or at least 2")
        if not self.n_list or min(self.n_list) < 1:
            raise ValueError("n_list needs positive sample sizes")
        VarianceMode(self.variance_mode)

    @classmethod
    def from_json(cls, obj) -> "StudyConfig":
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown study config keys {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        return {
            "dgp": list(self.dgp),
            "n_list": list(self.n_list),
            "mc_reps": self.mc_reps,
            "bootstrap_B": self.bootstrap_B,
            "alpha": self.alpha,
            "seed": self.seed,
            "hypotheses": self.hypotheses,
            "shift": dict(self.shift),
            "variance_mode": self.variance_mode,
        }

    def specs(self, base_dir: Path | None = None) -> list[DgpSpec]:
        out = []
        for d in self.dgp:
            if isinstance(d, dict):
                out.append(DgpSpec.from_json(d))
            elif d in SHIPPED:
                out.append(load_spec(d))
            else:
                p = Path(d)
                if base_dir is not None and not p.is_absolute():
                    p = base_dir / p
                out.append(load_spec(str(p)))
        return out

    def entries(self, spec: DgpSpec) -> list[BatteryEntry]:
        shift = self.shift.get(spec.family.value, self.shift.get(spec.name, DEFAULT_SHIFT[spec.family]))
        if self.hypotheses == "battery":
            return battery(spec.gamma, float(shift))
        entries = []
        for h in self.hypotheses:
            hyp = Hypothesis.from_json(h)
            entries.append(BatteryEntry(hyp.name or f"H{len(entries) + 1}", hyp.H, hyp.rho, float(h.get("shift", 0.0))))
        return entries

    def digest(self, specs: Sequence[DgpSpec]) -> str:
        payload = canonical_json({"config": self.to_json(), "specs": [s.to_json() for s in specs]}, indent=None)
        return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Task:
    spec: DgpSpec
    n: int
    seed: int
    key: tuple[int, int]
    entries: tuple[BatteryEntry, ...]
    B: int
    alpha: float
    variance_mode: str


def _one(task: _Task, rep: int) -> dict:
    root = child_seed(task.seed, *task.key, rep)
    out: dict = {"rep": rep, "ok": False}
    try:
        data = generate_dataset(task.spec, task.n, child_seed(root, 0))
        fit = fit_blip(data, task.spec.snmm, task.variance_mode)
        est = fit.estimate
        out["gamma"] = est.gamma_hat
        restriction = _restriction(task.entries)
        if restriction is not None:
            out["gamma_restricted"] = restricted_gls(est, restriction).gamma_hat
        if task.B:
            pipe = ReplicatePipeline(data, task.spec.snmm, task.variance_mode, fit.point_effects.strata)
            boot = bootstrap(data, task.spec.snmm, task.B, child_seed(root, 1), pipeline=pipe)
            est = est.with_marginal(boot.cov)
            out["boot_failed"] = boot.n_failed
            W, rej = {}, {}
            for e in task.entries:
                for step in SHIFT_STEPS:
                    r = wald(est, e.variant(step), task.alpha)
                    W[r.name], rej[r.name] = r.W, r.reject
            out["W"], out["reject"] = W, rej
        out["ok"] = True
    except (StatisticalError, np.linalg.LinAlgError) as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def _run_chunk(args) -> list[dict]:
    task, reps = args
    return [_one(task, r) for r in reps]


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class ErrorRateTable:
    """Error and rejection rates by family, sample size, hypothesis and shift step.

    ``rate0`` is the type I error (rejecting the true null); ``rate1`` and
    ``rate2`` are type II errors (accepting the false null) at shifts ``c``
    and ``2c``.  When a step-0 hypothesis is false the error there is a type
    II error as well.
    """

    rows: list[dict]

    def find(self, family: str, n: int, hypothesis: str) -> dict:
        for r in self.rows:
            if r["family"] == family and r["n"] == n and r["hypothesis"] == hypothesis:
                return r
        raise KeyError((family, n, hypothesis))

    def to_csv(self) -> str:
        cols = [
            "family", "n", "hypothesis", "reps",
            "rate0", "rate1", "rate2", "se0", "se1", "se2",
            "reject0", "reject1", "reject2",
        ]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _canon(v) for k, v in r.items()})
        return buf.getvalue()

    def format(self) -> str:
        lines = [f"{'family':<10}{'n':>6}  hyp  {'rate0':>7}{'rate1':>7}{'rate2':>7}  (reject rates)"]
        for r in self.rows:
            lines.append(
                f"{r['family']:<10}{r['n']:>6}  {r['hypothesis']:<3}  "
                f"{r['rate0']:7.3f}{r['rate1']:7.3f}{r['rate2']:7.3f}  "
                f"({r['reject0']:.3f} {r['reject1']:.3f} {r['reject2']:.3f})"
            )
        return "\n".join(lines)


@dataclass
class StudyResult:
    config: StudyConfig
    config_hash: str
    error_rates: ErrorRateTable
    moments: list[dict]
    replicates: dict

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "config_hash": self.config_hash,
            "error_rates": self.error_rates.rows,
            "moments": self.moments,
            "replicates": self.replicates,
        }

    def moments_csv(self) -> str:
        cols = ["family", "n", "parameter", "true", "mean", "variance", "mean_restricted", "variance_restricted"]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.moments:
            w.writerow({k: _canon(v) for k, v in r.items()})
        return buf.getvalue()

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "study.json": canonical_json(self.to_json()) + "\n",
            "error_rates.csv": self.error_rates.to_csv(),
            "estimates.csv": self.moments_csv(),
        }
        paths = []
        for name, text in files.items():
            p = out / name
            p.write_text(text)
            paths.append(p)
        return paths


def _summarise(spec: DgpSpec, n: int, entries, reps: list[dict], B: int):
    ok = [r for r in reps if r["ok"]]
    rows = []
    if B and ok:
        m = len(ok)
        for e in entries:
            row = {"family": spec.family.value, "spec": spec.name, "n": n, "hypothesis": e.name, "reps": m}
            for step in SHIFT_STEPS:
                hyp = e.variant(step)
                rej = float(np.mean([r["reject"][hyp.name] for r in ok]))
                true_null = bool(np.allclose(hyp.H @ spec.gamma, hyp.rho, rtol=0, atol=1e-12))
                err = rej if true_null else 1.0 - rej
                row[f"reject{step}"] = rej
                row[f"rate{step}"] = err
                row[f"se{step}"] = math.sqrt(err * (1 - err) / m)
                row[f"null_true{step}"] = true_null
            rows.append(row)
    moments = []
    if ok:
        G = np.array([r["gamma"] for r in ok])
        Gr = np.array([r["gamma_restricted"] for r in ok]) if "gamma_restricted" in ok[0] else None
        for j, label in enumerate(spec.snmm.labels):
            row = {
                "family": spec.family.value,
                "spec": spec.name,
                "n": n,
                "parameter": label,
                "true": spec.gamma[j],
                "mean": G[:, j].mean(),
                "variance": G[:, j].var(ddof=1) if len(ok) > 1 else float("nan"),
                "mc_se": G[:, j].std(ddof=1) / math.sqrt(len(ok)) if len(ok) > 1 else float("nan"),
            }
            if Gr is not None:
                row["mean_restricted"] = Gr[:, j].mean()
                row["variance_restricted"] = Gr[:, j].var(ddof=1) if len(ok) > 1 else float("nan")
            moments.append(row)
    return rows, moments


def run_study(config: StudyConfig, *, threads: int = 1, base_dir: Path | None = None, chunk: int = 10) -> StudyResult:
    """Generate, estimate, bootstrap and test ``mc_reps`` datasets per family and size.

    Replicate ``r`` of family ``f`` at size index ``i`` draws everything from
    the seed path ``(seed, f, i, r)``, so results do not depend on
    ``threads``.  Aborts with :class:`BootstrapError` when more than 10% of
    the replicates of any cell fail.
    """
    specs = config.specs(base_dir)
    tasks = []
    for fi, spec in enumerate(specs):
        entries = tuple(config.entries(spec))
        for ni, n in enumerate(config.n_list):
            tasks.append(
                _Task(spec, n, config.seed, (fi, ni), entries, config.bootstrap_B, config.alpha, config.variance_mode)
            )
    jobs = [
        (ti, (task, range(lo, min(lo + chunk, config.mc_reps))))
        for ti, task in enumerate(tasks)
        for lo in range(0, config.mc_reps, chunk)
    ]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            outs = list(ex.map(_run_chunk, [j[1] for j in jobs]))
    else:
        outs = [_run_chunk(j[1]) for j in jobs]
    per_task: list[list[dict]] = [[] for _ in tasks]
    for (ti, _), out in zip(jobs, outs):
        per_task[ti].extend(out)

    rows, moments, replicates = [], [], {}
    for task, reps in zip(tasks, per_task):
        failed = sum(not r["ok"] for r in reps)
        tag = f"{task.spec.name or task.spec.family.value}/n={task.n}"
        if failed > MAX_FAIL_FRACTION * len(reps):
            first = next(r["error"] for r in reps if not r["ok"])
            raise BootstrapError(f"{tag}: {failed} of {len(reps)} replicates failed (first: {first})")
        r, m = _summarise(task.spec, task.n, task.entries, reps, config.bootstrap_B)
        rows.extend(r)
        moments.extend(m)
        replicates[tag] = reps
    return StudyResult(config, config.digest(specs), ErrorRateTable(rows), moments, replicates)
