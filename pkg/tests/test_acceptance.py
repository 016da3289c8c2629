"""Acceptance criteria 1-12, one test each.

Every test logs a one-line PASS/FAIL summary through ``acceptance_log``; the
lines are repeated at the end of the pytest run.  The Monte Carlo studies are
session fixtures in ``conftest.py`` shared between criteria.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from bliptest._seeding import child_seed, philox
from bliptest.blip_model import build_design_matrix
from bliptest.cli import main
from bliptest.errors import BootstrapError
from bliptest.estimator import Hypothesis, chi2_survival, noncentral_power
from bliptest.medical import analyze_medical, generate_medical
from bliptest.oracle_dgp import (
    SHIPPED,
    default_spec,
    exact_blip_decomposition_check,
    exact_point_effects,
    exact_transitions,
    generate_dataset,
    random_spec,
)
from bliptest.point_effects import estimate_all_point_effects
from bliptest.study import StudyConfig, run_study

from conftest import SMOKE

pytestmark = pytest.mark.slow

FAMILIES = ("normal", "bernoulli", "poisson")

# P(chi2_l > w) by adaptive quadrature of the chi-square density in mpmath at 30 digits
CHI2_GRID = {
    (0, 1): 1.0,
    (0.5, 1): 0.47950012218695346232,
    (1, 1): 0.31731050786291410283,
    (2, 1): 0.15729920705028513066,
    (3.841, 1): 0.050013683763956704798,
    (5, 1): 0.025347318677468263932,
    (8, 1): 0.0046777349810472658379,
    (12, 1): 0.00053200550513924969929,
    (17, 1): 0.000037379818401701534183,
    (25, 1): 5.7330314375838782335e-7,
    (35, 1): 3.2970532689972866032e-9,
    (50, 1): 1.5374597944280348502e-12,
    (0, 2): 1.0,
    (0.5, 2): 0.77880078307140486825,
    (1, 2): 0.6065306597126334236,
    (2, 2): 0.3678794411714423216,
    (3.841, 2): 0.14653367697210129842,
    (5, 2): 0.08208499862389879517,
    (8, 2): 0.018315638888734180294,
    (12, 2): 0.002478752176666358423,
    (17, 2): 0.00020346836901064417437,
    (25, 2): 3.7266531720786709929e-6,
    (35, 2): 2.5109991557439818035e-8,
    (50, 2): 1.3887943864964020595e-11,
    (0, 5): 1.0,
    (0.5, 5): 0.99212329323262959221,
    (1, 5): 0.96256577324729636896,
    (2, 5): 0.84914503608460963623,
    (3.841, 5): 0.57252776443576948654,
    (5, 5): 0.41588018699550792028,
    (8, 5): 0.15623562757772232746,
    (12, 5): 0.034787780506241849918,
    (17, 5): 0.0044997969779705479447,
    (25, 5): 0.00013933379118562617389,
    (35, 5): 1.5046506621757200147e-6,
    (50, 5): 1.3857973367009593204e-9,
    (0, 10): 1.0,
    (0.5, 10): 0.99999338828943896575,
    (1, 10): 0.99982788437004415922,
    (2, 10): 0.99634015317265628765,
    (3.841, 10): 0.95423478637286415823,
    (5, 10): 0.89117801891415124235,
    (8, 10): 0.62883693517987352342,
    (12, 10): 0.28505650031663121865,
    (17, 10): 0.074363979814580355864,
    (25, 10): 0.0053455054871340642993,
    (35, 10): 0.00012486525278303775597,
    (50, 10): 2.6690834249044956397e-7,
    (0.01, 1): 0.92034432544594203707,
    (0.05, 10): 0.99999999992029717917,
}


def _hyp_json(name, H, rho):
    return {"name": name, "H": np.asarray(H, float).tolist(), "rho": list(map(float, rho))}


def _j_rows():
    H = np.zeros((4, 9))
    for j in range(4):
        H[j, 1 + j], H[j, 5 + j] = 1.0, -1.0
    return H


# ---------------------------------------------------------------------------
# 1-3: exact oracle
# ---------------------------------------------------------------------------


def test_criterion_01_decomposition_identity(acceptance_log):
    start = time.perf_counter()
    worst, count = 0.0, 0
    for seed in range(60):
        family = FAMILIES[seed % 3]
        spec = random_spec(np.random.default_rng(seed), family=family)
        worst = max(worst, exact_blip_decomposition_check(spec).residual)
        count += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 10
    acceptance_log(1, "C_exact gamma = theta_exact on random specs", ok,
                   f"{count} specs, max residual {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_dual_route_point_effects(acceptance_log):
    specs = [default_spec(f) for f in SHIPPED]
    specs += [random_spec(np.random.default_rng(1000 + i), family=FAMILIES[i % 3]) for i in range(20)]
    worst = 0.0
    for spec in specs:
        a = exact_point_effects(spec, "enumeration")
        b = exact_point_effects(spec, "history")
        worst = max(worst, max(abs(a[s] - b[s]) for s in a))
    ok = worst < 1e-10
    acceptance_log(2, "closed-form vs enumerated point effects", ok, f"{len(specs)} specs, max gap {worst:.2e}")
    assert ok


def test_criterion_03_grand_mean_recovery(acceptance_log):
    targets = {"normal": -5.0, "bernoulli": 0.55, "poisson": 20.0}
    gaps = {f: abs(default_spec(f).standard.mean - m) for f, m in targets.items()}
    ok = max(gaps.values()) < 1e-10
    acceptance_log(3, "sum mu(path) P(path) = grand mean", ok, ", ".join(f"{f} {g:.1e}" for f, g in gaps.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4-7: Monte Carlo study
# ---------------------------------------------------------------------------


def test_criterion_04_type_one_error(acceptance_log, normal_battery):
    lo, hi = (0.02, 0.09) if SMOKE else (0.035, 0.065)
    rates = {h: normal_battery.error_rates.find("normal", 1000, h)["rate0"] for h in ("A", "J")}
    ok = all(lo <= r <= hi for r in rates.values())
    mode = "smoke" if SMOKE else "full"
    acceptance_log(4, f"type I error of A0 and J0 ({mode})", ok,
                   f"A0 {rates['A']:.3f}, J0 {rates['J']:.3f}, band [{lo}, {hi}]")
    assert ok


def _ordered(a, b, se_a, se_b):
    """``b >= a`` up to two Monte Carlo standard errors of the difference (ties at 1 pass)."""
    return b - a >= -2 * np.hypot(se_a, se_b)


def test_criterion_05_power_monotone(acceptance_log, normal_battery, discrete_battery):
    failures, checks = [], 0
    for table in (normal_battery.error_rates, discrete_battery.error_rates):
        for row in table.rows:
            if row["hypothesis"] not in ("A", "J"):
                continue
            m = row["reps"]
            rej = [row[f"reject{s}"] for s in range(3)]
            se = [np.sqrt(r * (1 - r) / m) for r in rej]
            for s in (0, 1):
                checks += 1
                if not _ordered(rej[s], rej[s + 1], se[s], se[s + 1]):
                    failures.append(f"{row['family']} n={row['n']} {row['hypothesis']}{s}->{s + 1} {rej[s]:.3f}->{rej[s + 1]:.3f}")
        for fam in {r["family"] for r in table.rows}:
            for h in ("A", "J"):
                small, large = table.find(fam, 1000, h), table.find(fam, 3000, h)
                for s in (1, 2):
                    a, b = small[f"reject{s}"], large[f"reject{s}"]
                    checks += 1
                    if not _ordered(a, b, np.sqrt(a * (1 - a) / small["reps"]), np.sqrt(b * (1 - b) / large["reps"])):
                        failures.append(f"{fam} {h}{s} n=1000->3000 {a:.3f}->{b:.3f}")
    ok = not failures
    acceptance_log(5, "rejection grows with shift and with n (A, J)", ok,
                   f"{checks - len(failures)}/{checks} orderings" + (f"; failed {failures}" if failures else ""))
    assert ok


def test_criterion_06_negligible_bias(acceptance_log, estimator_moments):
    worst, failures = 0.0, []
    for m in estimator_moments.moments:
        gap = abs(m["mean"] - m["true"])
        tol = max(0.05 * abs(m["true"]), 4 * m["mc_se"])
        worst = max(worst, gap / tol)
        if gap >= tol:
            failures.append(f"{m['family']} {m['parameter']}")
    ok = not failures and len(estimator_moments.moments) == 27
    acceptance_log(6, "bias of gamma-hat at n=1000, all families", ok,
                   f"max gap/tolerance {worst:.2f}" + (f"; failed {failures}" if failures else ""))
    assert ok


def test_criterion_07_restricted_variance(acceptance_log, estimator_moments):
    constrained = {f"gamma{t}{j}" for t in (2, 3) for j in range(4)}
    ratios, failures = [], []
    for m in estimator_moments.moments:
        if m["parameter"] in constrained:
            ratios.append(m["variance_restricted"] / m["variance"])
            if not m["variance_restricted"] < m["variance"]:
                failures.append(f"{m['family']} {m['parameter']}")
    ok = not failures and len(ratios) == 24
    acceptance_log(7, "variance under J0 below unconstrained", ok,
                   f"variance ratio {min(ratios):.2f}..{max(ratios):.2f} over 8 components x 3 families")
    assert ok


# ---------------------------------------------------------------------------
# 8: cross-time covariance on fixed paths
# ---------------------------------------------------------------------------


def test_criterion_08_cross_time_decorrelation(acceptance_log):
    spec = default_spec("normal")
    n, R = 20000, 2000
    d = generate_dataset(spec, n, seed=808)
    path = []
    for t in range(1, 4):
        x = d.covariates[t - 1][:, 0] if d.covariates[t - 1].shape[1] else np.zeros(n)
        path += [x.astype(np.intp), d.z(t).astype(np.intp)]
    mu = spec.standard.mu[tuple(path)]
    rng = philox(8)
    draws = np.array(
        [estimate_all_point_effects(d.with_outcome(mu + spec.sigma * rng.standard_normal(n))).theta for _ in range(R)]
    )
    times = np.array([s.t for s in estimate_all_point_effects(d).strata])
    centred = draws - draws.mean(axis=0)
    z = []
    for a in range(len(times)):
        for b in range(a + 1, len(times)):
            if times[a] != times[b]:
                prod = centred[:, a] * centred[:, b]
                z.append(prod.mean() / (prod.std(ddof=1) / np.sqrt(R)))
    z = np.abs(z)
    ok = len(z) == 24 and z.max() < 3
    acceptance_log(8, "cross-time covariance of theta-hat is zero", ok,
                   f"{len(z)} entries, max |cov|/MC SE {z.max():.2f}, n={n}, {R} resamples")
    assert ok


# ---------------------------------------------------------------------------
# 9: distribution of W under the null
# ---------------------------------------------------------------------------


def test_criterion_09_wald_is_chi_square(acceptance_log):
    metas, reps, B = 20, 1000, 500
    hyps = [_hyp_json("A", np.eye(9)[:1], [2.0]), _hyp_json("J", _j_rows(), np.zeros(4))]
    passed = {"A0": 0, "J0": 0}
    worst = {"A0": 1.0, "J0": 1.0}
    for meta in range(metas):
        cfg = StudyConfig(dgp=["normal"], n_list=[1000], mc_reps=reps, bootstrap_B=B, seed=9000 + meta, hypotheses=hyps)
        out = run_study(cfg).replicates["normal/n=1000"]
        for name, l in (("A0", 1), ("J0", 4)):
            W = np.array([r["W"][name] for r in out if r["ok"]])
            p = stats.kstest(W, stats.chi2(l).cdf).pvalue
            worst[name] = min(worst[name], p)
            passed[name] += p > 0.01
    ok = all(v >= 0.95 * metas for v in passed.values())
    acceptance_log(9, "KS of null W against chi2_l", ok,
                   f"pass {passed['A0']}/{metas} (A0, l=1), {passed['J0']}/{metas} (J0, l=4); "
                   f"min KS p {worst['A0']:.3f} / {worst['J0']:.3f}; B={B}")
    assert ok


# ---------------------------------------------------------------------------
# 10: chi-square tail
# ---------------------------------------------------------------------------


def test_criterion_10_chi2_survival(acceptance_log):
    err = max(abs(chi2_survival(w, l) - v) for (w, l), v in CHI2_GRID.items())
    closed = max(abs(chi2_survival(w, 2) - np.exp(-w / 2)) for w in np.linspace(0, 50, 501))
    ok = len(CHI2_GRID) == 50 and err <= 1e-10 and closed <= 1e-12
    acceptance_log(10, "chi2 survival vs quadrature oracle", ok, f"50 points max error {err:.1e}; df=2 max error {closed:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 11: determinism of the study across workers
# ---------------------------------------------------------------------------


def test_criterion_11_simulate_determinism(acceptance_log, tmp_path):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps({"dgp": ["normal", "bernoulli"], "n_list": [400], "mc_reps": 24, "bootstrap_B": 40, "seed": 77}))
    blobs = []
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        assert main(["simulate", "--config", str(cfg), "--out", str(out), "--threads", str(threads)]) == 0
        blobs.append((out / "study.json").read_bytes())
    ok = blobs[0] == blobs[1] == blobs[2]
    acceptance_log(11, "simulate JSON identical on 1/4/8 workers", ok, f"{len(blobs[0])} bytes")
    assert ok


# ---------------------------------------------------------------------------
# 12: two-period workflow
# ---------------------------------------------------------------------------


def test_criterion_12_medical_workflow(acceptance_log):
    planted = np.array([-0.08, 0.02, -0.05])

    # planted recovery: within 3 SE on each of 100 independent datasets
    datasets, B = 100, 500
    est, se, aborted = [], [], 0
    for i in range(datasets):
        try:
            rep = analyze_medical(generate_medical(1070, seed=child_seed(1200, i)), B=B, seed=i)
        except BootstrapError:
            aborted += 1
            continue
        est.append([r.estimate for r in rep.blip])
        se.append([r.se for r in rep.blip])
        assert all(p.estimate == b.estimate for p, b in zip(rep.point[1:], rep.blip[1:]))
    est, se = np.array(est), np.array(se)
    within = (np.abs(est - planted) < 3 * se).all(axis=1)
    recovered = within.sum() >= 0.95 * datasets
    mc_se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
    unbiased = bool(np.all(np.abs(est.mean(axis=0) - planted) < 3 * mc_se))

    # null calibration: all blips zero, z1 randomised
    null_sets, null_B = 500, 200
    pvals = []
    for i in range(null_sets):
        d = generate_medical(1070, seed=child_seed(12, i), gamma=(0.0, 0.0, 0.0), confounded=False)
        pvals.append([r.p_value for r in analyze_medical(d, B=null_B, seed=i).blip])
    rejected = np.array(pvals) < 0.05
    pooled = float(rejected.mean())
    calibrated = 0.03 <= pooled <= 0.07

    ok = recovered and unbiased and calibrated
    acceptance_log(12, "two-period planted recovery and null calibration", ok,
                   f"all 3 blips within 3 SE in {within.sum()}/{datasets} datasets (B={B}, {aborted} aborted); "
                   f"mean-planted in MC SE {', '.join(f'{v:.2f}' for v in (est.mean(axis=0) - planted) / mc_se)}; "
                   f"null rejection pooled {pooled:.3f} (per blip {', '.join(f'{v:.3f}' for v in rejected.mean(axis=0))}) "
                   f"over {null_sets} datasets, B={null_B}")
    assert ok


# ---------------------------------------------------------------------------
# Supporting checks on the shared studies
# ---------------------------------------------------------------------------


def test_noncentral_power_matches_monte_carlo(normal_battery):
    """Asymptotic power of A2 at n=3000 against the MC rejection rate."""
    spec = default_spec("normal")
    reps = [r for r in normal_battery.replicates["normal/n=3000"] if r["ok"]]
    cov = np.cov(np.array([r["gamma"] for r in reps]), rowvar=False)
    hyp = Hypothesis(np.eye(9)[:1], [spec.gamma[0] + 2.0])
    lam, power = noncentral_power(hyp, spec.gamma, cov, 0.05)
    mc = normal_battery.error_rates.find("normal", 3000, "A")["reject2"]
    assert abs(power - mc) < 0.05, (lam, power, mc)


def test_study_design_matrix_matches_exact_at_large_n():
    spec = default_spec("normal")
    d = generate_dataset(spec, 20000, seed=4)
    strata = estimate_all_point_effects(d).strata
    from bliptest.blip_model import empirical_transitions

    C_hat = build_design_matrix(spec.snmm, empirical_transitions(d), strata).matrix
    C = build_design_matrix(spec.snmm, exact_transitions(spec), strata).matrix
    assert np.max(np.abs(C_hat - C)) < 0.05
