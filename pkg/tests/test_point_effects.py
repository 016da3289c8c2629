import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bliptest.errors import ConvergenceError, EstimabilityError, IdentifiabilityError
from bliptest.oracle_dgp import default_spec, exact_point_effects, generate_dataset
from bliptest.point_effects import (
    CellMoments,
    MeanModelSpec,
    VarianceMode,
    estimate_all_point_effects,
    estimate_point_effects,
    irls_identity_binomial,
    pooled_variance,
    regression_point_effects,
    stratum_means,
)
from bliptest.medical import generate_medical
from bliptest.seqdata import SequentialDataset, Stratum, parse_dataset


def one_time(z, y, x=None, family="normal"):
    n = len(z)
    cov = (np.empty((n, 0)),) if x is None else (np.asarray(x, float)[:, None],)
    names = ((),) if x is None else (("x1",),)
    return SequentialDataset(tuple(map(str, range(n))), names, cov, np.asarray(z, float)[:, None], np.asarray(y, float), family)


def with_variance(m, var, n, rng):
    e = rng.standard_normal(n)
    e = (e - e.mean()) / e.std(ddof=1)
    return m + np.sqrt(var) * e


def test_stratum_means_hand_cases():
    d = one_time([1, 0, 0], [5, 1, 3])
    m = stratum_means(d, 1)
    assert m[Stratum(1, 0, 1)] == CellMoments(5.0, 1, 0.0)
    assert m[Stratum(1, 0, 0)] == CellMoments(2.0, 2, 2.0)


def test_point_effect_is_difference_of_means():
    d = one_time([1, 1, 0, 0], [6, 8, 3, 5])
    pe = estimate_point_effects(d, 1)
    assert pe.strata == (Stratum(1, 0, 1),)
    assert pe.theta[0] == pytest.approx(3.0, abs=1e-14)


def test_four_entries_at_time_two():
    d = generate_dataset(default_spec("normal"), 1000, seed=1)
    pe = estimate_point_effects(d, 2)
    assert pe.strata == tuple(Stratum(2, j, 1) for j in range(4))


def test_sample_variance_mode(rng):
    y = np.concatenate([with_variance(1.0, 2.0, 50, rng), with_variance(0.0, 4.0, 50, rng)])
    d = one_time([1] * 50 + [0] * 50, y)
    pe = estimate_point_effects(d, 1, "sample")
    assert pe.blocks[1][0, 0] == pytest.approx(0.12, abs=1e-12)


def test_shared_control_covariance(rng):
    z = np.array([0] * 40 + [1] * 30 + [2] * 30)
    y = np.concatenate([with_variance(0, 4.0, 40, rng), rng.normal(size=60)])
    d = one_time(z, y)
    pe = estimate_point_effects(d, 1)
    assert pe.strata == (Stratum(1, 0, 1), Stratum(1, 0, 2))
    assert pe.blocks[1][0, 1] == pytest.approx(4.0 / 40, abs=1e-12)
    assert pe.blocks[1][1, 0] == pe.blocks[1][0, 1]


def test_different_levels_uncorrelated(rng):
    x = np.repeat([0, 1], 20)
    z = np.tile([0, 1], 20)
    d = one_time(z, rng.normal(size=40), x=x)
    block = estimate_point_effects(d, 1).blocks[1]
    assert block[0, 1] == 0.0


def test_pooled_normal_mode(rng):
    d = generate_dataset(default_spec("normal"), 500, seed=3)
    s2 = pooled_variance(d)
    pe = estimate_all_point_effects(d, "pooled_normal")
    m = stratum_means(d, 3)
    s = Stratum(3, 2, 1)
    i = pe.strata.index(s)
    expected = s2 / m[s].count + s2 / m[Stratum(3, 2, 0)].count
    assert pe.sigma[i, i] == pytest.approx(expected, rel=1e-12)
    # pooled over every cell at every time
    ss = dof = 0
    for t in (1, 2, 3):
        for c in stratum_means(d, t).values():
            ss += c.variance * (c.count - 1)
            dof += c.count - 1
    assert s2 == pytest.approx(ss / dof, rel=1e-12)


def test_plugin_family_modes():
    d = one_time([1, 1, 1, 1, 0, 0], [1, 0, 1, 1, 0, 1], family="bernoulli")
    pe = estimate_point_effects(d, 1, VarianceMode.PLUGIN_FAMILY)
    assert pe.blocks[1][0, 0] == pytest.approx(0.75 * 0.25 / 4 + 0.25 / 2, abs=1e-14)
    d = one_time([1, 1, 0, 0], [2, 4, 1, 1], family="poisson")
    pe = estimate_point_effects(d, 1, VarianceMode.PLUGIN_FAMILY)
    assert pe.blocks[1][0, 0] == pytest.approx(3 / 2 + 1 / 2, abs=1e-14)


def test_empty_control_cell_errors_and_can_be_dropped():
    text = "id,x1,z1,y\n1,0,0,1\n2,0,1,2\n3,1,1,3\n4,1,1,4\n"
    d = parse_dataset(text)
    with pytest.raises(EstimabilityError) as exc:
        estimate_point_effects(d, 1)
    assert exc.value.strata == (Stratum(1, 1, 1),)
    assert "x=1" in str(exc.value)
    pe = estimate_point_effects(d, 1, drop_inestimable=True)
    assert pe.strata == (Stratum(1, 0, 1),)
    assert pe.skipped == (Stratum(1, 1, 1),)


@settings(max_examples=40, deadline=None, derandomize=True)
@given(
    seed=st.integers(0, 10_000),
    mode=st.sampled_from(list(VarianceMode)),
    family=st.sampled_from(["normal", "bernoulli", "poisson"]),
)
def test_blocks_symmetric_psd(seed, mode, family):
    d = generate_dataset(default_spec(family), 300, seed=seed)
    pe = estimate_all_point_effects(d, mode)
    for block in pe.blocks.values():
        assert np.array_equal(block, block.T)
        assert np.linalg.eigvalsh(block).min() >= -1e-10
    S = pe.sigma
    times = np.array([s.t for s in pe.strata])
    assert np.all(S[times[:, None] != times[None, :]] == 0)


def test_never_reports_control_contrast():
    d = generate_dataset(default_spec("normal"), 200, seed=0)
    assert all(s.z != 0 for s in estimate_all_point_effects(d).strata)


def test_stratum_mean_converges_to_enumeration():
    spec = default_spec("normal")
    d = generate_dataset(spec, 5000, seed=11)
    sp = spec.standard
    P = sp.prob
    # mu(x3 = j, z3 = 1) by enumeration over every path
    mass = P.sum(axis=(0, 1, 2, 3))
    mean = (P * sp.mu).sum(axis=(0, 1, 2, 3)) / mass
    m = stratum_means(d, 3)
    for j in range(4):
        c = m[Stratum(3, j, 1)]
        se = np.sqrt(c.variance / c.count)
        assert abs(c.mean - mean[j, 1]) < 4 * se


def test_outcome_resampling_unbiased_for_conditional_effects():
    """Over fresh outcomes on fixed paths, mean theta-hat matches the path-conditional effect."""
    spec = default_spec("normal")
    d = generate_dataset(spec, 1000, seed=21)
    mu = spec.standard.mu
    paths = tuple(
        np.asarray(c, dtype=np.intp)
        for t in range(1, 4)
        for c in ((d.covariates[t - 1][:, 0] if d.covariates[t - 1].shape[1] else np.zeros(d.n)), d.z(t))
    )
    mu_i = mu[paths]
    theta_c = estimate_all_point_effects(d.with_outcome(mu_i)).theta
    rng = np.random.default_rng(5)
    R = 400
    draws = np.array(
        [estimate_all_point_effects(d.with_outcome(mu_i + spec.sigma * rng.standard_normal(d.n))).theta for _ in range(R)]
    )
    se = draws.std(axis=0, ddof=1) / np.sqrt(R)
    assert np.all(np.abs(draws.mean(axis=0) - theta_c) < 4 * se)


def test_exact_point_effects_vs_large_sample():
    spec = default_spec("poisson")
    d = generate_dataset(spec, 20000, seed=8)
    pe = estimate_all_point_effects(d)
    exact = exact_point_effects(spec)
    se = np.sqrt(np.diag(pe.sigma))
    for s, th, e in zip(pe.strata, pe.theta, se):
        assert abs(th - exact[s]) < 4 * e


# ---------------------------------------------------------------------------
# Regression point effects
# ---------------------------------------------------------------------------


def test_saturated_regression_matches_stratum_means(rng):
    z = np.array([0] * 30 + [1] * 20)
    y = (rng.random(50) < np.where(z == 1, 0.7, 0.4)).astype(float)
    d = one_time(z, y, family="bernoulli")
    fit = regression_point_effects(d, MeanModelSpec(1))
    pe = estimate_point_effects(d, 1)
    assert abs(fit.point_effects.theta[0] - pe.theta[0]) < 1e-10
    assert abs(fit.coefficients[0] - y[z == 0].mean()) < 1e-10


def test_planted_first_period_effect_recovered():
    d = generate_medical(1070, seed=3)
    fit = regression_point_effects(d, MeanModelSpec(1, ("x11", "x13")))
    se = np.sqrt(fit.point_effects.sigma[0, 0])
    # theta1 = gamma1 + sum_j c2j gamma2j with c2j from the generator's exact probabilities
    # P(x2=1 | z1) = 0.4, 0.6 and P(z2=1 | x2) = 0.35, 0.65
    c = np.array([(0.4 - 0.6) * 0.35, (0.6 - 0.4) * 0.65])
    theta1 = -0.08 + c @ np.array([0.02, -0.05])
    assert abs(fit.point_effects.theta[0] - theta1) < 3 * se


def test_split_model_yields_one_effect_per_level():
    d = generate_medical(1070, seed=4)
    fit = regression_point_effects(d, MeanModelSpec(2, ("x11", "z1"), split_by="x2"))
    assert fit.point_effects.strata == (Stratum(2, 0, 1), Stratum(2, 1, 1))
    assert len(fit.models) == 2
    assert fit.names[-1] == "[x2=1] z2=1"
    coef, cov = fit
    assert cov.shape == (len(coef), len(coef))


def test_irls_rank_deficiency():
    X = np.column_stack([np.ones(10), np.arange(10), 2 * np.arange(10)])
    with pytest.raises(IdentifiabilityError):
        irls_identity_binomial(X, np.zeros(10) + 0.5)


def test_irls_clamps_and_warns():
    x = np.linspace(0, 1, 40)
    X = np.column_stack([np.ones(40), x])
    y = (x > 0.5).astype(float)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        try:
            irls_identity_binomial(X, y)
        except ConvergenceError as exc:
            assert exc.last is not None
    assert any(issubclass(w.category, RuntimeWarning) for w in rec)


def test_irls_nonconvergence_carries_last_iterate(rng):
    X = np.column_stack([np.ones(200), rng.random(200)])
    y = (rng.random(200) < 0.3 + 0.4 * X[:, 1]).astype(float)
    with pytest.raises(ConvergenceError) as exc:
        irls_identity_binomial(X, y, max_iter=1, tol=0.0)
    assert exc.value.last.shape == (2,)


def _full_history_weights(d, t):
    """Rows of ``a`` with ``a @ y`` the full-history treated-minus-control mean at time ``t``."""
    key = [d.z(s) for s in range(1, t)]
    key += [d.covariates[s - 1][:, 0] if d.covariates[s - 1].shape[1] else np.zeros(d.n) for s in range(1, t + 1)]
    _, cell = np.unique(np.column_stack(key), axis=0, return_inverse=True)
    cell, z = cell.reshape(-1), d.z(t)
    rows = []
    for c in np.unique(cell):
        treated, control = (cell == c) & (z == 1), (cell == c) & (z == 0)
        if treated.any() and control.any():
            rows.append(treated / treated.sum() - control / control.sum())
    return np.array(rows)


def test_full_history_effects_uncorrelated_across_times_exactly():
    """On fixed paths, contrasts within full histories are orthogonal across times for any sample."""
    d = generate_dataset(default_spec("normal"), 3000, seed=5)
    a = [_full_history_weights(d, t) for t in (1, 2, 3)]
    for s in range(3):
        for u in range(s + 1, 3):
            assert np.max(np.abs(a[s] @ a[u].T)) < 1e-14
