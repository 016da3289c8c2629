"""A short Monte Carlo error-rate study on the normal DGP (a few seconds on one core)."""

from bliptest.study import StudyConfig, run_study

res = run_study(StudyConfig(dgp=["normal"], n_list=[1000], mc_reps=100, bootstrap_B=100, seed=3))
print(res.error_rates.format())
