"""Two-period binary-outcome analysis on synthetic data with planted blips (-0.08, 0.02, -0.05)."""

from bliptest.medical import analyze_medical, generate_medical

report = analyze_medical(generate_medical(1070, seed=2024), B=500, seed=1)
print(report.format())
