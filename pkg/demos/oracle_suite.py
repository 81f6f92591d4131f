"""Check the closed-form projection against a brute-force QP solver and its
derivatives against finite differences. Prints the JSON report."""

from ldmole import oracles

report = oracles.run_suite(2000, (2, 8), seed=3, grad_trials=300, interval_trials=300)
print(report.to_json())
print("all checks passed" if report.ok else f"{len(report.failures)} failures")
