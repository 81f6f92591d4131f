"""Sparsegen projection: how the sparsity factor moves a score vector between
uniform and one-hot, and which lambda range gives exactly k experts."""

import numpy as np

from ldmole import simplex

u = np.array([1.3, 0.9, 0.2, -0.4, -1.1])
print("scores:", u)

for lam in (-1e6, -10.0, -2.0, 0.0, 0.5, 0.9):
    r = simplex.sparsegen_project(u, lam)
    print(f"lambda={lam:>9g}  k={r.k_active}  p={np.round(r.probs, 4)}")

# the closed-form interval of lambda values that keep exactly k experts active
print()
for k in range(1, u.size + 1):
    iv = simplex.lambda_interval(u, k)
    mid = iv.midpoint()
    got = simplex.sparsegen_project(u, mid).k_active
    print(f"k={k}: lambda in ({iv.lower:.4f}, {iv.upper:.4f}], midpoint gives k={got}")

# the Jacobian is what backprop through the router uses
J = simplex.jacobian(u, -2.0)
print()
print("dp/du at lambda=-2 (rows sum to zero over the support):")
print(np.round(J.d_p_d_u, 4))
print("dp/dlambda:", np.round(J.d_p_d_lambda, 4))
