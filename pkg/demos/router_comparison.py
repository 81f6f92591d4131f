"""Three ways to turn gate scores into mixing weights.

TopK always uses k experts, ReLU can use none, and the learned-lambda
projection always keeps at least one.
"""

import numpy as np

from ldmole import routers, simplex

rng = np.random.default_rng(0)
scores = [np.array([2.0, 1.0, 0.0, -0.5]), np.array([-0.3, -1.2, -0.7, -2.0]),
          rng.standard_normal(4)]

for u in scores:
    print("u =", np.round(u, 3))
    print("  topk(2):    ", np.round(routers.topk_route(u, 2).probs, 4))
    print("  relu:       ", np.round(routers.relu_route(u), 4))
    for lam in (-3.0, 0.0):
        print(f"  sparsegen({lam:+.0f}):", np.round(simplex.sparsegen_project(u, lam).probs, 4))

# lambda comes from a small head on the token feature; squash keeps it below one
head = routers.LambdaHead.init(4, 8, rng)
x = rng.standard_normal(4)
print()
print("predicted lambda for a random token:", routers.predict_lambda(head, x))
