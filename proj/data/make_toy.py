"""Regenerates toy_three_features.csv (fixed seed, 200 rows).

target = x0 * x1 + 0.5 * x2 + N(0, 0.3^2), x0, x1 ~ U(1, 4), x2 ~ U(0, 2).
The product x0 * x1 is the dominant order-1 feature.
"""
import numpy as np

rng = np.random.default_rng(7)
n = 200
x0 = rng.uniform(1, 4, n)
x1 = rng.uniform(1, 4, n)
x2 = rng.uniform(0, 2, n)
y = x0 * x1 + 0.5 * x2 + rng.normal(0, 0.3, n)
with open("toy_three_features.csv", "w") as f:
    f.write("x0,x1,x2,target\n")
    for row in zip(x0, x1, x2, y):
        f.write(",".join(f"{v:.6f}" for v in row) + "\n")
