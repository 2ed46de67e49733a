"""A short tour of the tape: fit logistic regression by hand, then gradcheck every op.

    python demos/autodiff_tour.py
"""

import numpy as np

from dgbench.autodiff import OPS, Adam, Graph, finite_difference_check, parameter
from dgbench.autodiff.gradcheck import standard_cases

rng = np.random.default_rng(0)
x = rng.standard_normal((200, 2))
y = (x[:, 0] - 0.5 * x[:, 1] > 0).astype(int)

w = parameter(rng.standard_normal((2, 2)) * 0.1)
b = parameter(np.zeros(2))
opt = Adam([w, b], lr=0.05)

for step in range(201):
    g = Graph()
    logits = g.bias_add(g.matmul(x, w), b)
    loss = g.cross_entropy(logits, y)
    opt.step(g.backward(loss, [w, b]))
    if step % 50 == 0:
        acc = np.mean(logits.data.argmax(axis=1) == y)
        print(f"step {step:3d}  loss {loss.item():.4f}  acc {acc:.3f}")

# every registered op against central differences
cases = standard_cases(np.random.default_rng(1))
for op in sorted(OPS):
    inputs, attrs = cases[op]
    print(f"{op:16s} max rel err {finite_difference_check(op, inputs, attrs):.1e}")
