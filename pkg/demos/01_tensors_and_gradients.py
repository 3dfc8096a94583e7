"""Tensors and reverse-mode gradients.

Builds a small computation, walks the tape backward, and cross-checks the
analytic gradients against central finite differences.
"""

import numpy as np

from keds import numeric as nm

rng = np.random.default_rng(0)

# forward: loss = mean(l2_normalize(gelu(x @ w)) * probe)
x = nm.parameter(rng.standard_normal((4, 6)), dtype=np.float64)
w = nm.parameter(rng.standard_normal((6, 3)), dtype=np.float64)
probe = nm.constant(rng.standard_normal((4, 3)), dtype=np.float64)

hidden = nm.gelu(nm.matmul(x, w))
loss = nm.mean_all(nm.mul(nm.l2_normalize(hidden), probe))
print(f"loss value: {float(loss.data):+.6f}")

nm.backward(loss)
print(f"grad shapes: x {x.grad.shape}, w {w.grad.shape}")
print(f"|grad x| = {np.abs(x.grad).sum():.4f}, |grad w| = {np.abs(w.grad).sum():.4f}")

# the same loss builder, probed coordinate by coordinate
nm.zero_grads([x, w])
worst = nm.finite_difference_check(
    lambda: nm.mean_all(nm.mul(nm.l2_normalize(nm.gelu(nm.matmul(x, w))), probe)),
    [x, w],
)
print(f"worst relative error vs central differences: {worst:.2e}")

# backward is single-shot per forward pass
root = nm.sum_all(nm.mul(x, x))
nm.backward(root)
try:
    nm.backward(root)
except Exception as exc:
    print(f"second backward on one graph raises: {type(exc).__name__}")
