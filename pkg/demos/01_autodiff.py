"""Autodiff primitives and the finite-difference checker.

Builds a tiny graph (conv -> relu -> pool -> dense), backpropagates, and compares
the analytic gradients with central differences.
"""

import numpy as np

from gridcarbon import numcore as nc

rng = np.random.default_rng(0)
image = nc.Tensor(rng.random((6, 6, 2)), requires_grad=True)
kernel = nc.Tensor(rng.standard_normal((3, 3, 2, 4)) * 0.3, requires_grad=True)
weight = nc.Tensor(rng.standard_normal((1, 4)), requires_grad=True)


def readout():
    h = nc.relu(nc.conv2d(image, kernel, padding=1))
    return nc.sum(nc.dense(nc.global_avg_pool(h), weight))


loss = readout()
nc.backward(loss)
print(f"readout = {loss.item():.6f}")
print("d readout / d kernel[0, 0] =\n", kernel.grad[0, 0])

err = nc.check_gradients(readout, [image, kernel, weight])
print(f"worst relative error vs central differences: {err:.2e}")

# Adam on a quadratic bowl
x = nc.Tensor(np.array([3.0, -2.0]), requires_grad=True)
opt = nc.Adam({"x": x}, lr=0.1)
for _ in range(200):
    opt.zero_grad()
    nc.backward(nc.sum(x * x))
    opt.step()
print("Adam minimizer of |x|^2 after 200 steps:", np.round(x.data, 4))
