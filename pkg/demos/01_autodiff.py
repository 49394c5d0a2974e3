"""Reverse-mode autodiff on a tape, checked against finite differences.

Every operation executed inside a ``Graph`` block is appended to the tape in
creation order, which is already a topological order. ``backward`` walks the
tape once in reverse.
"""
import numpy as np

from noisylab import tensor as T
from noisylab.tensor import Graph, Tensor, grad_rel_error, numerical_grad

rng = np.random.default_rng(0)

# a one-layer conv net on two 6x6 RGB images (NHWC layout)
x = Tensor(rng.normal(size=(2, 6, 6, 3)))
w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
gamma = Tensor(np.ones(4), requires_grad=True)
beta = Tensor(np.zeros(4), requires_grad=True)
running_mean, running_var = np.zeros(4), np.ones(4)
targets = np.array([1, 3])


def loss_fn():
    h = T.conv2d(x, w, stride=1, pad=1)
    h = T.batchnorm2d(h, gamma, beta, running_mean.copy(), running_var.copy(), training=True)
    return T.softmax_cross_entropy(T.global_avg_pool(T.relu(h)), targets)


with Graph() as g:
    loss = loss_fn()
print("tape:", [n.kind for n in g.nodes])
g.backward(loss, [w, gamma, beta])
print(f"loss = {loss.item():.6f}")

for name, p in (("conv weight", w), ("bn gamma", gamma), ("bn beta", beta)):
    err = grad_rel_error(p.grad.copy(), numerical_grad(loss_fn, p))
    print(f"{name:12s} analytic vs central difference: relative error {err:.2e}")
