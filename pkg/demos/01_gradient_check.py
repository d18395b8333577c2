"""Check the hand-written backward passes against finite differences.

Every layer in the package has an explicit backward function. Here we
perturb each input element, re-run the forward pass and compare the
numerical slope with the analytic gradient.
"""
import numpy as np

from nseg import tensor as T


def numerical_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b))


rng = np.random.default_rng(0)
x = rng.standard_normal((2, 3, 6, 6))
w = rng.standard_normal((4, 3, 3, 3))
r = rng.standard_normal((2, 4, 6, 6))  # random projection turns the output into a scalar

loss = lambda: np.sum(T.conv2d_forward(x, T.ConvParams(w)) * r)
gx, gw = T.conv2d_backward(x, T.ConvParams(w), r)
print(f"conv2d input grad  rel. error {rel_error(gx, numerical_grad(loss, x)):.2e}")
print(f"conv2d weight grad rel. error {rel_error(gw, numerical_grad(loss, w)):.2e}")

# batch norm in training mode couples every element of a channel
gamma, beta = rng.random(3) + 0.5, rng.standard_normal(3)
bn = lambda: T.batchnorm_apply(x, T.BatchNormParams(gamma, beta, np.zeros(3), np.ones(3)), "train")
r3 = rng.standard_normal(x.shape)
gx, gg, gb = T.batchnorm_backward(bn().cache, r3)
loss = lambda: np.sum(bn().output * r3)
print(f"batchnorm input grad rel. error {rel_error(gx, numerical_grad(loss, x)):.2e}")
print(f"batchnorm gamma grad rel. error {rel_error(gg, numerical_grad(loss, gamma)):.2e}")

# maxpool sends each gradient to the winner of its window
out, arg = T.maxpool2x2(x)
r4 = rng.standard_normal(out.shape)
loss = lambda: np.sum(T.maxpool2x2(x)[0] * r4)
print(f"maxpool grad rel. error {rel_error(T.maxpool2x2_backward(arg, r4), numerical_grad(loss, x)):.2e}")
