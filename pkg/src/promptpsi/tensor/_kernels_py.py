"""Pure numpy versions of the fused kernels.

Every function takes and returns C-contiguous float64 arrays. 2-D inputs are
(rows, features); the reduction axis is always the last one.
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layer_norm_bwd(g, xhat, rstd, gain):
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gx = g * gain
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dgain, dbias


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def gelu_fwd(x):
    """Returns (gelu(x), t) where t is the inner tanh, reused by the backward."""
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(g, x, t):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * dt)


def adam_update(p, g, m, v, lr, b1, b2, c1, c2, eps):
    """In-place Adam step on flat arrays; c1, c2 are the bias corrections."""
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
