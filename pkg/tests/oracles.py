"""Independent reference computations used by the tests.

Nothing here touches the autograd tape: forward passes are plain numpy and
derivatives are central finite differences.
"""

import numpy as np


def unpack(params):
    return params.arrays()


def relu(z):
    return np.maximum(z, 0.0)


def log_softmax_rows(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def features(spec, w, x):
    h = np.asarray(x, dtype=float)
    for i in range(len(spec.feature_dims)):
        h = relu(h @ w[f"F.w{i}"] + w[f"F.b{i}"])
    return h


def class_logits(spec, w, x):
    return features(spec, w, x) @ w["T.w0"] + w["T.b0"]


def domain_logits(spec, w, x):
    h = features(spec, w, x)
    h = relu(h @ w["D.w0"] + w["D.b0"])
    h = relu(h @ w["D.w1"] + w["D.b1"])
    return h @ w["D.w2"] + w["D.b2"]


def cls_loss(params, x, y, values=None):
    p = params if values is None else params.with_values(values)
    lp = log_softmax_rows(class_logits(p.spec, unpack(p), x))
    return -lp[np.arange(len(y)), y].mean()


def adv_loss(params, x, domain, values=None):
    p = params if values is None else params.with_values(values)
    lp = log_softmax_rows(domain_logits(p.spec, unpack(p), x))
    return -lp[:, domain].mean()


def central_diff(f, theta, step=1e-5):
    theta = np.asarray(theta, dtype=float)
    out = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        out[i] = (f(theta + e) - f(theta - e)) / (2 * step)
    return out


def dense_hessian(grad_fn, theta, step=None):
    """Column-by-column central differences of a gradient function, symmetrised."""
    theta = np.asarray(theta, dtype=float)
    if step is None:
        step = 1e-4 * (1.0 + np.linalg.norm(theta))
    n = theta.size
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        H[:, i] = (grad_fn(theta + e) - grad_fn(theta - e)) / (2 * step)
    return 0.5 * (H + H.T)


def rel_err(a, b):
    """Largest coordinate error relative to the largest coordinate magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))
