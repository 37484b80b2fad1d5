"""Independent reference computations used by the tests."""
import numpy as np

from zol import diffcore as dc


def central_difference(f, x0, h=1e-5):
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e.flat[i] = h
        grad.flat[i] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    return grad


_UNARY = [dc.tanh, dc.softplus, dc.square, lambda v: v * 0.5 - 1.0,
          lambda v: 1.0 / (dc.square(v) + 1.0)]
_BINARY = [lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b,
           lambda a, b: a / (dc.square(b) + 0.5)]


def random_composite(rng: np.random.Generator, n_params: int = 5, depth: int = 6):
    """A random smooth scalar expression over ``n_params`` scalar inputs, and a start point."""
    ops = [(int(rng.integers(2)), int(rng.integers(4)), int(rng.integers(n_params)))
           for _ in range(depth)]
    mix = rng.normal(size=n_params)

    def build(params):
        node = params[0]
        for binary, k, j in ops:
            node = _BINARY[k](node, params[j]) if binary else _UNARY[k % len(_UNARY)](node)
        # every input reaches the output
        for coef, p in zip(mix, params):
            node = node + p * coef
        return node

    return build, rng.uniform(-1.0, 1.0, size=n_params)


def policy_evaluation(P, gamma, pi, r, sweeps=1000):
    """Iterative Q evaluation, independent of any linear solve."""
    n_s, n_a, _ = P.shape
    q = np.zeros((n_s, n_a))
    for _ in range(sweeps):
        v = (pi * q).sum(axis=1)
        q = r + gamma * P @ v
    return q
