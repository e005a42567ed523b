"""Shared test oracles: finite differences and seeded RNG plumbing."""

import numpy as np


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def numeric_grad(f, arrays, h=1e-3):
    """Central finite differences of a scalar function, one array at a time.

    `f` must read the arrays in place (they are perturbed and restored), so
    this stays independent of any autodiff bookkeeping.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            f_plus = f()
            a[idx] = orig - h
            f_minus = f()
            a[idx] = orig
            g[idx] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
