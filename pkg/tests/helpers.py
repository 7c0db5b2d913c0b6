"""Shared test oracles: central finite differences and relative error."""

import numpy as np


def finite_difference(f, arrays, eps=1e-5):
    """Central-difference gradient of scalar f(arrays) w.r.t. every entry.

    ``f`` must treat ``arrays`` as read-only inputs and return a float; the
    arrays are perturbed in place and restored.
    """
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat_a = a.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_a.size):
            orig = flat_a[i]
            flat_a[i] = orig + eps
            f_plus = f(arrays)
            flat_a[i] = orig - eps
            f_minus = f(arrays)
            flat_a[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * eps)
    return grads


def rel_error(a, b):
    """Norm-relative error ||a - b|| / max(||a||, ||b||), safe near zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(np.linalg.norm((a - b).ravel()) / denom)
