"""Shared test oracles: central finite differences against the autodiff tape."""

import numpy as np

from tsic.autodiff import Tensor


def numerical_grad(fn, x, eps=1e-6):
    """Central-difference gradient of scalar-valued fn at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_grad(build, x0, rtol=1e-5, atol=1e-8, eps=1e-6):
    """Compare autodiff gradient of `build(Tensor) -> scalar Tensor` with
    finite differences at x0. Returns (analytic, numeric)."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    out = build(t)
    out.backward()
    analytic = t.grad

    numeric = numerical_grad(lambda arr: build(Tensor(arr.copy())).item(), x0, eps=eps)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)
    return analytic, numeric


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom))
