"""Central finite-difference gradient checking."""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """d f() / d x by central differences; ``x.data`` is perturbed in place."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.sum(f().data))
        flat[i] = orig - h
        fm = float(np.sum(f().data))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the max norm; 0 when both vanish."""
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if denom == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / denom)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6) -> float:
    """Relative error between tape and finite-difference gradients.

    ``f`` must rebuild its graph from ``inputs`` on every call and return a
    tensor; its entries are summed to give the scalar that is differentiated.
    The error is taken over all inputs jointly, so inputs whose gradient is
    exactly zero (e.g. a key bias under softmax shift invariance) are measured
    against the scale of the whole gradient instead of their own.
    """
    for x in inputs:
        x.grad = None
    out = f()
    out.sum().backward() if out.data.size != 1 else out.backward()
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    numeric = [numerical_gradient(f, x, h) for x in inputs]
    return relative_error(
        np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric])
    )
