"""Hot-loop kernels: the compiled extension when available, numpy otherwise.

Set ``COMMONAGENCY_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

if os.environ.get("COMMONAGENCY_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _kernels_py
        BACKEND = "python"


def backends() -> dict:
    """All importable kernel implementations by name."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:  # pragma: no cover
        pass
    return out


class StencilPlan:
    """Precomputed flat-index layout for the interior stencil on a uniform grid."""

    def __init__(self, shape, h, cov):
        self.shape = tuple(int(s) for s in shape)
        self.ndim = len(self.shape)
        self.h = np.ascontiguousarray(h, dtype=float)
        self.cov = np.ascontiguousarray(cov, dtype=float)
        item = np.ones(self.shape).strides
        self.strides = np.array([s // 8 for s in item], dtype=np.int64)
        inner = tuple(slice(1, n - 1) for n in self.shape)
        idx = np.arange(int(np.prod(self.shape)), dtype=np.int64).reshape(self.shape)
        self.interior = np.ascontiguousarray(idx[inner].ravel())
        self.size = idx.size

    def apply(self, u: np.ndarray, impl=None):
        """Return ``(diffusion, grad)``; boundary entries are zero."""
        impl = impl or _impl
        flat = np.ascontiguousarray(u, dtype=float).reshape(-1)
        diff = np.zeros(self.size)
        grad = np.zeros((self.ndim, self.size))
        impl.stencil(flat, self.interior, self.strides, self.h, self.cov, diff, grad)
        return diff.reshape(self.shape), grad.reshape((self.ndim,) + self.shape)


def em_step(X, drift, sigma, dW, dt, alpha, beta, xi, cost_rate, cost_acc, impl=None):
    impl = impl or _impl
    impl.em_step(X, np.ascontiguousarray(drift), sigma, dW, float(dt),
                 np.ascontiguousarray(alpha), np.ascontiguousarray(beta), xi,
                 np.ascontiguousarray(cost_rate), cost_acc)
