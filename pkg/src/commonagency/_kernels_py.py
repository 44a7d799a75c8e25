"""Pure numpy versions of the compiled kernels (same signatures, same operation order)."""

from __future__ import annotations

import numpy as np


def stencil(u, interior, strides, h, cov, diff_out, grad_out):
    nd = len(strides)
    p = np.asarray(interior)
    c = u[p]
    acc = np.zeros(p.shape[0])
    for a in range(nd):
        sa = strides[a]
        up = u[p + sa]
        dn = u[p - sa]
        grad_out[a, p] = (up - dn) * (1.0 / (2.0 * h[a]))
        acc = acc + 0.5 * cov[a, a] * (up - 2.0 * c + dn) * (1.0 / (h[a] * h[a]))
        for b in range(a + 1, nd):
            sb = strides[b]
            acc = acc + cov[a, b] * (u[p + sa + sb] - u[p + sa - sb]
                                     - u[p - sa + sb] + u[p - sa - sb]) * (1.0 / (4.0 * h[a] * h[b]))
    diff_out[p] = acc


def em_step(X, drift, sigma, dW, dt, alpha, beta, xi, cost_rate, cost_acc):
    nd = X.shape[1]
    acc = np.zeros_like(X)
    for b in range(nd):
        acc = acc + sigma[:, b] * dW[:, b:b + 1]
    dx = drift * dt + acc
    X += dx
    s = alpha * dt
    for a in range(nd):
        s = s + beta[:, :, a] * dx[:, a:a + 1]
    xi += s
    cost_acc += cost_rate * dt
