# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics match ``_kernels_py`` operation for operation."""

DEF MAX_DIM = 8


def stencil(const double[::1] u, const long[::1] interior, const long[::1] strides,
            const double[::1] h, const double[:, ::1] cov,
            double[::1] diff_out, double[:, ::1] grad_out):
    """Half-trace diffusion term and central gradient on interior nodes.

    ``u`` is the flattened grid, ``interior`` the flat indices of nodes with a
    neighbour on both sides along every axis, ``strides`` the flat offsets of
    one step along each axis.
    """
    cdef Py_ssize_t nd = strides.shape[0]
    cdef Py_ssize_t m, p, a, b
    cdef long sa, sb
    cdef double c, up, dn, acc
    cdef double inv2h[MAX_DIM]
    cdef double invh2[MAX_DIM]
    cdef double inv4hh[MAX_DIM][MAX_DIM]
    if nd > MAX_DIM:
        raise ValueError("too many dimensions")
    for a in range(nd):
        inv2h[a] = 1.0 / (2.0 * h[a])
        invh2[a] = 1.0 / (h[a] * h[a])
        for b in range(nd):
            inv4hh[a][b] = 1.0 / (4.0 * h[a] * h[b])
    with nogil:
        for m in range(interior.shape[0]):
            p = interior[m]
            c = u[p]
            acc = 0.0
            for a in range(nd):
                sa = strides[a]
                up = u[p + sa]
                dn = u[p - sa]
                grad_out[a, p] = (up - dn) * inv2h[a]
                acc = acc + 0.5 * cov[a, a] * (up - 2.0 * c + dn) * invh2[a]
                for b in range(a + 1, nd):
                    sb = strides[b]
                    acc = acc + cov[a, b] * (u[p + sa + sb] - u[p + sa - sb]
                                             - u[p - sa + sb] + u[p - sa - sb]) * inv4hh[a][b]
            diff_out[p] = acc


def em_step(double[:, ::1] X, const double[:, ::1] drift, const double[:, ::1] sigma,
            const double[:, ::1] dW, double dt, const double[:, ::1] alpha,
            const double[:, :, ::1] beta, double[:, ::1] xi,
            const double[::1] cost_rate, double[::1] cost_acc):
    """One Euler-Maruyama step with left-endpoint contract and cost accrual, in place."""
    cdef Py_ssize_t n_paths = X.shape[0], nd = X.shape[1], nc = xi.shape[1]
    cdef Py_ssize_t p, a, b, i
    cdef double acc, s
    cdef double dx[MAX_DIM]
    if nd > MAX_DIM:
        raise ValueError("too many dimensions")
    with nogil:
        for p in range(n_paths):
            for a in range(nd):
                acc = 0.0
                for b in range(nd):
                    acc = acc + sigma[a, b] * dW[p, b]
                dx[a] = drift[p, a] * dt + acc
            for a in range(nd):
                X[p, a] = X[p, a] + dx[a]
            for i in range(nc):
                s = alpha[p, i] * dt
                for a in range(nd):
                    s = s + beta[p, i, a] * dx[a]
                xi[p, i] = xi[p, i] + s
            cost_acc[p] = cost_acc[p] + cost_rate[p] * dt
