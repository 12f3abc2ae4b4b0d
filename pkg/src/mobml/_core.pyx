# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pair-block kernels.

Every function fills the off-diagonal 3x3 blocks of a batch of mobility
matrices ``out[K, 3n, 3n]`` from positions ``pos[K, n, 3]``. Block (i, j) with
i > j is evaluated at ``r = X_i - X_j`` and mirrored into (j, i) as its
transpose. Each block is written by exactly one thread, so the result does not
depend on ``num_threads``.

Return value is the number of coincident pairs met (0 on success).
"""
from cython.parallel cimport prange
from libc.math cimport sqrt, exp, log1p

ctypedef const double[:, :, ::1] cpos_t
ctypedef double[:, :, ::1] out_t


cdef inline void _write_sym(out_t out, Py_ssize_t k, Py_ssize_t i, Py_ssize_t j,
                            double b00, double b01, double b02,
                            double b11, double b12, double b22) noexcept nogil:
    cdef Py_ssize_t I = 3 * i, J = 3 * j
    out[k, I, J] = b00
    out[k, I, J + 1] = b01
    out[k, I, J + 2] = b02
    out[k, I + 1, J] = b01
    out[k, I + 1, J + 1] = b11
    out[k, I + 1, J + 2] = b12
    out[k, I + 2, J] = b02
    out[k, I + 2, J + 1] = b12
    out[k, I + 2, J + 2] = b22
    # mirror: block (j, i) = block (i, j)^T, identical since symmetric
    out[k, J, I] = b00
    out[k, J + 1, I] = b01
    out[k, J + 2, I] = b02
    out[k, J, I + 1] = b01
    out[k, J + 1, I + 1] = b11
    out[k, J + 2, I + 1] = b12
    out[k, J, I + 2] = b02
    out[k, J + 1, I + 2] = b12
    out[k, J + 2, I + 2] = b22


cdef inline void _write_iso(out_t out, Py_ssize_t k, Py_ssize_t i, Py_ssize_t j,
                            double alpha, double beta,
                            double ux, double uy, double uz) noexcept nogil:
    _write_sym(out, k, i, j,
               alpha + beta * (ux * ux), beta * (ux * uy), beta * (ux * uz),
               alpha + beta * (uy * uy), beta * (uy * uz),
               alpha + beta * (uz * uz))


def oseen_pairs(cpos_t pos, out_t out, double prefactor, double r_min,
                int num_threads=1):
    """Clamped Oseen pair blocks ``prefactor / r_eff * (I + u u^T)``."""
    cdef Py_ssize_t K = pos.shape[0], n = pos.shape[1]
    cdef Py_ssize_t w, k, i, j
    cdef double rx, ry, rz, r, reff, c
    cdef int bad = 0
    for w in prange(K * n, nogil=True, num_threads=num_threads, schedule='static'):
        k = w // n
        i = w % n
        for j in range(i):
            rx = pos[k, i, 0] - pos[k, j, 0]
            ry = pos[k, i, 1] - pos[k, j, 1]
            rz = pos[k, i, 2] - pos[k, j, 2]
            r = sqrt((rx * rx + ry * ry) + rz * rz)
            if r == 0.0:
                bad += 1
                continue
            reff = r
            if reff < r_min:
                reff = r_min
            c = prefactor / reff
            _write_iso(out, k, i, j, c, c, rx / r, ry / r, rz / r)
    return bad


def table_pairs(cpos_t pos, out_t out, const double[::1] radii,
                const double[::1] alpha, const double[::1] beta,
                int num_threads=1):
    """Tabulated isotropic blocks ``alpha(r) I + beta(r) u u^T``.

    Linear interpolation in r, clamped to the end values outside the grid.
    """
    cdef Py_ssize_t K = pos.shape[0], n = pos.shape[1], m = radii.shape[0]
    cdef Py_ssize_t w, k, i, j, lo, hi, mid
    cdef double rx, ry, rz, r, a, b, t
    cdef int bad = 0
    for w in prange(K * n, nogil=True, num_threads=num_threads, schedule='static'):
        k = w // n
        i = w % n
        for j in range(i):
            rx = pos[k, i, 0] - pos[k, j, 0]
            ry = pos[k, i, 1] - pos[k, j, 1]
            rz = pos[k, i, 2] - pos[k, j, 2]
            r = sqrt((rx * rx + ry * ry) + rz * rz)
            if r == 0.0:
                bad += 1
                continue
            if r <= radii[0]:
                a = alpha[0]
                b = beta[0]
            elif r >= radii[m - 1]:
                a = alpha[m - 1]
                b = beta[m - 1]
            else:
                # largest lo with radii[lo] <= r
                lo = 0
                hi = m - 1
                while hi - lo > 1:
                    mid = (lo + hi) // 2
                    if radii[mid] <= r:
                        lo = mid
                    else:
                        hi = mid
                t = r - radii[lo]
                a = (alpha[hi] - alpha[lo]) / (radii[hi] - radii[lo]) * t + alpha[lo]
                b = (beta[hi] - beta[lo]) / (radii[hi] - radii[lo]) * t + beta[lo]
            _write_iso(out, k, i, j, a, b, rx / r, ry / r, rz / r)
    return bad


cdef inline double _softplus(double x) noexcept nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


def kernel_pairs(cpos_t pos, out_t out, const double[:, ::1] centers,
                 const double[:, ::1] weights, double bandwidth,
                 bint positive_diagonal=False, int num_threads=1):
    """Gaussian-RBF Cholesky-factor blocks ``L L^T``.

    ``weights[c]`` holds the six lower-triangular entries of L in the order
    (0,0), (1,0), (1,1), (2,0), (2,1), (2,2).
    """
    cdef Py_ssize_t K = pos.shape[0], n = pos.shape[1], C = centers.shape[0]
    cdef Py_ssize_t w, k, i, j, c
    cdef double rx, ry, rz, dx, dy, dz, phi, inv2h2
    cdef double l0, l1, l2, l3, l4, l5
    inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth)
    for w in prange(K * n, nogil=True, num_threads=num_threads, schedule='static'):
        k = w // n
        i = w % n
        for j in range(i):
            rx = pos[k, i, 0] - pos[k, j, 0]
            ry = pos[k, i, 1] - pos[k, j, 1]
            rz = pos[k, i, 2] - pos[k, j, 2]
            l0 = 0.0
            l1 = 0.0
            l2 = 0.0
            l3 = 0.0
            l4 = 0.0
            l5 = 0.0
            for c in range(C):
                dx = rx - centers[c, 0]
                dy = ry - centers[c, 1]
                dz = rz - centers[c, 2]
                phi = exp(-((dx * dx + dy * dy) + dz * dz) * inv2h2)
                l0 = l0 + weights[c, 0] * phi
                l1 = l1 + weights[c, 1] * phi
                l2 = l2 + weights[c, 2] * phi
                l3 = l3 + weights[c, 3] * phi
                l4 = l4 + weights[c, 4] * phi
                l5 = l5 + weights[c, 5] * phi
            if positive_diagonal:
                l0 = _softplus(l0)
                l2 = _softplus(l2)
                l5 = _softplus(l5)
            # M = L L^T with L = [[l0,0,0],[l1,l2,0],[l3,l4,l5]]
            _write_sym(out, k, i, j,
                       l0 * l0, l0 * l1, l0 * l3,
                       l1 * l1 + l2 * l2, l1 * l3 + l2 * l4,
                       (l3 * l3 + l4 * l4) + l5 * l5)
    return 0
