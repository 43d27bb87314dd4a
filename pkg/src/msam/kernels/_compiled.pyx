# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel core.

Same surface as ``msam.kernels.numpy_backend``. gemm is delegated to
BLAS through scipy's cython bindings (row-major handled by the usual
operand swap); the row-wise kernels are fused single-pass loops so each
row is read once instead of once per numpy temporary. Reductions
accumulate in the input precision, matching the package-wide rule.
"""

import numpy as np

from libc.math cimport exp, sqrt
from scipy.linalg.cython_blas cimport dgemm, sgemm

NAME = "compiled"

ctypedef fused floating:
    float
    double


# -- BLAS-backed matrix products -----------------------------------------------

cdef void _gemm_rm_f(const float* a, const float* b, float* c,
                     int m, int k, int n) noexcept nogil:
    # Row-major C = A @ B via column-major C^T = B^T A^T.
    cdef float alpha = 1.0, beta = 0.0
    sgemm("N", "N", &n, &m, &k, &alpha, <float*> b, &n, <float*> a, &k,
          &beta, c, &n)


cdef void _gemm_rm_d(const double* a, const double* b, double* c,
                     int m, int k, int n) noexcept nogil:
    cdef double alpha = 1.0, beta = 0.0
    dgemm("N", "N", &n, &m, &k, &alpha, <double*> b, &n, <double*> a, &k,
          &beta, c, &n)


def matmul2d(const floating[:, ::1] a, const floating[:, ::1] b):
    cdef int m = a.shape[0], k = a.shape[1], n = b.shape[1]
    if b.shape[0] != k:
        raise ValueError("matmul2d: inner dimensions disagree")
    if floating is float:
        out = np.empty((m, n), dtype=np.float32)
    else:
        out = np.empty((m, n), dtype=np.float64)
    cdef floating[:, ::1] c = out
    if m > 0 and n > 0 and k > 0:
        with nogil:
            if floating is float:
                _gemm_rm_f(<const float*> &a[0, 0], <const float*> &b[0, 0],
                           <float*> &c[0, 0], m, k, n)
            else:
                _gemm_rm_d(<const double*> &a[0, 0], <const double*> &b[0, 0],
                           <double*> &c[0, 0], m, k, n)
    return out


def bmm(const floating[:, :, ::1] a, const floating[:, :, ::1] b):
    cdef int nb = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2]
    if b.shape[0] != nb or b.shape[1] != k:
        raise ValueError("bmm: batch or inner dimensions disagree")
    if floating is float:
        out = np.empty((nb, m, n), dtype=np.float32)
    else:
        out = np.empty((nb, m, n), dtype=np.float64)
    cdef floating[:, :, ::1] c = out
    cdef int i
    with nogil:
        for i in range(nb):
            if floating is float:
                _gemm_rm_f(<const float*> &a[i, 0, 0], <const float*> &b[i, 0, 0],
                           <float*> &c[i, 0, 0], m, k, n)
            else:
                _gemm_rm_d(<const double*> &a[i, 0, 0], <const double*> &b[i, 0, 0],
                           <double*> &c[i, 0, 0], m, k, n)
    return out


# -- fused row-wise kernels ------------------------------------------------------

def softmax2d(const floating[:, ::1] x):
    cdef Py_ssize_t r, j, rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] y = out
    cdef floating m, s
    with nogil:
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, cols):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(cols):
                y[r, j] = <floating> exp(x[r, j] - m)
                s += y[r, j]
            for j in range(cols):
                y[r, j] /= s
    return out


def softmax2d_grad(const floating[:, ::1] y, const floating[:, ::1] gy):
    cdef Py_ssize_t r, j, rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] gx = out
    cdef floating dot
    with nogil:
        for r in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += gy[r, j] * y[r, j]
            for j in range(cols):
                gx[r, j] = y[r, j] * (gy[r, j] - dot)
    return out


def l2norm2d(const floating[:, ::1] x, double eps):
    cdef Py_ssize_t r, j, rows = x.shape[0], cols = x.shape[1]
    dt = np.float32 if floating is float else np.float64
    out = np.empty((rows, cols), dtype=dt)
    norms = np.empty(rows, dtype=dt)
    cdef floating[:, ::1] y = out
    cdef floating[::1] nv = norms
    cdef floating s, d
    with nogil:
        for r in range(rows):
            s = 0.0
            for j in range(cols):
                s += x[r, j] * x[r, j]
            s = <floating> sqrt(s)
            nv[r] = s
            d = s if s > <floating> eps else <floating> eps
            for j in range(cols):
                y[r, j] = x[r, j] / d
    return out, norms


def l2norm2d_grad(const floating[:, ::1] y, const floating[::1] norms, double eps,
                  const floating[:, ::1] gy):
    cdef Py_ssize_t r, j, rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] gx = out
    cdef floating proj, inv
    with nogil:
        for r in range(rows):
            if norms[r] > <floating> eps:
                proj = 0.0
                for j in range(cols):
                    proj += y[r, j] * gy[r, j]
                inv = (<floating> 1.0) / norms[r]
                for j in range(cols):
                    gx[r, j] = (gy[r, j] - y[r, j] * proj) * inv
            else:
                inv = (<floating> 1.0) / (<floating> eps)
                for j in range(cols):
                    gx[r, j] = gy[r, j] * inv
    return out


def layernorm2d(const floating[:, ::1] x, const floating[::1] gamma, const floating[::1] beta,
                double eps):
    cdef Py_ssize_t r, j, rows = x.shape[0], cols = x.shape[1]
    dt = np.float32 if floating is float else np.float64
    out = np.empty((rows, cols), dtype=dt)
    xhat_arr = np.empty((rows, cols), dtype=dt)
    rstd_arr = np.empty(rows, dtype=dt)
    cdef floating[:, ::1] y = out
    cdef floating[:, ::1] xhat = xhat_arr
    cdef floating[::1] rstd = rstd_arr
    cdef floating mu, var, d, rs
    with nogil:
        for r in range(rows):
            mu = 0.0
            for j in range(cols):
                mu += x[r, j]
            mu /= cols
            var = 0.0
            for j in range(cols):
                d = x[r, j] - mu
                var += d * d
            var /= cols
            rs = (<floating> 1.0) / (<floating> sqrt(var + <floating> eps))
            rstd[r] = rs
            for j in range(cols):
                xhat[r, j] = (x[r, j] - mu) * rs
                y[r, j] = xhat[r, j] * gamma[j] + beta[j]
    return out, xhat_arr, rstd_arr


def layernorm2d_grad(const floating[::1] gamma, const floating[:, ::1] xhat,
                     const floating[::1] rstd, const floating[:, ::1] gy):
    cdef Py_ssize_t r, j, rows = gy.shape[0], cols = gy.shape[1]
    dt = np.float32 if floating is float else np.float64
    gx_arr = np.empty((rows, cols), dtype=dt)
    ggamma_arr = np.zeros(cols, dtype=dt)
    gbeta_arr = np.zeros(cols, dtype=dt)
    cdef floating[:, ::1] gx = gx_arr
    cdef floating[::1] ggamma = ggamma_arr
    cdef floating[::1] gbeta = gbeta_arr
    cdef floating m1, m2, dh
    with nogil:
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for j in range(cols):
                dh = gy[r, j] * gamma[j]
                m1 += dh
                m2 += dh * xhat[r, j]
                ggamma[j] += gy[r, j] * xhat[r, j]
                gbeta[j] += gy[r, j]
            m1 /= cols
            m2 /= cols
            for j in range(cols):
                gx[r, j] = rstd[r] * (gy[r, j] * gamma[j] - m1 - xhat[r, j] * m2)
    return gx_arr, ggamma_arr, gbeta_arr


# -- cross-modal contractions ------------------------------------------------------
# Plain loops with a fixed accumulation order: every output element is
# computed identically wherever it sits, which the pooling pipeline's
# exact batch-equivariance contract depends on.

cdef inline floating _dot(const floating* x, const floating* y,
                          Py_ssize_t n) noexcept nogil:
    # Four fixed-order partial sums: auto-vectorizable without changing
    # results between calls or element positions.
    cdef floating a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0
    cdef Py_ssize_t i = 0
    while i + 4 <= n:
        a0 += x[i] * y[i]
        a1 += x[i + 1] * y[i + 1]
        a2 += x[i + 2] * y[i + 2]
        a3 += x[i + 3] * y[i + 3]
        i += 4
    while i < n:
        a0 += x[i] * y[i]
        i += 1
    return (a0 + a1) + (a2 + a3)


def scores_bft(const floating[:, :, ::1] frames, const floating[:, ::1] texts):
    cdef Py_ssize_t b, f, t
    cdef Py_ssize_t nb = frames.shape[0], nf = frames.shape[1], nd = frames.shape[2]
    cdef Py_ssize_t nt = texts.shape[0]
    out = np.empty((nb, nf, nt), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] o = out
    with nogil:
        for b in range(nb):
            for f in range(nf):
                for t in range(nt):
                    o[b, f, t] = _dot(&frames[b, f, 0], &texts[t, 0], nd)
    return out


def agg_btd(const floating[:, :, ::1] weights, const floating[:, :, ::1] frames):
    cdef Py_ssize_t b, f, t, d
    cdef Py_ssize_t nb = weights.shape[0], nf = weights.shape[1], nt = weights.shape[2]
    cdef Py_ssize_t nd = frames.shape[2]
    out = np.zeros((nb, nt, nd), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, ::1] o = out
    cdef floating w
    with nogil:
        for b in range(nb):
            for f in range(nf):
                for t in range(nt):
                    w = weights[b, f, t]
                    for d in range(nd):
                        o[b, t, d] += w * frames[b, f, d]
    return out


def dot_bt(const floating[:, :, ::1] x, const floating[:, ::1] y):
    cdef Py_ssize_t b, t
    cdef Py_ssize_t nb = x.shape[0], nt = x.shape[1], nd = x.shape[2]
    out = np.empty((nb, nt), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] o = out
    with nogil:
        for b in range(nb):
            for t in range(nt):
                o[b, t] = _dot(&x[b, t, 0], &y[t, 0], nd)
    return out


# -- elementwise maps -------------------------------------------------------------
# Pure elementwise transcendentals carry no fusion win, and numpy's
# SIMD exp beats scalar libm loops by a wide margin (see
# ``python -m msam.bench``), so the compiled core delegates these to
# the numpy provider.

from .numpy_backend import sigmoid, sigmoid_grad, softplus, softplus_grad
