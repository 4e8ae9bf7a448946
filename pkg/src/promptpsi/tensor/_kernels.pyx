# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused row-wise kernels for the autodiff engine (compiled path).

Mirrors ``_kernels_py`` exactly; see that module for the contracts.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp

cnp.import_array()


cdef inline double _tanh(double u) noexcept nogil:
    # libm tanh is scalar and slow; exp-based form, saturated to avoid overflow
    if u > 20.0:
        return 1.0
    if u < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * u) + 1.0)

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gain,
                   const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, v
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mu
                var += v * v
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                v = (x[i, j] - mu) * r
                xhat[i, j] = v
                out[i, j] = v * gain[j] + bias[j]
    return out_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dx_arr = np.empty((n, d))
    dgain_arr = np.zeros(d)
    dbias_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef double m1, m2, gx
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gx = g[i, j] * gain[j]
                m1 += gx
                m2 += gx * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = (g[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx_arr, dgain_arr, dbias_arr


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    cdef double[:, ::1] y = y_arr
    cdef double mx, s, e
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, d):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            for j in range(d):
                y[i, j] = y[i, j] / s
    return y_arr


def softmax_bwd(const double[:, ::1] g, const double[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dx_arr = np.empty((n, d))
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx_arr


def gelu_fwd(x):
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    tt = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef double[::1] ov = out
    cdef double[::1] tv = tt
    cdef Py_ssize_t i, n = flat.shape[0]
    cdef double a, t
    with nogil:
        for i in range(n):
            a = xv[i]
            t = _tanh(GELU_C * (a + GELU_A * a * a * a))
            tv[i] = t
            ov[i] = 0.5 * a * (1.0 + t)
    shape = np.shape(x)
    return out.reshape(shape), tt.reshape(shape)


def gelu_bwd(g, x, t):
    gflat = np.ascontiguousarray(g).reshape(-1)
    xflat = np.ascontiguousarray(x).reshape(-1)
    tflat = np.ascontiguousarray(t).reshape(-1)
    out = np.empty_like(xflat)
    cdef const double[::1] gv = gflat
    cdef const double[::1] xv = xflat
    cdef const double[::1] tv = tflat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = xflat.shape[0]
    cdef double a, th, dt
    with nogil:
        for i in range(n):
            a = xv[i]
            th = tv[i]
            dt = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * a * a)
            ov[i] = gv[i] * (0.5 * (1.0 + th) + 0.5 * a * dt)
    return out.reshape(np.shape(x))


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double c1, double c2, double eps):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi, mi, vi
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (sqrt(vi / c2) + eps)
