# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled discretized-logistic kernel.

Mirrors ``ratpad._kernels_py.logistic_logprob`` element for element.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, expm1, fabs

cnp.import_array()

cdef double HALF_BIN = 1.0 / 255.0
cdef double LN2 = 0.6931471805599453


cdef inline double log_sigmoid(double x) nogil:
    if x >= 0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


cdef inline double sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double log1mexp_neg(double d) nogil:
    # log(1 - exp(-d)) for d > 0
    if d <= LN2:
        return log(-expm1(-d))
    return log1p(-exp(-d))


def logistic_logprob(const unsigned char[::1] values,
                     const double[::1] mean,
                     const double[::1] log_scale,
                     bint with_grad=True):
    cdef Py_ssize_t n = values.shape[0]
    if mean.shape[0] != n or log_scale.shape[0] != n:
        raise ValueError("kernel inputs must share length")
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] lp = out
    cdef double[::1] gmu
    cdef double[::1] gls
    if with_grad:
        gmu_arr = np.empty(n, dtype=np.float64)
        gls_arr = np.empty(n, dtype=np.float64)
        gmu = gmu_arr
        gls = gls_arr
    cdef Py_ssize_t i
    cdef int v
    cdef double x, inv, c, a, b, d
    with nogil:
        for i in range(n):
            v = values[i]
            x = v / 127.5 - 1.0
            inv = exp(-log_scale[i])
            c = x - mean[i]
            a = inv * (c + HALF_BIN)
            b = inv * (c - HALF_BIN)
            if v == 0:
                lp[i] = log_sigmoid(a)
                if with_grad:
                    gmu[i] = -inv * sigmoid(-a)
                    gls[i] = -a * sigmoid(-a)
            elif v == 255:
                lp[i] = log_sigmoid(-b)
                if with_grad:
                    gmu[i] = inv * sigmoid(b)
                    gls[i] = b * sigmoid(b)
            else:
                d = a - b
                lp[i] = log_sigmoid(a) + log_sigmoid(-b) + log1mexp_neg(d)
                if with_grad:
                    gmu[i] = -inv * (sigmoid(-a) - sigmoid(b))
                    gls[i] = -a * sigmoid(-a) + b * sigmoid(b) - d / expm1(d)
    if with_grad:
        return out, gmu_arr, gls_arr
    return out, None, None
