# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for batch evaluation of rectifier wavelets.

Every routine evaluates, for points ``u`` (n, d) with a per-point normal
offset ``w`` (n,) and terms ``(ks[j], bs[j])``::

    2**(k/2) * cd * (rect(T_k(u) - 2(d-1) + w) - 0.5 * rect(T_{k-1}(u) - 2(d-1) + w))

where ``T_s(u) = sum_j t(2**(s/d) * (u_j - b_j))``.  ``w`` is zero for plain
wavelets on R^d and ``sum t_r(v) - 2(m-d)`` for the ambient extension.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport pow, fabs

cnp.import_array()


cdef inline double _rect(double x) nogil:
    return x if x > 0.0 else 0.0


cdef inline double _trap(double x) nogil:
    return _rect(x + 3.0) - _rect(x + 1.0) - _rect(x - 1.0) + _rect(x - 3.0)


cdef inline double _term(const double[:, ::1] u, Py_ssize_t i, double wi,
                         const double[:, ::1] bs, Py_ssize_t j,
                         double sf, double sc, double amp, double shift,
                         Py_ssize_t d) nogil:
    cdef Py_ssize_t a
    cdef double diff, zc, tf = 0.0, tc = 0.0
    for a in range(d):
        diff = u[i, a] - bs[j, a]
        zc = sc * diff
        if fabs(zc) >= 3.0:
            return 0.0
        tc += _trap(zc)
        tf += _trap(sf * diff)
    return amp * (_rect(tf + shift + wi) - 0.5 * _rect(tc + shift + wi))


def _scales(const long[::1] ks, Py_ssize_t d):
    cdef Py_ssize_t T = ks.shape[0]
    sf = np.empty(T)
    sc = np.empty(T)
    amp = np.empty(T)
    cdef Py_ssize_t j
    for j in range(T):
        sf[j] = pow(2.0, ks[j] / <double>d)
        sc[j] = pow(2.0, (ks[j] - 1) / <double>d)
        amp[j] = pow(2.0, ks[j] / 2.0)
    return sf, sc, amp


def psi_eval(const double[:, ::1] u, const double[::1] w, const long[::1] ks,
             const double[:, ::1] bs, double cd):
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], T = ks.shape[0]
    cdef Py_ssize_t i, j
    out = np.zeros((n, T))
    cdef double[:, ::1] o = out
    sf_a, sc_a, amp_a = _scales(ks, d)
    cdef double[::1] sf = sf_a, sc = sc_a, amp = amp_a
    cdef double shift = -2.0 * (d - 1)
    with nogil:
        for i in range(n):
            if w[i] <= -2.0:
                continue
            for j in range(T):
                o[i, j] = _term(u, i, w[i], bs, j, sf[j], sc[j], cd * amp[j], shift, d)
    return out


def psi_combine(const double[:, ::1] u, const double[::1] w, const long[::1] ks,
                const double[:, ::1] bs, const double[::1] coeffs, double cd):
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], T = ks.shape[0]
    cdef Py_ssize_t i, j
    out = np.zeros(n)
    cdef double[::1] o = out
    sf_a, sc_a, amp_a = _scales(ks, d)
    cdef double[::1] sf = sf_a, sc = sc_a, amp = amp_a
    cdef double shift = -2.0 * (d - 1)
    cdef double acc
    with nogil:
        for i in range(n):
            if w[i] <= -2.0:
                continue
            acc = 0.0
            for j in range(T):
                if coeffs[j] != 0.0:
                    acc += coeffs[j] * _term(u, i, w[i], bs, j, sf[j], sc[j],
                                             cd * amp[j], shift, d)
            o[i] = acc
    return out


def psi_triplets(const double[:, ::1] u, const double[::1] w, const long[::1] ks,
                 const double[:, ::1] bs, double cd):
    cdef Py_ssize_t n = u.shape[0], d = u.shape[1], T = ks.shape[0]
    cdef Py_ssize_t i, j, nnz = 0, cap = max(16, 4 * n)
    sf_a, sc_a, amp_a = _scales(ks, d)
    cdef double[::1] sf = sf_a, sc = sc_a, amp = amp_a
    cdef double shift = -2.0 * (d - 1)
    cdef double v
    rows_a = np.empty(cap, dtype=np.int64)
    cols_a = np.empty(cap, dtype=np.int64)
    vals_a = np.empty(cap)
    cdef long long[::1] rows = rows_a
    cdef long long[::1] cols = cols_a
    cdef double[::1] vals = vals_a
    for i in range(n):
        if w[i] <= -2.0:
            continue
        for j in range(T):
            v = _term(u, i, w[i], bs, j, sf[j], sc[j], cd * amp[j], shift, d)
            if v != 0.0:
                if nnz == cap:
                    cap *= 2
                    rows_a = np.resize(rows_a, cap)
                    cols_a = np.resize(cols_a, cap)
                    vals_a = np.resize(vals_a, cap)
                    rows = rows_a
                    cols = cols_a
                    vals = vals_a
                rows[nnz] = i
                cols[nnz] = j
                vals[nnz] = v
                nnz += 1
    return rows_a[:nnz].copy(), cols_a[:nnz].copy(), vals_a[:nnz].copy()
