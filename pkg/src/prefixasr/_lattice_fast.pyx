# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the lattice recursions in ``lattice_ref``.

Node-for-node the same operation order as the reference module, so the two
backends agree to floating-point noise. Selected at import by
``prefixasr.lattice`` when the extension built.
"""

from libc.math cimport exp, log, INFINITY

import numpy as np

BACKEND = "compiled"

cdef double NEG_INF = -INFINITY


cdef inline double _lse2(double a, double b) noexcept:
    cdef double m
    if a == NEG_INF and b == NEG_INF:
        return NEG_INF
    m = a if a > b else b
    return m + log(exp(a - m) + exp(b - m))


cdef inline double _lse3(double a, double b, double c) noexcept:
    cdef double m = a
    if b > m:
        m = b
    if c > m:
        m = c
    if m == NEG_INF:
        return NEG_INF
    return m + log(exp(a - m) + exp(b - m) + exp(c - m))


def rnnt_alpha(double[:, ::1] logp_blank, double[:, ::1] logp_label):
    cdef Py_ssize_t T = logp_blank.shape[0]
    cdef Py_ssize_t U1 = logp_blank.shape[1]
    cdef Py_ssize_t U = U1 - 1
    la_arr = np.full((T, U1), NEG_INF)
    cdef double[:, ::1] la = la_arr
    cdef Py_ssize_t t, u
    cdef double down, right
    la[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            down = la[t - 1, u] + logp_blank[t - 1, u] if t > 0 else NEG_INF
            right = la[t, u - 1] + logp_label[t, u - 1] if u > 0 else NEG_INF
            la[t, u] = _lse2(down, right)
    cdef double total = la[T - 1, U] + logp_blank[T - 1, U]
    return total, la_arr


def rnnt_beta(double[:, ::1] logp_blank, double[:, ::1] logp_label):
    cdef Py_ssize_t T = logp_blank.shape[0]
    cdef Py_ssize_t U1 = logp_blank.shape[1]
    cdef Py_ssize_t U = U1 - 1
    lb_arr = np.full((T, U1), NEG_INF)
    cdef double[:, ::1] lb = lb_arr
    cdef Py_ssize_t t, u
    cdef double down, right
    lb[T - 1, U] = logp_blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            down = logp_blank[t, u] + lb[t + 1, u] if t < T - 1 else NEG_INF
            right = logp_label[t, u] + lb[t, u + 1] if u < U else NEG_INF
            lb[t, u] = _lse2(down, right)
    return lb[0, 0], lb_arr


def ctc_alpha(double[:, ::1] logp, long long[::1] ext):
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    la_arr = np.full((T, S), NEG_INF)
    cdef double[:, ::1] la = la_arr
    cdef Py_ssize_t t, s
    cdef double stay, prev, skip, acc, total
    la[0, 0] = logp[0, ext[0]]
    if S > 1:
        la[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            stay = la[t - 1, s]
            prev = la[t - 1, s - 1] if s >= 1 else NEG_INF
            skip = NEG_INF
            if s >= 2 and ext[s] != ext[s - 2]:
                skip = la[t - 1, s - 2]
            acc = _lse3(stay, prev, skip)
            la[t, s] = acc + logp[t, ext[s]] if acc != NEG_INF else NEG_INF
    if S > 1:
        total = _lse2(la[T - 1, S - 1], la[T - 1, S - 2])
    else:
        total = la[T - 1, S - 1]
    return total, la_arr


def ctc_beta(double[:, ::1] logp, long long[::1] ext):
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    lb_arr = np.full((T, S), NEG_INF)
    cdef double[:, ::1] lb = lb_arr
    cdef Py_ssize_t t, s
    cdef double stay, nxt, skip, acc, total
    lb[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        lb[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S - 1, -1, -1):
            stay = lb[t + 1, s]
            nxt = lb[t + 1, s + 1] if s + 1 < S else NEG_INF
            skip = NEG_INF
            if s + 2 < S and ext[s] != ext[s + 2]:
                skip = lb[t + 1, s + 2]
            acc = _lse3(stay, nxt, skip)
            lb[t, s] = acc + logp[t, ext[s]] if acc != NEG_INF else NEG_INF
    if S > 1:
        total = _lse2(lb[0, 0], lb[0, 1])
    else:
        total = lb[0, 0]
    return total, lb_arr
