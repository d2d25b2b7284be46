"""Pure-Python reference kernels for the transducer and CTC lattices.

These are the authoritative implementations: per-node log-space recursions
written exactly as the math reads. The compiled twin in ``_lattice_fast``
mirrors the operation order node for node; ``prefixasr.lattice`` picks
between them at import time.

Conventions: ``logp_blank[t, u]`` is the log-probability of consuming frame
``t`` at target position ``u`` (a down move), ``logp_label[t, u]`` of
emitting target ``u`` at frame ``t`` (a right move). A path ends with the
blank at the last node (T-1, U).
"""
from __future__ import annotations

import math

import numpy as np

NEG_INF = -math.inf

BACKEND = "reference"


def _lse2(a: float, b: float) -> float:
    if a == NEG_INF and b == NEG_INF:
        return NEG_INF
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _lse3(a: float, b: float, c: float) -> float:
    m = max(a, b, c)
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(math.exp(a - m) + math.exp(b - m) + math.exp(c - m))


def rnnt_alpha(logp_blank: np.ndarray, logp_label: np.ndarray):
    """Forward recursion. Returns (total log-probability, log_alpha grid)."""
    T, U1 = logp_blank.shape
    U = U1 - 1
    la = np.full((T, U1), NEG_INF)
    la[0, 0] = 0.0
    for t in range(T):
        for u in range(U1):
            if t == 0 and u == 0:
                continue
            down = la[t - 1, u] + logp_blank[t - 1, u] if t > 0 else NEG_INF
            right = la[t, u - 1] + logp_label[t, u - 1] if u > 0 else NEG_INF
            la[t, u] = _lse2(down, right)
    total = la[T - 1, U] + logp_blank[T - 1, U]
    return total, la


def rnnt_beta(logp_blank: np.ndarray, logp_label: np.ndarray):
    """Backward recursion. Returns (total log-probability, log_beta grid)."""
    T, U1 = logp_blank.shape
    U = U1 - 1
    lb = np.full((T, U1), NEG_INF)
    lb[T - 1, U] = logp_blank[T - 1, U]
    for t in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if t == T - 1 and u == U:
                continue
            down = logp_blank[t, u] + lb[t + 1, u] if t < T - 1 else NEG_INF
            right = logp_label[t, u] + lb[t, u + 1] if u < U else NEG_INF
            lb[t, u] = _lse2(down, right)
    return lb[0, 0], lb


def ctc_alpha(logp: np.ndarray, ext: np.ndarray):
    """CTC forward over the blank-interleaved extended target sequence.

    ``logp`` is [T x (V+1)] per-frame log-probabilities, ``ext`` the
    extended target of length 2U+1 with blanks at even positions. Returns
    (total log-probability, log_alpha grid [T x (2U+1)]).
    """
    T = logp.shape[0]
    S = ext.shape[0]
    la = np.full((T, S), NEG_INF)
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
    return total, la


def ctc_beta(logp: np.ndarray, ext: np.ndarray):
    """CTC backward recursion, emissions included at each node.

    Returns (total log-probability, log_beta grid [T x (2U+1)]).
    """
    T = logp.shape[0]
    S = ext.shape[0]
    lb = np.full((T, S), NEG_INF)
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
    return total, lb
