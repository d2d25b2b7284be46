"""Lattice kernel backend selection plus shared posterior assembly.

The per-node recursions live in two interchangeable backends: the compiled
extension ``_lattice_fast`` (used when it built) and the pure-Python
``lattice_ref`` fallback. Set ``PREFIXASR_PURE_LATTICE=1`` to force the
fallback. Everything that vectorizes cleanly (arc posteriors, logit
gradients) is assembled here in numpy, identically for both backends.
"""
from __future__ import annotations

import os

import numpy as np

from . import lattice_ref

if os.environ.get("PREFIXASR_PURE_LATTICE") == "1":
    _impl = lattice_ref
else:
    try:
        from . import _lattice_fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = lattice_ref


def backend_name() -> str:
    return _impl.BACKEND


def _as_c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def rnnt_alpha(logp_blank, logp_label):
    return _impl.rnnt_alpha(_as_c(logp_blank), _as_c(logp_label))


def rnnt_beta(logp_blank, logp_label):
    return _impl.rnnt_beta(_as_c(logp_blank), _as_c(logp_label))


def ctc_alpha(logp, ext):
    return _impl.ctc_alpha(_as_c(logp), np.ascontiguousarray(ext, dtype=np.int64))


def ctc_beta(logp, ext):
    return _impl.ctc_beta(_as_c(logp), np.ascontiguousarray(ext, dtype=np.int64))


def rnnt_arc_posteriors(logp_blank, logp_label):
    """Occupancy of every blank and label arc, plus the total log-probability.

    Returns (total, gamma_blank [T x (U+1)], gamma_label [T x U]) where each
    gamma is the posterior probability that a path takes that arc. The final
    blank arc at (T-1, U) has occupancy 1 by construction.
    """
    total, la = rnnt_alpha(logp_blank, logp_label)
    total_b, lb = rnnt_beta(logp_blank, logp_label)
    T, U1 = logp_blank.shape
    gb = np.zeros((T, U1))
    with np.errstate(invalid="ignore"):
        if T > 1:
            gb[: T - 1, :] = np.exp(la[: T - 1, :] + logp_blank[: T - 1, :] + lb[1:, :] - total)
        gb[T - 1, U1 - 1] = np.exp(la[T - 1, U1 - 1] + logp_blank[T - 1, U1 - 1] - total)
        gl = np.exp(la[:, : U1 - 1] + logp_label + lb[:, 1:] - total)
    return total, np.nan_to_num(gb, nan=0.0), np.nan_to_num(gl, nan=0.0)


def rnnt_logit_grads(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to raw joint logits.

    ``logits`` is [T x (U+1) x (V+1)] with blank as the last class. The per
    node gradient is softmax times the node occupancy minus the taken-arc
    occupancy, which sums to zero across each logit vector.
    """
    targets = np.asarray(targets, dtype=np.int64)
    T, U1, K = logits.shape
    U = U1 - 1
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    logp = logits - lse
    logp_blank = logp[:, :, K - 1]
    logp_label = logp[:, np.arange(U), targets] if U > 0 else np.zeros((T, 0))
    total, gb, gl = rnnt_arc_posteriors(logp_blank, logp_label)
    g_logp = np.zeros_like(logits)
    g_logp[:, :, K - 1] = -gb
    if U > 0:
        g_logp[:, np.arange(U), targets] -= gl
    softmax = np.exp(logp)
    grad = g_logp - softmax * g_logp.sum(axis=-1, keepdims=True)
    return -total, grad


def ctc_extend_targets(targets, blank: int) -> np.ndarray:
    """Blank-interleaved extended sequence [blank, y0, blank, ..., blank]."""
    targets = np.asarray(targets, dtype=np.int64)
    ext = np.full(2 * targets.size + 1, blank, dtype=np.int64)
    ext[1::2] = targets
    return ext


def ctc_feasible(targets, T: int) -> bool:
    """CTC needs a frame per label plus one per adjacent repeat."""
    targets = np.asarray(targets, dtype=np.int64)
    repeats = int(np.sum(targets[1:] == targets[:-1])) if targets.size > 1 else 0
    return T >= targets.size + repeats


def ctc_logit_grads(logits: np.ndarray, targets, blank: int) -> tuple[float, np.ndarray]:
    """CTC loss and gradient w.r.t. raw per-frame logits [T x (V+1)].

    Infeasible instances return (inf, zeros): the caller decides whether to
    skip or report.
    """
    T = logits.shape[0]
    if not ctc_feasible(targets, T):
        return np.inf, np.zeros_like(logits)
    ext = ctc_extend_targets(targets, blank)
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    logp = logits - lse
    total, la = ctc_alpha(logp, ext)
    total_b, lb = ctc_beta(logp, ext)
    # Node posterior: alpha and beta both include the emission at (t, s).
    with np.errstate(invalid="ignore"):
        occ = np.exp(la + lb - logp[:, ext] - total)
    occ = np.nan_to_num(occ, nan=0.0)
    g_logp = np.zeros_like(logits)
    np.add.at(g_logp, (slice(None), ext), -occ)
    softmax = np.exp(logp)
    grad = g_logp - softmax * g_logp.sum(axis=-1, keepdims=True)
    return -total, grad
