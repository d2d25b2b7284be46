"""Training losses: text cross-entropy, transducer, CTC, and their joint mix.

The transducer and CTC losses each exist three ways:

* a fused tape operation whose backward is the closed-form alpha/beta arc
  posterior gradient (the training path, kernel-accelerated);
* an autodiff-through-the-recursion build out of elementary tape ops, kept
  as an independent gradient route;
* a brute-force path/alignment enumerator for small instances, the oracle
  the other two are checked against.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import lattice
from .autodiff import ShapeError, Tape, Tensor


# ---------------------------------------------------------------------------
# text cross-entropy


def lm_loss(tape: Tape, text_logits: Tensor, targets) -> Tensor:
    """Sum over positions of -log softmax(logits)[target].

    ``targets`` must supply one id per logits row (the transcript tokens
    followed by end-of-sentence).
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, v = text_logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"lm_loss: {n} logit rows, {targets.shape} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"lm_loss: target id out of range for vocab {v}")
    logp = tape.log_softmax(text_logits, axis=1)
    picked = tape.pick_per_row(logp, targets)
    return tape.scale(tape.reduce_sum(picked), -1.0)


# ---------------------------------------------------------------------------
# transducer joint network (stateless prediction: previous label only)


@dataclass
class TransducerHead:
    """Joint-network parameters. Blank is the last class (index V).

    ``label_emb`` has V+1 rows: one per label plus the final "no previous
    label" start row used at the first prediction position.
    """

    label_emb: Tensor   # [(V+1) x Dp]
    enc_proj: Tensor    # [D_in x Dj]
    pred_proj: Tensor   # [Dp x Dj]
    joint_bias: Tensor  # [Dj]
    out_proj: Tensor    # [Dj x (V+1)]

    @property
    def num_labels(self) -> int:
        return self.label_emb.data.shape[0] - 1

    @property
    def blank(self) -> int:
        return self.num_labels

    def params(self) -> dict[str, Tensor]:
        return {
            "label_emb": self.label_emb,
            "enc_proj": self.enc_proj,
            "pred_proj": self.pred_proj,
            "joint_bias": self.joint_bias,
            "out_proj": self.out_proj,
        }


def init_transducer_head(rng: np.random.Generator, d_in: int, v: int,
                         pred_dim: int, joint_dim: int, prefix: str = "head") -> TransducerHead:
    def w(rows, cols, tag):
        data = rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))
        return Tensor(data, requires_grad=True, name=f"{prefix}.{tag}")

    return TransducerHead(
        label_emb=w(v + 1, pred_dim, "label_emb"),
        enc_proj=w(d_in, joint_dim, "enc_proj"),
        pred_proj=w(pred_dim, joint_dim, "pred_proj"),
        joint_bias=Tensor(np.zeros(joint_dim), requires_grad=True, name=f"{prefix}.joint_bias"),
        out_proj=w(joint_dim, v + 1, "out_proj"),
    )


def transducer_joint(tape: Tape, head: TransducerHead, speech_outputs: Tensor, targets) -> Tensor:
    """Joint logits [T x (U+1) x (V+1)] over every lattice node.

    Prediction inputs are [start, y0, ..., y_{U-1}]: node (t, u) sees frame
    t and only the single previous label, so logits never depend on targets
    at positions >= u.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= head.num_labels):
        raise ValueError(f"transducer_joint: target id out of range for {head.num_labels} labels")
    prev_ids = np.concatenate(([head.num_labels], targets))
    enc = tape.matmul(speech_outputs, head.enc_proj)                      # [T x Dj]
    pred = tape.matmul(tape.embedding_gather(head.label_emb, prev_ids),
                       head.pred_proj)                                    # [(U+1) x Dj]
    z = tape.add_last(tape.outer_add(enc, pred), head.joint_bias)
    h = tape.tanh(z)
    t_dim, u_dim, j_dim = h.data.shape
    flat = tape.matmul(tape.reshape(h, (t_dim * u_dim, j_dim)), head.out_proj)
    return tape.reshape(flat, (t_dim, u_dim, head.num_labels + 1))


# ---------------------------------------------------------------------------
# transducer loss


def rnnt_loss(tape: Tape, logits: Tensor, targets) -> Tensor:
    """Negative log-probability of ``targets`` summed over all lattice paths.

    Fused operation: forward runs the alpha recursion, backward the
    alpha/beta arc-posterior gradient, both through the selected lattice
    kernel backend.
    """
    targets = np.asarray(targets, dtype=np.int64)
    t_dim, u1, _ = logits.data.shape
    if t_dim < 1:
        raise ShapeError("rnnt_loss: empty lattice (T'=0)")
    if u1 != targets.size + 1:
        raise ShapeError(f"rnnt_loss: logits have {u1} target rows for {targets.size} targets")
    loss, grad = lattice.rnnt_logit_grads(logits.data, targets)
    return tape.record_op("rnnt_loss", [logits], np.asarray(loss),
                          lambda g: (float(g) * grad,))


def rnnt_loss_via_tape(tape: Tape, logits: Tensor, targets) -> Tensor:
    """Same loss built from elementary ops so autodiff walks the recursion.

    Kept deliberately independent of the fused kernel: agreement of the two
    gradients is a standing verification target. Only sensible at small
    sizes.
    """
    targets = np.asarray(targets, dtype=np.int64)
    t_dim, u1, k = logits.data.shape
    u_len = u1 - 1
    logp = tape.log_softmax(logits, axis=-1)
    flat = tape.reshape(logp, (t_dim * u1, k))
    blank_grid = tape.reshape(tape.pick_per_row(flat, np.full(t_dim * u1, k - 1)), (t_dim, u1))
    cols = np.concatenate((targets, [0]))  # dummy at u=U, sliced away below
    label_grid = tape.reshape(tape.pick_per_row(flat, np.tile(cols, t_dim)), (t_dim, u1))

    def cell(grid, t, u):
        return tape.reshape(tape.slice(grid, (np.s_[t:t + 1], np.s_[u:u + 1])), (1,))

    def lse2(a, b):
        return tape.logsumexp(tape.concat([a, b], axis=0), axis=0)

    alpha: list[list[Tensor]] = [[None] * u1 for _ in range(t_dim)]
    alpha[0][0] = Tensor(np.zeros(1))
    for t in range(t_dim):
        for u in range(u1):
            if t == 0 and u == 0:
                continue
            terms = []
            if t > 0:
                terms.append(tape.add(alpha[t - 1][u], cell(blank_grid, t - 1, u)))
            if u > 0:
                terms.append(tape.add(alpha[t][u - 1], cell(label_grid, t, u - 1)))
            if len(terms) == 2:
                alpha[t][u] = tape.reshape(lse2(terms[0], terms[1]), (1,))
            else:
                alpha[t][u] = terms[0]
    final = tape.add(alpha[t_dim - 1][u_len], cell(blank_grid, t_dim - 1, u_len))
    return tape.scale(tape.reshape(final, ()), -1.0)


def rnnt_loss_bruteforce(logits: np.ndarray, targets) -> float:
    """Exact enumeration of every monotone lattice path; the oracle.

    A path interleaves T-1 frame advances with U label emissions and ends
    with the blank at (T-1, U); there are C(T-1+U, U) of them.
    """
    targets = np.asarray(targets, dtype=np.int64)
    t_dim, u1, k = np.asarray(logits).shape
    u_len = u1 - 1
    if t_dim > 6 or u_len > 4:
        raise ValueError(f"rnnt_loss_bruteforce: bounds exceeded (T'={t_dim}, U={u_len})")
    m = logits.max(axis=-1, keepdims=True)
    logp = logits - (np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m)
    moves = t_dim - 1 + u_len
    path_logps = []
    for label_pos in itertools.combinations(range(moves), u_len):
        label_pos = set(label_pos)
        t = u = 0
        acc = 0.0
        for i in range(moves):
            if i in label_pos:
                acc += logp[t, u, targets[u]]
                u += 1
            else:
                acc += logp[t, u, k - 1]
                t += 1
        acc += logp[t_dim - 1, u_len, k - 1]
        path_logps.append(acc)
    return -_logsumexp_list(path_logps)


def _logsumexp_list(vals) -> float:
    m = max(vals)
    if m == -math.inf:
        return -math.inf
    return m + math.log(sum(math.exp(v - m) for v in vals))


# ---------------------------------------------------------------------------
# CTC loss


def ctc_loss(tape: Tape, ctc_logits: Tensor, targets, blank: int) -> Tensor:
    """CTC negative log-probability over [T x (V+1)] per-frame logits.

    Instances where T is too short to carry the extended target return an
    infinite constant loss rather than raising; callers skip and count them.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if ctc_logits.data.ndim != 2:
        raise ShapeError(f"ctc_loss: logits shape {ctc_logits.data.shape}")
    if not lattice.ctc_feasible(targets, ctc_logits.data.shape[0]):
        return Tensor(np.asarray(np.inf))
    loss, grad = lattice.ctc_logit_grads(ctc_logits.data, targets, blank)
    return tape.record_op("ctc_loss", [ctc_logits], np.asarray(loss),
                          lambda g: (float(g) * grad,))


def ctc_loss_via_tape(tape: Tape, ctc_logits: Tensor, targets, blank: int) -> Tensor:
    """Autodiff-through-the-recursion CTC twin for gradient cross-checks."""
    targets = np.asarray(targets, dtype=np.int64)
    t_dim = ctc_logits.data.shape[0]
    if not lattice.ctc_feasible(targets, t_dim):
        return Tensor(np.asarray(np.inf))
    ext = lattice.ctc_extend_targets(targets, blank)
    s_dim = ext.size
    logp = tape.log_softmax(ctc_logits, axis=-1)
    neg_inf = Tensor(np.full(1, -np.inf))

    def emit(t, s):
        return tape.reshape(tape.slice(logp, (np.s_[t:t + 1], np.s_[ext[s]:ext[s] + 1])), (1,))

    def lse(parts):
        if len(parts) == 1:
            return parts[0]
        return tape.reshape(tape.logsumexp(tape.concat(parts, axis=0), axis=0), (1,))

    def dead(t: Tensor) -> bool:
        return bool(np.isneginf(t.data).all())

    prev = [neg_inf] * s_dim
    prev[0] = emit(0, 0)
    if s_dim > 1:
        prev[1] = emit(0, 1)
    for t in range(1, t_dim):
        row = [neg_inf] * s_dim
        for s in range(s_dim):
            parts = [prev[s]]
            if s >= 1:
                parts.append(prev[s - 1])
            if s >= 2 and ext[s] != ext[s - 2]:
                parts.append(prev[s - 2])
            live = [p for p in parts if not dead(p)]
            if live:
                row[s] = tape.add(lse(live), emit(t, s))
        prev = row
    tails = [prev[s_dim - 1]] + ([prev[s_dim - 2]] if s_dim > 1 else [])
    return tape.scale(tape.reshape(lse([p for p in tails if not dead(p)]), ()), -1.0)


def ctc_loss_bruteforce(ctc_logits: np.ndarray, targets, blank: int) -> float:
    """Enumerate all (V+1)^T frame labelings whose collapse is the target."""
    targets = list(np.asarray(targets, dtype=np.int64))
    t_dim, k = np.asarray(ctc_logits).shape
    if t_dim > 5:
        raise ValueError(f"ctc_loss_bruteforce: bounds exceeded (T'={t_dim})")
    m = ctc_logits.max(axis=-1, keepdims=True)
    logp = ctc_logits - (np.log(np.exp(ctc_logits - m).sum(axis=-1, keepdims=True)) + m)
    acc = []
    for path in itertools.product(range(k), repeat=t_dim):
        collapsed = [lab for i, lab in enumerate(path)
                     if lab != blank and (i == 0 or lab != path[i - 1])]
        if collapsed == targets:
            acc.append(sum(logp[t, lab] for t, lab in enumerate(path)))
    if not acc:
        return math.inf
    return -_logsumexp_list(acc)


# ---------------------------------------------------------------------------
# joint objective


@dataclass
class JointLossConfig:
    """Mixing weight on the text loss; 1 - alpha goes to the ASR loss."""

    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def joint_loss(tape: Tape, lm: Tensor, asr: Tensor, cfg: JointLossConfig) -> Tensor:
    """alpha * lm + (1 - alpha) * asr, exactly; boundaries pass through."""
    if cfg.alpha == 1.0:
        return lm
    if cfg.alpha == 0.0:
        return asr
    return tape.add(tape.scale(lm, cfg.alpha), tape.scale(asr, 1.0 - cfg.alpha))
