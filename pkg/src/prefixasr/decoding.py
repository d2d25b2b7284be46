"""Greedy decoders: autoregressive LM, frame-synchronous transducer, CTC.

All three are deterministic; argmax ties resolve to the lowest id. Blank
never appears in a hypothesis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .losses import TransducerHead


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)  # per-step log-probability
    truncated: bool = False
    cap_hits: int = 0


def greedy_lm_decode(step_fn, eos_id: int, max_len: int) -> Hypothesis:
    """Append the argmax token until end-of-sentence or ``max_len``.

    ``step_fn(tokens_so_far)`` returns the next-token logits as a 1-D array;
    the model adapter below wraps a full forward pass.
    """
    if max_len < 1:
        raise ValueError("greedy_lm_decode: max_len must be >= 1")
    hyp = Hypothesis()
    while True:
        logits = np.asarray(step_fn(hyp.tokens), dtype=np.float64)
        tok = int(np.argmax(logits))
        m = logits.max()
        hyp.scores.append(float(logits[tok] - (np.log(np.exp(logits - m).sum()) + m)))
        if tok == eos_id:
            break
        hyp.tokens.append(tok)
        if len(hyp.tokens) >= max_len:
            hyp.truncated = True
            break
    return hyp


def lm_step_fn(model, frames: np.ndarray, lang_id: int):
    """Next-token logits from a fresh forward pass per step (no caching)."""

    def step(tokens: list[int]) -> np.ndarray:
        tape = Tape()
        out = model.forward(tape, frames, tokens, lang_id)
        return out.text_logits.data[-1]

    return step


class _JointView:
    """Plain-array view of a TransducerHead for tape-free decoding."""

    def __init__(self, head: TransducerHead):
        self.label_emb = head.label_emb.data
        self.enc_proj = head.enc_proj.data
        self.pred_proj = head.pred_proj.data
        self.joint_bias = head.joint_bias.data
        self.out_proj = head.out_proj.data
        self.blank = head.blank

    def logits(self, enc_row: np.ndarray, prev_label: int) -> np.ndarray:
        pred = self.label_emb[prev_label] @ self.pred_proj
        return np.tanh(enc_row @ self.enc_proj + pred + self.joint_bias) @ self.out_proj


def greedy_rnnt_decode(speech_outputs: np.ndarray, head: TransducerHead,
                       max_symbols_per_frame: int = 5) -> Hypothesis:
    """Frame-synchronous greedy search with a per-frame emission cap.

    At each frame, emit argmax labels (advancing the previous-label context)
    until blank wins or the cap is hit, then move to the next frame.
    """
    if max_symbols_per_frame < 1:
        raise ValueError("greedy_rnnt_decode: max_symbols_per_frame must be >= 1")
    joint = _JointView(head)
    hyp = Hypothesis()
    prev = head.num_labels  # start row: "no previous label"
    for t in range(speech_outputs.shape[0]):
        emitted = 0
        while True:
            logits = joint.logits(speech_outputs[t], prev)
            tok = int(np.argmax(logits))
            if tok == joint.blank:
                break
            if emitted >= max_symbols_per_frame:
                hyp.cap_hits += 1
                break
            m = logits.max()
            hyp.scores.append(float(logits[tok] - (np.log(np.exp(logits - m).sum()) + m)))
            hyp.tokens.append(tok)
            prev = tok
            emitted += 1
    return hyp


def greedy_ctc_decode(ctc_logits: np.ndarray, blank: int) -> Hypothesis:
    """Frame-wise argmax, collapse adjacent repeats, delete blanks."""
    ctc_logits = np.asarray(ctc_logits, dtype=np.float64)
    path = np.argmax(ctc_logits, axis=1)
    m = ctc_logits.max(axis=1, keepdims=True)
    logp = ctc_logits - (np.log(np.exp(ctc_logits - m).sum(axis=1, keepdims=True)) + m)
    hyp = Hypothesis()
    prev = None
    for t, lab in enumerate(path):
        lab = int(lab)
        if lab != blank and lab != prev:
            hyp.tokens.append(lab)
            hyp.scores.append(float(logp[t, lab]))
        prev = lab
    return hyp


def collapse_ctc_path(path, blank: int) -> list[int]:
    """Repeat-merge then blank-delete; idempotent on already-collapsed input."""
    out = []
    prev = None
    for lab in path:
        lab = int(lab)
        if lab != blank and lab != prev:
            out.append(lab)
        prev = lab
    return out
