"""Verification suites shared by the CLI and the acceptance tests.

Each suite runs a batch of randomized checks, reports counts and worst
errors, and returns pass/fail. These are the same certifications the test
suite pins down; the CLI exposes them so one entry point serves CI and
hand runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, finite_difference_check
from .lattice import rnnt_logit_grads, ctc_logit_grads
from .losses import (JointLossConfig, ctc_loss_bruteforce, joint_loss, lm_loss,
                     rnnt_loss, rnnt_loss_bruteforce, rnnt_loss_via_tape,
                     transducer_joint)
from .model import AsrModel, PrefixLMConfig
from .training import Adam, ParameterRegistry, REGIMES, train_step


@dataclass
class SuiteResult:
    passed: bool
    lines: list[str] = field(default_factory=list)


def tiny_model(seed: int = 0, **overrides) -> AsrModel:
    """The certification model: D=8, 2 layers, V=12 text classes.

    Subsampling by 2 keeps T'=4 for the 8-frame certification input, enough
    lattice room for CTC on 3-token targets.
    """
    kw = dict(D=8, layers=2, heads=2, V=12, F=3, subsample_factor=2, M=2, L=3,
              encoder_layers=1, pred_dim=4, joint_dim=8, mlp_mult=2,
              max_text_len=8, max_prefix_len=8)
    kw.update(overrides)
    return AsrModel(PrefixLMConfig(**kw), seed=seed)


def suite_rnnt_oracle(seed: int = 0, trials: int = 100) -> SuiteResult:
    """DP loss versus exact path enumeration on small random instances."""
    rng = np.random.default_rng(seed)
    start = time.time()
    worst = 0.0
    for _ in range(trials):
        t_dim = int(rng.integers(1, 5))
        u_len = int(rng.integers(0, 4))
        v = int(rng.integers(1, 5))
        logits = rng.normal(0.0, 2.0, size=(t_dim, u_len + 1, v + 1))
        targets = rng.integers(0, v, size=u_len)
        dp = rnnt_logit_grads(logits, targets)[0]
        brute = rnnt_loss_bruteforce(logits, targets)
        worst = max(worst, abs(dp - brute))
    fixed1 = abs(rnnt_logit_grads(np.zeros((1, 2, 5)), [2])[0] - 2 * math.log(5))
    fixed2 = abs(rnnt_logit_grads(np.zeros((2, 2, 5)), [2])[0] - math.log(62.5))
    elapsed = time.time() - start
    ok = worst <= 1e-8 and fixed1 <= 1e-12 and fixed2 <= 1e-12 and elapsed < 10.0
    return SuiteResult(ok, [
        f"rnnt-oracle: {trials} instances, max |dp - bruteforce| = {worst:.3e}",
        f"rnnt-oracle: fixed cases |err| = {fixed1:.3e}, {fixed2:.3e}",
        f"rnnt-oracle: {elapsed:.2f}s",
    ])


def suite_ctc_oracle(seed: int = 0, trials: int = 100) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    both_inf = 0
    for _ in range(trials):
        t_dim = int(rng.integers(1, 6))
        u_len = int(rng.integers(0, 4))
        v = int(rng.integers(1, 5))
        logits = rng.normal(0.0, 2.0, size=(t_dim, v + 1))
        targets = rng.integers(0, v, size=u_len)
        dp = ctc_logit_grads(logits, targets, v)[0]
        brute = ctc_loss_bruteforce(logits, targets, v)
        if math.isinf(dp) and math.isinf(brute):
            both_inf += 1
            continue
        worst = max(worst, abs(dp - brute))
    fixed = abs(ctc_logit_grads(np.zeros((2, 5)), [1], 4)[0] - math.log(25.0 / 3.0))
    ok = worst <= 1e-8 and fixed <= 1e-12
    return SuiteResult(ok, [
        f"ctc-oracle: {trials} instances ({both_inf} infeasible on both paths), "
        f"max |dp - bruteforce| = {worst:.3e}",
        f"ctc-oracle: fixed case |err| = {fixed:.3e}",
    ])


def _certification_setup(seed: int):
    model = tiny_model(seed=seed)
    rng = np.random.default_rng(seed + 1)
    frames = rng.normal(0.0, 1.0, size=(8, 3))
    tokens = [int(t) for t in rng.integers(0, model.cfg.V - 1, size=3)]
    return model, frames, tokens


def suite_grad(seed: int = 0) -> SuiteResult:
    """Finite-difference certification of every loss on the tiny model."""
    model, frames, tokens = _certification_setup(seed)
    cfg = model.cfg
    params = model.parameters()

    def fwd(tape):
        return model.forward(tape, frames, tokens, lang_id=1)

    def loss_lm():
        tape = Tape()
        out = fwd(tape)
        return tape, lm_loss(tape, out.text_logits, tokens + [cfg.eos_id])

    def loss_rnnt():
        tape = Tape()
        out = fwd(tape)
        logits = transducer_joint(tape, model.rnnt_head, out.speech_outputs, tokens)
        return tape, rnnt_loss(tape, logits, tokens)

    def loss_rnnt_tape():
        tape = Tape()
        out = fwd(tape)
        logits = transducer_joint(tape, model.rnnt_head, out.speech_outputs, tokens)
        return tape, rnnt_loss_via_tape(tape, logits, tokens)

    def loss_ctc():
        tape = Tape()
        out = fwd(tape)
        from .losses import ctc_loss
        return tape, ctc_loss(tape, model.ctc_logits(tape, out.speech_outputs),
                              tokens, cfg.blank_id)

    def loss_joint():
        tape = Tape()
        out = fwd(tape)
        lm = lm_loss(tape, out.text_logits, tokens + [cfg.eos_id])
        logits = transducer_joint(tape, model.rnnt_head, out.speech_outputs, tokens)
        asr = rnnt_loss(tape, logits, tokens)
        return tape, joint_loss(tape, lm, asr, JointLossConfig(0.5))

    lines = []
    worst_all = 0.0
    for name, fn in [("lm", loss_lm), ("rnnt_analytic", loss_rnnt),
                     ("rnnt_via_tape", loss_rnnt_tape), ("ctc", loss_ctc),
                     ("joint@0.5", loss_joint)]:
        err = finite_difference_check(fn, params, step=1e-4, order=4)
        worst_all = max(worst_all, err)
        lines.append(f"grad: {name} finite-difference max rel err = {err:.3e}")

    from .autodiff import backward
    tape_a, la = loss_rnnt()
    ga = backward(tape_a, la, params=params)
    tape_b, lb = loss_rnnt_tape()
    gb = backward(tape_b, lb, params=params)
    worst_pair = max(float(np.max(np.abs(ga[n].data - gb[n].data))) for n in params)
    lines.append(f"grad: analytic-vs-autodiff rnnt gradient max |delta| = {worst_pair:.3e}")
    ok = worst_all <= 1e-5 and worst_pair <= 1e-8
    return SuiteResult(ok, lines)


def suite_mask(seed: int = 0, trials: int = 50) -> SuiteResult:
    """Causality and prefix-reach perturbation sweep on the tiny model."""
    model, frames, _ = _certification_setup(seed)
    cfg = model.cfg
    rng = np.random.default_rng(seed + 2)
    violations = 0
    worst = 0.0
    reach = False
    for _ in range(trials):
        u_len = int(rng.integers(2, 5))
        tokens = [int(t) for t in rng.integers(0, cfg.V - 1, size=u_len)]
        tape = Tape()
        base = model.forward(tape, frames, tokens, 0).text_logits.data
        j = int(rng.integers(1, u_len + 1))  # input position to perturb
        mutated = list(tokens)
        pos = j - 1  # token index feeding input position j
        mutated[pos] = (mutated[pos] + 1 + int(rng.integers(0, cfg.V - 2))) % (cfg.V - 1)
        tape = Tape()
        pert = model.forward(tape, frames, mutated, 0).text_logits.data
        delta = np.abs(pert[:j] - base[:j]).max() if j > 0 else 0.0
        worst = max(worst, float(delta))
        if delta > 1e-12:
            violations += 1
        frames_pert = frames.copy()
        frames_pert[int(rng.integers(0, frames.shape[0]))] += rng.normal(0, 0.5, frames.shape[1])
        tape = Tape()
        pref = model.forward(tape, frames_pert, tokens, 0).text_logits.data
        if np.abs(pref[-1] - base[-1]).max() > 1e-9:
            reach = True
    ok = violations == 0 and reach
    return SuiteResult(ok, [
        f"mask: {trials} trials, causality violations = {violations}, "
        f"max leak = {worst:.3e}",
        f"mask: prefix perturbation reached final text logit = {reach}",
    ])


def suite_routing(seed: int = 0, steps: int = 10) -> SuiteResult:
    """Frozen/finetuned mask behavior over real optimization steps."""
    from .corpus import CorpusSpec, generate_synthetic_corpus
    spec = CorpusSpec(languages=3, vocab=9, train_per_language=[4, 4, 4],
                      test_per_language=[1, 1, 1], feature_dim=3,
                      utt_len_range=(2, 3), frames_per_token_range=(4, 4),
                      noise_std=0.3, codemix_prob=0.0, seed=seed)
    train, _ = generate_synthetic_corpus(spec)
    lines = []
    ok = True

    def one_run(regime_name, alpha, asr_heads="rnnt", asr_loss="rnnt"):
        model = tiny_model(seed=seed, V=10, F=3, L=3,
                           with_rnnt_head=asr_heads == "rnnt", with_ctc_head=False)
        registry = ParameterRegistry.from_model(model)
        opt = Adam(registry, lr=1e-3)
        before = registry.snapshot()
        for i in range(steps):
            start = (2 * i) % (len(train) - 1)
            train_step(train[start:start + 2], model, REGIMES[regime_name], opt,
                       JointLossConfig(alpha), asr_loss)
        after = registry.snapshot()
        changed = {g: 0 for g in ("encoder", "prompt", "llm", "transducer_head")}
        total = dict(changed)
        for name in registry.names():
            g = registry.group(name)
            total[g] += 1
            if before[name] != after[name]:
                changed[g] += 1
        return changed, total

    changed, total = one_run("frozen_llm", alpha=0.5)
    frozen_ok = (changed["llm"] == 0 and changed["prompt"] > 0
                 and changed["encoder"] > 0 and changed["transducer_head"] > 0)
    ok &= frozen_ok
    lines.append(f"routing: frozen_llm@0.5 changed per group "
                 f"{ {g: f'{changed[g]}/{total[g]}' for g in changed} } -> "
                 f"{'ok' if frozen_ok else 'VIOLATION'}")

    changed, total = one_run("finetuned_llm", alpha=0.0)
    ft_ok = changed["prompt"] == 0 and changed["llm"] > 0 and changed["encoder"] > 0
    ok &= ft_ok
    lines.append(f"routing: finetuned_llm@0.0 changed per group "
                 f"{ {g: f'{changed[g]}/{total[g]}' for g in changed} } -> "
                 f"{'ok' if ft_ok else 'VIOLATION'}")

    changed, total = one_run("frozen_llm", alpha=1.0)
    prompt_only_ok = (changed["prompt"] > 0 and changed["llm"] == 0
                      and changed["encoder"] == 0 and changed["transducer_head"] == 0)
    ok &= prompt_only_ok
    lines.append(f"routing: frozen_llm@1.0 changed per group "
                 f"{ {g: f'{changed[g]}/{total[g]}' for g in changed} } -> "
                 f"{'ok' if prompt_only_ok else 'VIOLATION'}")
    return SuiteResult(bool(ok), lines)
