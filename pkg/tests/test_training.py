import math

import numpy as np
import pytest

from prefixasr.autodiff import Tensor
from prefixasr.corpus import CorpusSpec, Utterance, generate_synthetic_corpus
from prefixasr.losses import JointLossConfig
from prefixasr.model import AsrModel, PrefixLMConfig
from prefixasr.training import (Adam, NonFiniteLossError, ParameterRegistry,
                                REGIMES, parse_train_config,
                                route_gradients, train_step, ConfigError)


def _model(**overrides):
    kw = dict(D=8, layers=2, heads=2, V=10, F=3, subsample_factor=4, M=2, L=3,
              encoder_layers=1, pred_dim=4, joint_dim=8, mlp_mult=2,
              max_text_len=8, max_prefix_len=8)
    kw.update(overrides)
    return AsrModel(PrefixLMConfig(**kw), seed=0)


def _toy_corpus(seed=0, n=4):
    spec = CorpusSpec(languages=3, vocab=9, train_per_language=[n, n, n],
                      test_per_language=[1, 1, 1], feature_dim=3,
                      utt_len_range=(2, 3), frames_per_token_range=(4, 4),
                      noise_std=0.2, codemix_prob=0.0, seed=seed)
    return generate_synthetic_corpus(spec)[0]


# ---------------------------------------------------------------------------
# routing


def _fake_grads(registry, value):
    return {name: np.full_like(t.data, value) for name, (t, _) in registry.entries.items()}


def test_frozen_regime_drops_all_llm_updates():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    updates = route_gradients(REGIMES["frozen_llm"], _fake_grads(registry, 1.0),
                              _fake_grads(registry, 2.0), registry, JointLossConfig(0.5))
    assert not any(registry.group(n) == "llm" for n in updates)
    assert any(registry.group(n) == "prompt" for n in updates)


def test_finetuned_prompt_updates_are_pure_lm():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    lm = _fake_grads(registry, 1.0)
    asr = _fake_grads(registry, 100.0)
    updates = route_gradients(REGIMES["finetuned_llm"], lm, asr,
                              registry, JointLossConfig(0.25))
    for name in updates:
        if registry.group(name) == "prompt":
            np.testing.assert_array_equal(updates[name],
                                          0.25 * np.ones_like(updates[name]))


def test_routing_rejects_unknown_parameter():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    with pytest.raises(ValueError, match="unknown parameter"):
        route_gradients(REGIMES["frozen_llm"], {"nope": np.zeros(1)}, {},
                        registry, JointLossConfig(0.5))


def test_alpha_one_frozen_updates_only_prompt():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    corpus = _toy_corpus()
    before = registry.snapshot()
    train_step(corpus[:2], model, REGIMES["frozen_llm"], opt,
               JointLossConfig(1.0), "rnnt")
    after = registry.snapshot()
    changed = {n for n in registry.names() if before[n] != after[n]}
    assert changed == {"prompt.bank"}


def test_unselected_prompt_slices_bit_identical_after_step():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    corpus = [u for u in _toy_corpus() if u.lang_id == 0]
    before = model.bank.table.data.copy()
    train_step(corpus[:2], model, REGIMES["frozen_llm"], opt,
               JointLossConfig(0.5), "rnnt")
    after = model.bank.table.data
    assert not np.array_equal(before[0], after[0])
    assert before[1].tobytes() == after[1].tobytes()
    assert before[2].tobytes() == after[2].tobytes()


def test_alpha_zero_frozen_prompt_moves_via_asr_path():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    corpus = _toy_corpus()
    before = registry.snapshot()
    train_step(corpus[:2], model, REGIMES["frozen_llm"], opt,
               JointLossConfig(0.0), "rnnt")
    after = registry.snapshot()
    assert before["prompt.bank"] != after["prompt.bank"]
    llm_names = [n for n in registry.names() if registry.group(n) == "llm"]
    assert all(before[n] == after[n] for n in llm_names)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_update_map_is_noop():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-2)
    before = registry.snapshot()
    opt.step({})
    assert registry.snapshot() == before


def test_adam_first_step_approaches_lr_times_sign():
    w = Tensor(np.asarray([5.0]), requires_grad=True, name="w")
    registry = ParameterRegistry({"w": (w, "llm")})
    opt = Adam(registry, lr=1e-3, clip_norm=1e9)
    opt.step({"w": np.asarray([0.37])})
    assert w.data[0] == pytest.approx(5.0 - 1e-3, rel=1e-6)


def test_adam_global_norm_clipping():
    w = Tensor(np.zeros(4), requires_grad=True, name="w")
    v = Tensor(np.zeros(3), requires_grad=True, name="v")
    registry = ParameterRegistry({"w": (w, "llm"), "v": (v, "llm")})
    opt = Adam(registry, lr=1e-3, clip_norm=1.0)
    g = {"w": np.full(4, 3.0), "v": np.full(3, 4.0)}
    norm = opt.step(g)
    assert norm == pytest.approx(math.sqrt(4 * 9 + 3 * 16))
    # clipped values: the optimizer saw gradients scaled by 1/norm
    assert opt._m["w"][0] == pytest.approx(0.1 * 3.0 / norm)


# ---------------------------------------------------------------------------
# train_step


def test_train_step_overfits_single_utterance():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    utt = _toy_corpus()[0]
    first = None
    smoothed = []
    window = []
    for step in range(200):
        mets = train_step([utt], model, REGIMES["finetuned_llm"], opt,
                          JointLossConfig(0.5), "rnnt")
        if first is None:
            first = mets.joint_loss
        window.append(mets.joint_loss)
        if len(window) == 20:
            smoothed.append(sum(window) / len(window))
            window = []
    assert smoothed[-1] < 0.2 * first
    assert all(b < a for a, b in zip(smoothed, smoothed[1:]))


def test_train_step_deterministic_trajectories():
    outs = []
    for _ in range(2):
        model = _model()
        registry = ParameterRegistry.from_model(model)
        opt = Adam(registry, lr=1e-3)
        corpus = _toy_corpus()
        for _ in range(5):
            train_step(corpus[:3], model, REGIMES["finetuned_llm"], opt,
                       JointLossConfig(0.5), "rnnt")
        outs.append(registry.snapshot())
    assert outs[0] == outs[1]


def test_train_step_reports_non_finite_with_ids():
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    utt = _toy_corpus()[0]
    model.llm.unembed_w.data[0, 0] = np.nan  # poisoned weight surfaces in the loss
    with pytest.raises(NonFiniteLossError, match=utt.id):
        train_step([utt], model, REGIMES["finetuned_llm"], opt,
                   JointLossConfig(0.5), "rnnt")


def test_train_step_alpha_boundaries_bit_equal_pure_steps():
    corpus = _toy_corpus()

    def one_step(alpha, asr_kind):
        model = _model()
        registry = ParameterRegistry.from_model(model)
        opt = Adam(registry, lr=1e-3)
        train_step(corpus[:3], model, REGIMES["finetuned_llm"], opt,
                   JointLossConfig(alpha), asr_kind)
        return registry.snapshot()

    # alpha=1 with the rnnt loss still computed == a pure-LM-only step
    assert one_step(1.0, "rnnt") == one_step(1.0, "none")
    # alpha=0 == a step routed purely through the asr mask
    a = one_step(0.0, "rnnt")
    model = _model()
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    train_step(corpus[:3], model, REGIMES["finetuned_llm"], opt,
               JointLossConfig(0.0), "rnnt")
    assert a == registry.snapshot()


def test_ctc_training_skips_infeasible_and_counts():
    model = _model(subsample_factor=4)
    registry = ParameterRegistry.from_model(model)
    opt = Adam(registry, lr=1e-3)
    rng = np.random.default_rng(0)
    # 4 tokens over 8 frames -> T'=2 < U: infeasible for CTC
    utt = Utterance(id="u0", lang_id=0, lang="l0",
                    frames=rng.normal(size=(8, 3)), tokens=[1, 2, 3, 4])
    mets = train_step([utt], model, REGIMES["finetuned_llm"], opt,
                      JointLossConfig(0.5), "ctc")
    assert mets.skipped_infeasible == 1
    assert math.isnan(mets.asr_loss)


# ---------------------------------------------------------------------------
# config parsing


def test_parse_train_config_round_trip():
    text = """
    # toy setup
    D = 16
    layers = 1
    heads = 2
    V = 12
    F = 4
    alpha = 0.25
    regime = frozen_llm
    lr = 0.002
    steps = 7
    seed = 3
    eval_decoder = lm
    """
    cfg = parse_train_config(text)
    assert cfg.D == 16 and cfg.alpha == 0.25 and cfg.regime == "frozen_llm"
    assert cfg.model_config().V == 13  # data vocab plus end-of-sentence


def test_parse_train_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_train_config("bogus = 1")


def test_parse_train_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="regime"):
        parse_train_config("regime = sideways")
    with pytest.raises(ConfigError, match="asr_loss"):
        parse_train_config("asr_loss = ctc\nasr_heads = rnnt")
    with pytest.raises(ConfigError, match="alpha"):
        parse_train_config("asr_heads = none\nasr_loss = none\nalpha = 0.5")
