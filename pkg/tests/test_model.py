import numpy as np
import pytest

from prefixasr.autodiff import Tape, backward
from prefixasr.losses import lm_loss
from prefixasr.model import (AsrModel, CheckpointError, PrefixLMConfig,
                             build_attention_mask, load_checkpoint, subsample)


def _cfg(**overrides):
    kw = dict(D=8, layers=2, heads=2, V=12, F=3, subsample_factor=4, M=2, L=3,
              encoder_layers=1, pred_dim=4, joint_dim=8, mlp_mult=2,
              max_text_len=8, max_prefix_len=8)
    kw.update(overrides)
    return PrefixLMConfig(**kw)


# ---------------------------------------------------------------------------
# subsample


def test_subsample_shapes():
    out = subsample(np.ones((8, 2)), 4)
    assert out.shape == (2, 8)


def test_subsample_pads_tail_with_zeros():
    frames = np.arange(14, dtype=float).reshape(7, 2)
    out = subsample(frames, 4)
    assert out.shape == (2, 8)
    np.testing.assert_array_equal(out[1, -2:], [0.0, 0.0])
    np.testing.assert_array_equal(out[1, :6], frames[4:].reshape(-1))


def test_subsample_factor_one_is_identity():
    frames = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(subsample(frames, 1), frames)


def test_subsample_rejects_bad_factor():
    with pytest.raises(ValueError, match="factor"):
        subsample(np.ones((4, 2)), 0)


# ---------------------------------------------------------------------------
# attention mask


def test_mask_definition_instantiated():
    allow = build_attention_mask(2, 2)
    expected = np.array([
        [1, 1, 0, 0],
        [1, 1, 0, 0],
        [1, 1, 1, 0],
        [1, 1, 1, 1],
    ], dtype=bool)
    np.testing.assert_array_equal(allow, expected)


def test_mask_prefix_rows_never_see_text():
    allow = build_attention_mask(5, 4)
    assert not allow[:5, 5:].any()


def test_mask_text_is_causal():
    allow = build_attention_mask(3, 6)
    text = allow[3:, 3:]
    assert not np.triu(text, k=1).any()


# ---------------------------------------------------------------------------
# encoder


def test_encoder_zeroed_blocks_reduce_to_input_projection():
    cfg = _cfg()
    model = AsrModel(cfg, seed=0)
    for blk in model.encoder.blocks:
        blk.p["attn.wo"].data[:] = 0.0
        blk.p["attn.bo"].data[:] = 0.0
        blk.p["mlp.w2"].data[:] = 0.0
        blk.p["mlp.b2"].data[:] = 0.0
    stacked = subsample(np.random.default_rng(1).normal(size=(8, 3)), 4)
    tape = Tape()
    out = model.encoder.encode(tape, stacked).data
    expected = stacked @ model.encoder.in_w.data + model.encoder.in_b.data
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_encoder_deterministic_and_shape():
    cfg = _cfg()
    model = AsrModel(cfg, seed=3)
    frames = np.random.default_rng(2).normal(size=(7, 3))
    tape = Tape()
    a = model.encoder.encode(tape, subsample(frames, 4)).data
    tape = Tape()
    b = model.encoder.encode(tape, subsample(frames, 4)).data
    assert a.shape == (2, cfg.D)
    np.testing.assert_array_equal(a, b)


def test_encoder_rejects_non_finite():
    model = AsrModel(_cfg(), seed=0)
    bad = np.full((4, 12), np.nan)
    with pytest.raises(ValueError, match="non-finite"):
        model.encoder.encode(Tape(), bad)


# ---------------------------------------------------------------------------
# prompt bank


def test_select_prompt_returns_language_slice():
    model = AsrModel(_cfg(L=3, M=2), seed=4)
    tape = Tape()
    out = model.bank.select(tape, 1).data
    np.testing.assert_array_equal(out, model.bank.table.data[1])


def test_select_prompt_rejects_out_of_range():
    model = AsrModel(_cfg(L=3), seed=4)
    with pytest.raises(ValueError, match="lang_id"):
        model.bank.select(Tape(), 3)


def test_single_language_bank_is_shared():
    model = AsrModel(_cfg(L=1), seed=4)
    tape = Tape()
    out = model.bank.select(tape, 2).data  # any tag maps to the shared slice
    np.testing.assert_array_equal(out, model.bank.table.data[0])


def test_prompt_gradient_isolated_to_selected_slice():
    model = AsrModel(_cfg(), seed=5)
    frames = np.random.default_rng(3).normal(size=(8, 3))
    tape = Tape()
    out = model.forward(tape, frames, [1, 2], lang_id=0)
    loss = lm_loss(tape, out.text_logits, [1, 2, model.cfg.eos_id])
    g = backward(tape, loss)["prompt.bank"].data
    assert np.abs(g[0]).max() > 0
    np.testing.assert_array_equal(g[1], np.zeros_like(g[1]))
    np.testing.assert_array_equal(g[2], np.zeros_like(g[2]))


# ---------------------------------------------------------------------------
# forward contracts


def test_zeroed_unembedding_gives_uniform_distribution():
    model = AsrModel(_cfg(), seed=6)
    model.llm.unembed_w.data[:] = 0.0
    model.llm.unembed_b.data[:] = 0.0
    tape = Tape()
    out = model.forward(tape, np.zeros((4, 3)), [0, 1], 0)
    np.testing.assert_array_equal(out.text_logits.data, np.zeros((3, 12)))


def test_text_causality_under_perturbation():
    model = AsrModel(_cfg(), seed=7)
    frames = np.random.default_rng(4).normal(size=(8, 3))
    tokens = [1, 4, 7, 9]
    tape = Tape()
    base = model.forward(tape, frames, tokens, 0).text_logits.data
    for j in range(1, len(tokens) + 1):
        mutated = list(tokens)
        mutated[j - 1] = (mutated[j - 1] + 3) % (model.cfg.V - 1)
        tape = Tape()
        pert = model.forward(tape, frames, mutated, 0).text_logits.data
        assert np.abs(pert[:j] - base[:j]).max() <= 1e-12
        assert np.abs(pert[j] - base[j]).max() > 0  # position j sees itself


def test_prefix_frame_perturbation_can_move_any_text_row():
    model = AsrModel(_cfg(), seed=8)
    frames = np.random.default_rng(5).normal(size=(8, 3))
    tape = Tape()
    base = model.forward(tape, frames, [2, 3], 0).text_logits.data
    pert_frames = frames.copy()
    pert_frames[6] += 0.5
    tape = Tape()
    pert = model.forward(tape, pert_frames, [2, 3], 0).text_logits.data
    assert (np.abs(pert - base) > 1e-9).any(axis=1).all()


def test_prefix_bidirectionality():
    # Later frames influence earlier speech outputs.
    model = AsrModel(_cfg(), seed=9)
    frames = np.random.default_rng(6).normal(size=(8, 3))
    tape = Tape()
    base = model.forward(tape, frames, [1], 0).speech_outputs.data
    pert_frames = frames.copy()
    pert_frames[7] += 1.0  # falls in the second stacked frame (t=1)
    tape = Tape()
    pert = model.forward(tape, pert_frames, [1], 0).speech_outputs.data
    assert np.abs(pert[0] - base[0]).max() > 1e-9


def test_speech_output_rows_match_subsampling():
    model = AsrModel(_cfg(max_prefix_len=16), seed=10)
    for t in (1, 4, 9, 13):
        tape = Tape()
        out = model.forward(tape, np.zeros((t, 3)), [0], 0)
        assert out.speech_outputs.data.shape[0] == -(-t // 4)


def test_forward_rejects_overlong_text():
    model = AsrModel(_cfg(max_text_len=4), seed=11)
    with pytest.raises(ValueError, match="text length"):
        model.forward(Tape(), np.zeros((4, 3)), [0, 1, 2, 3], 0)


def test_speech_output_logits_mode_switch():
    model = AsrModel(_cfg(speech_output_mode="logits"), seed=12)
    tape = Tape()
    out = model.forward(tape, np.zeros((4, 3)), [0], 0)
    assert out.speech_outputs.data.shape == (1, 12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = AsrModel(_cfg(), seed=13)
    path = tmp_path / "m.ckpt"
    model.save(path)
    again = AsrModel.load(path)
    assert again.cfg == model.cfg
    for name, tensor in model.parameters().items():
        np.testing.assert_array_equal(again.parameters()[name].data, tensor.data)


def test_checkpoint_shape_verification(tmp_path):
    model = AsrModel(_cfg(), seed=14)
    path = tmp_path / "m.ckpt"
    model.save(path)
    cfg, arrays = load_checkpoint(path)
    raw = path.read_bytes()
    # truncating the file breaks loading with a clear error
    (tmp_path / "short.ckpt").write_bytes(raw[: len(raw) - 9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")


def test_checkpoint_rejects_non_checkpoint(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(p)


def test_forward_determinism_across_fresh_models():
    a = AsrModel(_cfg(), seed=15)
    b = AsrModel(_cfg(), seed=15)
    frames = np.random.default_rng(7).normal(size=(6, 3))
    ta, tb = Tape(), Tape()
    oa = a.forward(ta, frames, [1, 2], 1).text_logits.data
    ob = b.forward(tb, frames, [1, 2], 1).text_logits.data
    np.testing.assert_array_equal(oa, ob)
