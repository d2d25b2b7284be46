import math

import numpy as np
import pytest

from prefixasr.autodiff import Tape, Tensor, backward, finite_difference_check
from prefixasr.losses import (JointLossConfig, ctc_loss,
                              ctc_loss_via_tape, init_transducer_head, joint_loss,
                              lm_loss, rnnt_loss, rnnt_loss_via_tape, transducer_joint)


def _head(seed=0, d_in=6, v=4, pred=3, joint=5):
    return init_transducer_head(np.random.default_rng(seed), d_in, v, pred, joint)


# ---------------------------------------------------------------------------
# lm loss


def test_lm_loss_uniform_logits():
    tape = Tape()
    logits = Tensor(np.zeros((3, 10)))
    loss = lm_loss(tape, logits, [0, 5, 9])
    assert float(loss.data) == pytest.approx(3 * math.log(10), abs=1e-12)


def test_lm_loss_goes_to_zero_with_margin():
    prev = None
    for margin in (2.0, 8.0, 32.0):
        logits = np.zeros((2, 6))
        logits[0, 3] = margin
        logits[1, 5] = margin
        tape = Tape()
        val = float(lm_loss(tape, Tensor(logits), [3, 5]).data)
        if prev is not None:
            assert val < prev
        prev = val
    assert prev < 1e-10


def test_lm_loss_matches_independent_recomputation():
    rng = np.random.default_rng(3)
    logits = rng.normal(0, 2, size=(5, 8))
    targets = rng.integers(0, 8, size=5)
    tape = Tape()
    val = float(lm_loss(tape, Tensor(logits), targets).data)
    # independent normalized-softmax route
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -sum(math.log(probs[i, t]) for i, t in enumerate(targets))
    assert val == pytest.approx(expected, rel=1e-12)


def test_lm_loss_rejects_out_of_range_target():
    tape = Tape()
    with pytest.raises(ValueError, match="out of range"):
        lm_loss(tape, Tensor(np.zeros((2, 4))), [0, 4])


# ---------------------------------------------------------------------------
# joint network


def test_joint_zero_out_proj_gives_uniform():
    head = _head()
    head.out_proj.data[:] = 0.0
    tape = Tape()
    x = Tensor(np.random.default_rng(0).normal(size=(3, 6)))
    logits = transducer_joint(tape, head, x, [1, 2]).data
    assert logits.shape == (3, 3, 5)
    np.testing.assert_array_equal(logits, np.zeros_like(logits))


def test_joint_is_stateless_in_future_targets():
    head = _head(seed=1)
    x = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
    tape = Tape()
    a = transducer_joint(tape, head, x, [0, 1, 2]).data
    tape = Tape()
    b = transducer_joint(tape, head, x, [0, 1, 3]).data
    # rows u=0..2 depend only on targets before them
    np.testing.assert_array_equal(a[:, :3, :], b[:, :3, :])


def test_joint_shape_contract():
    head = _head()
    for t_dim, targets in [(1, []), (2, [0, 1, 2]), (5, [3])]:
        tape = Tape()
        x = Tensor(np.zeros((t_dim, 6)))
        out = transducer_joint(tape, head, x, targets)
        assert out.data.shape == (t_dim, len(targets) + 1, 5)


# ---------------------------------------------------------------------------
# rnnt loss through the tape


def test_rnnt_fused_and_via_tape_losses_agree():
    rng = np.random.default_rng(5)
    head = _head(seed=5)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True, name="x")
    targets = [0, 3]
    tape = Tape()
    fused = rnnt_loss(tape, transducer_joint(tape, head, x, targets), targets)
    tape2 = Tape()
    alt = rnnt_loss_via_tape(tape2, transducer_joint(tape2, head, x, targets), targets)
    assert float(fused.data) == pytest.approx(float(alt.data), abs=1e-10)


def test_rnnt_fused_and_via_tape_gradients_agree():
    rng = np.random.default_rng(6)
    head = _head(seed=6)
    params = {"x": Tensor(rng.normal(size=(3, 6)), requires_grad=True, name="x")}
    params.update({t.name: t for t in head.params().values()})
    targets = [2, 0, 1]

    tape = Tape()
    fused = rnnt_loss(tape, transducer_joint(tape, head, params["x"], targets), targets)
    ga = backward(tape, fused, params=params)
    tape = Tape()
    alt = rnnt_loss_via_tape(tape, transducer_joint(tape, head, params["x"], targets), targets)
    gb = backward(tape, alt, params=params)
    for name in params:
        np.testing.assert_allclose(ga[name].data, gb[name].data, atol=1e-8)


def test_rnnt_gradient_certified_by_finite_differences():
    rng = np.random.default_rng(7)
    head = _head(seed=7)
    x = Tensor(rng.normal(size=(2, 6)), requires_grad=True, name="x")
    params = {"x": x, **{t.name: t for t in head.params().values()}}
    targets = [1, 3]

    def loss_fn():
        tape = Tape()
        return tape, rnnt_loss(tape, transducer_joint(tape, head, x, targets), targets)

    assert finite_difference_check(loss_fn, params) <= 1e-5


def test_rnnt_loss_rejects_bad_shapes():
    tape = Tape()
    with pytest.raises(ValueError, match="target rows"):
        rnnt_loss(tape, Tensor(np.zeros((2, 2, 5))), [0, 1])


# ---------------------------------------------------------------------------
# ctc


def test_ctc_loss_fixed_value_and_infeasible():
    tape = Tape()
    val = ctc_loss(tape, Tensor(np.zeros((2, 5))), [1], blank=4)
    assert float(val.data) == pytest.approx(math.log(25 / 3), abs=1e-12)
    inf = ctc_loss(tape, Tensor(np.zeros((1, 5))), [1, 1], blank=4)
    assert math.isinf(float(inf.data))
    assert not inf.requires_grad


def test_ctc_via_tape_matches_fused_loss_and_grad():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True, name="x")
    targets = [1, 1, 2]
    tape = Tape()
    fused = ctc_loss(tape, x, targets, blank=4)
    ga = backward(tape, fused, params={"x": x})
    tape = Tape()
    alt = ctc_loss_via_tape(tape, x, targets, blank=4)
    gb = backward(tape, alt, params={"x": x})
    assert float(fused.data) == pytest.approx(float(alt.data), abs=1e-10)
    np.testing.assert_allclose(ga["x"].data, gb["x"].data, atol=1e-9)


def test_ctc_gradient_certified_by_finite_differences():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True, name="x")

    def loss_fn():
        tape = Tape()
        return tape, ctc_loss(tape, x, [0, 2], blank=5)

    assert finite_difference_check(loss_fn, {"x": x}) <= 1e-5


# ---------------------------------------------------------------------------
# joint combination


def test_joint_loss_affine_combination():
    tape = Tape()
    lm = Tensor(np.asarray(2.0), requires_grad=True, name="lm")
    asr = Tensor(np.asarray(4.0), requires_grad=True, name="asr")
    out = joint_loss(tape, lm, asr, JointLossConfig(0.25))
    assert float(out.data) == pytest.approx(3.5, abs=0)


def test_joint_loss_boundaries_are_bit_equal():
    tape = Tape()
    lm = Tensor(np.asarray(1.2345678901234567))
    asr = Tensor(np.asarray(7.654321098765432))
    assert joint_loss(tape, lm, asr, JointLossConfig(1.0)) is lm
    assert joint_loss(tape, lm, asr, JointLossConfig(0.0)) is asr


def test_joint_loss_config_validates_alpha():
    with pytest.raises(ValueError, match="alpha"):
        JointLossConfig(1.5)
    with pytest.raises(ValueError, match="alpha"):
        JointLossConfig(-0.1)
