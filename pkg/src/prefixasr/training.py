"""Gradient routing across parameter groups, the optimizer, and train loop.

Each step runs one shared forward per utterance and two backward passes,
one per loss, because the routing regimes assign the two losses to
different parameter groups:

* frozen_llm: the text loss updates only the soft prompts; the ASR loss
  updates encoder, prompts, and the transducer head; the LLM never moves.
* finetuned_llm: the text loss updates prompts, LLM, and encoder; the ASR
  loss updates encoder, LLM, and head, never the prompts.

Routed updates are alpha-mixed per Eq.-style affine weighting, globally
norm-clipped, and applied by Adam. A parameter whose effective mask is
empty is never touched, so frozen tensors stay byte-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, backward
from .corpus import Utterance
from .losses import JointLossConfig, ctc_loss, lm_loss, rnnt_loss, transducer_joint
from .model import AsrModel

GROUPS = ("encoder", "prompt", "llm", "transducer_head")


class TrainingError(RuntimeError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, utt_ids: list[str]):
        super().__init__(f"non-finite loss on utterances: {utt_ids}")
        self.utt_ids = utt_ids


@dataclass
class ParameterRegistry:
    """Named tensors, each tagged with exactly one group, in fixed order."""

    entries: dict[str, tuple[Tensor, str]]

    @classmethod
    def from_model(cls, model: AsrModel) -> "ParameterRegistry":
        entries = {}
        for name, tensor in model.parameters().items():
            entries[name] = (tensor, model.group_of(name))
        return cls(entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def tensors(self) -> dict[str, Tensor]:
        return {name: t for name, (t, _) in self.entries.items()}

    def group(self, name: str) -> str:
        return self.entries[name][1]

    def snapshot(self) -> dict[str, bytes]:
        return {name: t.data.tobytes() for name, (t, _) in self.entries.items()}


@dataclass(frozen=True)
class Regime:
    name: str
    lm_groups: frozenset
    asr_groups: frozenset


REGIMES = {
    "frozen_llm": Regime("frozen_llm",
                         lm_groups=frozenset({"prompt"}),
                         asr_groups=frozenset({"encoder", "prompt", "transducer_head"})),
    "finetuned_llm": Regime("finetuned_llm",
                            lm_groups=frozenset({"prompt", "llm", "encoder"}),
                            asr_groups=frozenset({"encoder", "llm", "transducer_head"})),
}


def route_gradients(regime: Regime, lm_grads: dict[str, np.ndarray],
                    asr_grads: dict[str, np.ndarray], registry: ParameterRegistry,
                    cfg: JointLossConfig) -> dict[str, np.ndarray]:
    """Per-parameter update: alpha-weighted sum of the masked loss gradients.

    Parameters whose groups fall outside both active masks are omitted
    entirely; a boundary alpha drops the other loss's mask rather than
    multiplying it by zero, so pure-loss steps are reproduced bit for bit.
    """
    for grads in (lm_grads, asr_grads):
        unknown = sorted(set(grads) - set(registry.entries))
        if unknown:
            raise ValueError(f"route_gradients: unknown parameter names {unknown}")
    alpha = cfg.alpha
    updates: dict[str, np.ndarray] = {}
    for name, (tensor, group) in registry.entries.items():
        use_lm = alpha > 0.0 and group in regime.lm_groups
        use_asr = alpha < 1.0 and group in regime.asr_groups
        if not (use_lm or use_asr):
            continue
        lm_part = lm_grads.get(name)
        asr_part = asr_grads.get(name)
        if use_lm and use_asr:
            if lm_part is None and asr_part is None:
                updates[name] = np.zeros_like(tensor.data)
            else:
                a = alpha * lm_part if lm_part is not None else 0.0
                b = (1.0 - alpha) * asr_part if asr_part is not None else 0.0
                updates[name] = a + b
        elif use_lm:
            updates[name] = alpha * lm_part if lm_part is not None \
                else np.zeros_like(tensor.data)
        else:
            updates[name] = (1.0 - alpha) * asr_part if asr_part is not None \
                else np.zeros_like(tensor.data)
    return updates


class Adam:
    """Standard Adam with global-norm clipping of the routed updates.

    Only parameters present in the update map are touched; per-parameter
    step counters keep bias correction right when masks differ across runs.
    """

    def __init__(self, registry: ParameterRegistry, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float = 1.0):
        self.registry = registry
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, updates: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        sq = 0.0
        for name in self.registry.names():
            if name in updates:
                g = updates[name]
                sq += float((g * g).sum())
        norm = math.sqrt(sq)
        scale = self.clip_norm / norm if norm > self.clip_norm else 1.0
        for name in self.registry.names():
            if name not in updates:
                continue
            g = updates[name] * scale if scale != 1.0 else updates[name]
            tensor = self.registry.entries[name][0]
            m = self._m.setdefault(name, np.zeros_like(tensor.data))
            v = self._v.setdefault(name, np.zeros_like(tensor.data))
            t = self._t.get(name, 0) + 1
            self._t[name] = t
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            tensor.data = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


@dataclass
class StepMetrics:
    lm_loss: float               # per-utterance sum, averaged over the batch
    lm_loss_per_token: float
    asr_loss: float
    joint_loss: float
    grad_norms: dict[str, float]
    skipped_infeasible: int = 0


def _accumulate(acc: dict[str, np.ndarray], grads: dict[str, Tensor]) -> None:
    for name, g in grads.items():
        if name in acc:
            acc[name] = acc[name] + g.data
        else:
            acc[name] = g.data.copy()


def compute_losses(model: AsrModel, utt: Utterance, asr_kind: str,
                   tape: Tape) -> tuple[Tensor, Tensor | None]:
    """Shared forward pass producing the text loss and the chosen ASR loss."""
    cfg = model.cfg
    out = model.forward(tape, utt.frames, utt.tokens, utt.lang_id)
    lm = lm_loss(tape, out.text_logits, list(utt.tokens) + [cfg.eos_id])
    asr: Tensor | None = None
    if asr_kind == "rnnt":
        logits = transducer_joint(tape, model.rnnt_head, out.speech_outputs, utt.tokens)
        asr = rnnt_loss(tape, logits, utt.tokens)
    elif asr_kind == "ctc":
        asr = ctc_loss(tape, model.ctc_logits(tape, out.speech_outputs),
                       utt.tokens, cfg.blank_id)
    elif asr_kind != "none":
        raise ValueError(f"unknown asr loss kind {asr_kind!r}")
    return lm, asr


def train_step(batch: list[Utterance], model: AsrModel, regime: Regime,
               optimizer: Adam, cfg: JointLossConfig, asr_kind: str = "rnnt") -> StepMetrics:
    """One optimization step: per-utterance forwards, two backwards, routing.

    Utterances whose ASR loss is infeasible (CTC on too few frames)
    contribute only their text loss and are counted. A non-finite loss
    aborts the step before any update, naming the utterances.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    registry = optimizer.registry
    acc_lm: dict[str, np.ndarray] = {}
    acc_asr: dict[str, np.ndarray] = {}
    lm_total = 0.0
    asr_total = 0.0
    asr_count = 0
    target_count = 0
    skipped = 0
    bad: list[str] = []
    for utt in batch:
        tape = Tape()
        lm, asr = compute_losses(model, utt, asr_kind, tape)
        lm_val = float(lm.data)
        asr_val = float(asr.data) if asr is not None else math.nan
        if not math.isfinite(lm_val) or (asr is not None and (math.isnan(asr_val)
                                                              or asr_val == -math.inf)):
            bad.append(utt.id)
            continue
        if asr is not None and asr_val == math.inf:
            skipped += 1  # infeasible CTC instance: text loss still contributes
            asr = None
        lm_total += lm_val
        target_count += len(utt.tokens) + 1
        _accumulate(acc_lm, backward(tape, lm))
        if asr is not None:
            asr_total += asr_val
            asr_count += 1
            _accumulate(acc_asr, backward(tape, asr))
    if bad:
        raise NonFiniteLossError(bad)
    inv = 1.0 / len(batch)
    acc_lm = {k: v * inv for k, v in acc_lm.items()}
    inv_asr = 1.0 / asr_count if asr_count else 0.0
    acc_asr = {k: v * inv_asr for k, v in acc_asr.items()}
    updates = route_gradients(regime, acc_lm, acc_asr, registry, cfg)
    norms = {g: 0.0 for g in GROUPS}
    for name, upd in updates.items():
        norms[registry.group(name)] += float((upd * upd).sum())
    norms = {g: math.sqrt(v) for g, v in norms.items()}
    optimizer.step(updates)
    lm_mean = lm_total / len(batch)
    asr_mean = asr_total / asr_count if asr_count else math.nan
    joint = cfg.alpha * lm_mean + (1.0 - cfg.alpha) * asr_mean if asr_count \
        else lm_mean if cfg.alpha == 1.0 else math.nan
    return StepMetrics(lm_loss=lm_mean,
                       lm_loss_per_token=lm_total / target_count,
                       asr_loss=asr_mean, joint_loss=joint,
                       grad_norms=norms, skipped_infeasible=skipped)


# ---------------------------------------------------------------------------
# experiment configuration (plain text, key = value per line)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # model dims
    D: int = 32
    layers: int = 2
    heads: int = 4
    V: int = 30                  # data vocabulary; the model adds end-of-sentence
    F: int = 8
    encoder_layers: int = 2
    M: int = 2
    L: int = 3
    pred_dim: int = 16
    joint_dim: int = 32
    mlp_mult: int = 4
    max_text_len: int = 16
    max_prefix_len: int = 64
    subsample_factor: int = 4
    speech_output_mode: str = "hidden"
    asr_heads: str = "rnnt,ctc"   # which ASR heads the model carries; "none" for LM-only
    # objective and routing
    alpha: float = 0.5
    regime: str = "frozen_llm"
    asr_loss: str = "rnnt"
    # optimization
    lr: float = 1e-3
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    eval_every: int = 0
    checkpoint_dir: str = "checkpoints"
    eval_decoder: str = "rnnt"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.eval_decoder not in ("lm", "rnnt", "ctc"):
            raise ConfigError(f"unknown eval_decoder {self.eval_decoder!r}")
        if self.asr_loss not in ("rnnt", "ctc", "none"):
            raise ConfigError(f"unknown asr_loss {self.asr_loss!r}")
        kinds = set(self.head_set())
        if not kinds <= {"rnnt", "ctc"}:
            raise ConfigError(f"unknown asr_heads {self.asr_heads!r}")
        if self.asr_loss != "none" and self.asr_loss not in kinds:
            raise ConfigError(f"asr_loss={self.asr_loss} requires that head")
        if self.asr_loss == "none" and self.alpha != 1.0:
            raise ConfigError("asr_loss=none requires alpha=1.0")

    def head_set(self) -> set[str]:
        if self.asr_heads.strip() == "none":
            return set()
        return {p.strip() for p in self.asr_heads.split(",") if p.strip()}

    def model_config(self):
        from .model import PrefixLMConfig
        kinds = self.head_set()
        return PrefixLMConfig(
            D=self.D, layers=self.layers, heads=self.heads, V=self.V + 1, F=self.F,
            subsample_factor=self.subsample_factor, M=self.M, L=self.L,
            encoder_layers=self.encoder_layers, pred_dim=self.pred_dim,
            joint_dim=self.joint_dim, mlp_mult=self.mlp_mult,
            max_text_len=self.max_text_len, max_prefix_len=self.max_prefix_len,
            speech_output_mode=self.speech_output_mode,
            with_rnnt_head="rnnt" in kinds, with_ctc_head="ctc" in kinds)


_INT_KEYS = {"D", "layers", "heads", "V", "F", "encoder_layers", "M", "L", "pred_dim",
             "joint_dim", "mlp_mult", "max_text_len", "max_prefix_len",
             "subsample_factor", "steps", "batch_size", "seed", "eval_every"}
_FLOAT_KEYS = {"alpha", "lr"}
_STR_KEYS = {"regime", "asr_loss", "checkpoint_dir", "eval_decoder",
             "speech_output_mode", "asr_heads"}


def parse_train_config(text: str) -> TrainConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in _INT_KEYS:
            values[key] = int(val)
        elif key in _FLOAT_KEYS:
            values[key] = float(val)
        elif key in _STR_KEYS:
            values[key] = val
        else:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
