"""Speech encoder, soft-prompt bank, and the decoder-only prefix LM.

The prefix LM consumes [prompt rows | encoded speech | BOS + text] under a
mask that is bidirectional over the prefix block and causal over text. Its
final-layer states at the speech positions are the speech-prefix outputs
fed to the transducer head; the unembedded states at text positions are the
next-token logits.

Text ids: the corpus vocabulary occupies [0, V-1), end-of-sentence is V-1,
and the embedding table carries one extra input-only row V for BOS.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Tape, Tensor
from .losses import TransducerHead, init_transducer_head

CHECKPOINT_MAGIC = b"PFXA"
CHECKPOINT_VERSION = 1

_MASK_OFF = -1e30  # additive score for disallowed attention edges; keeps math finite


class CheckpointError(ValueError):
    pass


@dataclass
class PrefixLMConfig:
    D: int
    layers: int
    heads: int
    V: int                       # text classes incl. end-of-sentence (= data vocab + 1)
    F: int
    subsample_factor: int = 4
    M: int = 2
    L: int = 3
    encoder_layers: int = 2
    pred_dim: int = 16
    joint_dim: int = 32
    mlp_mult: int = 4
    max_text_len: int = 16
    max_prefix_len: int = 64
    speech_output_mode: str = "hidden"   # "hidden" or "logits"
    with_rnnt_head: bool = True
    with_ctc_head: bool = True

    def __post_init__(self):
        if self.D % self.heads != 0:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.subsample_factor < 1:
            raise ValueError("subsample_factor must be >= 1")
        if self.V < 2:
            raise ValueError("V must include at least one token and end-of-sentence")
        if self.speech_output_mode not in ("hidden", "logits"):
            raise ValueError(f"unknown speech_output_mode {self.speech_output_mode!r}")

    @property
    def eos_id(self) -> int:
        return self.V - 1

    @property
    def bos_row(self) -> int:
        return self.V

    @property
    def blank_id(self) -> int:
        return self.V


@dataclass
class ModelOutputs:
    speech_outputs: Tensor   # [T' x D] (or [T' x V] in logits mode)
    text_logits: Tensor      # [(U+1) x V]


def subsample(frames: np.ndarray, factor: int) -> np.ndarray:
    """Stack consecutive groups of ``factor`` frames, zero-padding the tail."""
    if factor < 1:
        raise ValueError(f"subsample: factor must be >= 1, got {factor}")
    frames = np.asarray(frames, dtype=np.float64)
    t, f = frames.shape
    t_out = -(-t // factor)
    pad = t_out * factor - t
    if pad:
        frames = np.concatenate([frames, np.zeros((pad, f))], axis=0)
    return frames.reshape(t_out, factor * f)


def build_attention_mask(prefix_len: int, text_len: int) -> np.ndarray:
    """Boolean [S x S] allow-matrix: bidirectional prefix block, causal text.

    Prefix rows see only the prefix block; text row i sees the whole prefix
    plus text positions up to and including itself.
    """
    if prefix_len < 1 or text_len < 1:
        raise ValueError("build_attention_mask: lengths must be >= 1")
    s = prefix_len + text_len
    allow = np.zeros((s, s), dtype=bool)
    allow[:prefix_len, :prefix_len] = True
    for i in range(text_len):
        allow[prefix_len + i, : prefix_len + i + 1] = True
    return allow


def _additive_mask(allow: np.ndarray) -> Tensor:
    return Tensor(np.where(allow, 0.0, _MASK_OFF))


class SoftPromptBank:
    """Learnable [L x M x D] prompt table selected per utterance language."""

    def __init__(self, cfg: PrefixLMConfig, rng: np.random.Generator):
        self.L, self.M, self.D = cfg.L, cfg.M, cfg.D
        self.table = Tensor(rng.normal(0.0, 0.5, size=(cfg.L, cfg.M, cfg.D)),
                            requires_grad=True, name="prompt.bank")

    def select(self, tape: Tape, lang_id: int) -> Tensor:
        """The [M x D] slice for one language; gradient reaches only that slice.

        A single-language bank is a shared prompt: every utterance selects
        slice 0 regardless of its tag.
        """
        if self.L == 1:
            lang_id = 0
        if not 0 <= lang_id < self.L:
            raise ValueError(f"select_prompt: lang_id {lang_id} outside [0, {self.L})")
        sl = tape.slice(self.table, (np.s_[lang_id:lang_id + 1], np.s_[:], np.s_[:]))
        return tape.reshape(sl, (self.M, self.D))


class _Block:
    """Pre-norm transformer block: attention then GELU MLP, both residual."""

    def __init__(self, cfg: PrefixLMConfig, rng: np.random.Generator, prefix: str):
        d, mult = cfg.D, cfg.mlp_mult
        self.heads = cfg.heads
        self.head_dim = d // cfg.heads
        self.p: dict[str, Tensor] = {}

        def mat(rows, cols, tag):
            self.p[tag] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols)),
                                 requires_grad=True, name=f"{prefix}.{tag}")

        def vec(n, tag, value=0.0):
            self.p[tag] = Tensor(np.full(n, value), requires_grad=True, name=f"{prefix}.{tag}")

        vec(d, "ln1.g", 1.0), vec(d, "ln1.b")
        # q/k/v carry no biases: a key bias shifts every score in a row by
        # the same amount and cancels in softmax (zero gradient forever)
        mat(d, d, "attn.wq")
        mat(d, d, "attn.wk")
        mat(d, d, "attn.wv")
        mat(d, d, "attn.wo"), vec(d, "attn.bo")
        vec(d, "ln2.g", 1.0), vec(d, "ln2.b")
        mat(d, mult * d, "mlp.w1"), vec(mult * d, "mlp.b1")
        mat(mult * d, d, "mlp.w2"), vec(d, "mlp.b2")

    def _ln(self, tape: Tape, x: Tensor, tag: str) -> Tensor:
        y = tape.layer_norm(x, axis=-1)
        return tape.add_last(tape.mul_last(y, self.p[f"{tag}.g"]), self.p[f"{tag}.b"])

    def forward(self, tape: Tape, x: Tensor, mask: Tensor | None) -> Tensor:
        p = self.p
        h = self._ln(tape, x, "ln1")
        q = tape.matmul(h, p["attn.wq"])
        k = tape.matmul(h, p["attn.wk"])
        v = tape.matmul(h, p["attn.wv"])
        outs = []
        inv_sqrt = 1.0 / math.sqrt(self.head_dim)
        for i in range(self.heads):
            cols = np.s_[i * self.head_dim:(i + 1) * self.head_dim]
            qi = tape.slice(q, (np.s_[:], cols))
            ki = tape.slice(k, (np.s_[:], cols))
            vi = tape.slice(v, (np.s_[:], cols))
            scores = tape.scale(tape.matmul(qi, tape.transpose(ki)), inv_sqrt)
            if mask is not None:
                scores = tape.add(scores, mask)
            outs.append(tape.matmul(tape.softmax(scores, axis=1), vi))
        att = tape.add_last(tape.matmul(tape.concat(outs, axis=1), p["attn.wo"]), p["attn.bo"])
        x = tape.add(x, att)
        h2 = self._ln(tape, x, "ln2")
        m = tape.gelu(tape.add_last(tape.matmul(h2, p["mlp.w1"]), p["mlp.b1"]))
        m = tape.add_last(tape.matmul(m, p["mlp.w2"]), p["mlp.b2"])
        return tape.add(x, m)

    def params(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.p.values()}


class SpeechEncoder:
    """Linear projection of stacked frames, then bidirectional blocks."""

    def __init__(self, cfg: PrefixLMConfig, rng: np.random.Generator):
        fin = cfg.subsample_factor * cfg.F
        self.in_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fin), size=(fin, cfg.D)),
                           requires_grad=True, name="encoder.in_proj.w")
        self.in_b = Tensor(np.zeros(cfg.D), requires_grad=True, name="encoder.in_proj.b")
        self.blocks = [_Block(cfg, rng, f"encoder.blk{i}") for i in range(cfg.encoder_layers)]

    def encode(self, tape: Tape, stacked: np.ndarray) -> Tensor:
        if not np.isfinite(stacked).all():
            raise ValueError("encode: non-finite values in input frames")
        x = tape.add_last(tape.matmul(Tensor(stacked), self.in_w), self.in_b)
        for blk in self.blocks:
            x = blk.forward(tape, x, mask=None)
        return x

    def params(self) -> dict[str, Tensor]:
        out = {self.in_w.name: self.in_w, self.in_b.name: self.in_b}
        for blk in self.blocks:
            out.update(blk.params())
        return out


class PrefixLM:
    """Decoder-only stack over [prompt | speech prefix | BOS + text]."""

    def __init__(self, cfg: PrefixLMConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.D
        self.tok_emb = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.V + 1, d)),
                              requires_grad=True, name="llm.tok_emb")
        self.text_pos = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.max_text_len, d)),
                               requires_grad=True, name="llm.text_pos")
        self.prefix_pos = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.max_prefix_len, d)),
                                 requires_grad=True, name="llm.prefix_pos")
        self.blocks = [_Block(cfg, rng, f"llm.blk{i}") for i in range(cfg.layers)]
        self.ln_g = Tensor(np.ones(d), requires_grad=True, name="llm.ln_f.g")
        self.ln_b = Tensor(np.zeros(d), requires_grad=True, name="llm.ln_f.b")
        self.unembed_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, cfg.V)),
                                requires_grad=True, name="llm.unembed.w")
        self.unembed_b = Tensor(np.zeros(cfg.V), requires_grad=True, name="llm.unembed.b")

    def forward(self, tape: Tape, prompt: Tensor, prefix: Tensor, tokens) -> ModelOutputs:
        cfg = self.cfg
        tokens = list(tokens)
        u_in = len(tokens) + 1
        t_len = prefix.data.shape[0]
        if u_in > cfg.max_text_len:
            raise ValueError(f"forward: text length {u_in} exceeds maximum {cfg.max_text_len}")
        if t_len > cfg.max_prefix_len:
            raise ValueError(f"forward: prefix length {t_len} exceeds maximum {cfg.max_prefix_len}")
        ids = [cfg.bos_row] + tokens
        tok = tape.embedding_gather(self.tok_emb, ids)
        tok = tape.add(tok, tape.embedding_gather(self.text_pos, np.arange(u_in)))
        prefix = tape.add(prefix, tape.embedding_gather(self.prefix_pos, np.arange(t_len)))
        x = tape.concat([prompt, prefix, tok], axis=0)
        p_len = prompt.data.shape[0] + t_len
        mask = _additive_mask(build_attention_mask(p_len, u_in))
        for blk in self.blocks:
            x = blk.forward(tape, x, mask)
        x = tape.add_last(tape.mul_last(tape.layer_norm(x, axis=-1), self.ln_g), self.ln_b)
        speech = tape.rows(x, prompt.data.shape[0], p_len)
        text_h = tape.rows(x, p_len, p_len + u_in)
        text_logits = tape.add_last(tape.matmul(text_h, self.unembed_w), self.unembed_b)
        if cfg.speech_output_mode == "logits":
            speech = tape.add_last(tape.matmul(speech, self.unembed_w), self.unembed_b)
        return ModelOutputs(speech_outputs=speech, text_logits=text_logits)

    def params(self) -> dict[str, Tensor]:
        out = {t.name: t for t in
               [self.tok_emb, self.text_pos, self.prefix_pos, self.ln_g, self.ln_b,
                self.unembed_w, self.unembed_b]}
        for blk in self.blocks:
            out.update(blk.params())
        return out


class AsrModel:
    """Bundle of encoder, prompt bank, prefix LM, and the ASR heads."""

    def __init__(self, cfg: PrefixLMConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x6d6f64)))
        self.encoder = SpeechEncoder(cfg, rng)
        self.bank = SoftPromptBank(cfg, rng)
        self.llm = PrefixLM(cfg, rng)
        head_in = cfg.V if cfg.speech_output_mode == "logits" else cfg.D
        self.rnnt_head: TransducerHead | None = None
        self.ctc_w: Tensor | None = None
        self.ctc_b: Tensor | None = None
        if cfg.with_rnnt_head:
            self.rnnt_head = init_transducer_head(rng, head_in, cfg.V,
                                                  cfg.pred_dim, cfg.joint_dim)
        if cfg.with_ctc_head:
            self.ctc_w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(head_in),
                                           size=(head_in, cfg.V + 1)),
                                requires_grad=True, name="ctc.w")
            self.ctc_b = Tensor(np.zeros(cfg.V + 1), requires_grad=True, name="ctc.b")

    # ---- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder.params())
        out[self.bank.table.name] = self.bank.table
        out.update(self.llm.params())
        if self.rnnt_head is not None:
            out.update({t.name: t for t in self.rnnt_head.params().values()})
        if self.ctc_w is not None:
            out[self.ctc_w.name] = self.ctc_w
            out[self.ctc_b.name] = self.ctc_b
        return out

    @staticmethod
    def group_of(name: str) -> str:
        top = name.split(".", 1)[0]
        if top == "encoder":
            return "encoder"
        if top == "prompt":
            return "prompt"
        if top == "llm":
            return "llm"
        if top in ("head", "ctc"):
            return "transducer_head"
        raise ValueError(f"no parameter group for {name!r}")

    # ---- forward -----------------------------------------------------------

    def forward(self, tape: Tape, frames: np.ndarray, tokens, lang_id: int) -> ModelOutputs:
        stacked = subsample(frames, self.cfg.subsample_factor)
        prefix = self.encoder.encode(tape, stacked)
        prompt = self.bank.select(tape, lang_id)
        return self.llm.forward(tape, prompt, prefix, tokens)

    def ctc_logits(self, tape: Tape, speech_outputs: Tensor) -> Tensor:
        if self.ctc_w is None:
            raise ValueError("model has no ctc head")
        return tape.add_last(tape.matmul(speech_outputs, self.ctc_w), self.ctc_b)

    # ---- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.cfg, self.parameters())

    @classmethod
    def load(cls, path) -> "AsrModel":
        cfg, arrays = load_checkpoint(path)
        model = cls(cfg, seed=0)
        params = model.parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, tensor in params.items():
            if arrays[name].shape != tensor.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: file {arrays[name].shape}, "
                    f"config implies {tensor.data.shape}")
            tensor.data = arrays[name]
        return model


def save_checkpoint(path, cfg: PrefixLMConfig, params: dict[str, Tensor]) -> None:
    """Flat binary record: version, config, then (name, shape, float64 data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = json.dumps(asdict(cfg), sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, tensor in params.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[PrefixLMConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint {path}")
        piece = raw[off:off + n]
        off += n
        return piece

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", take(4))
    cfg_dict = json.loads(take(clen).decode("utf-8"))
    known = {f.name for f in fields(PrefixLMConfig)}
    cfg = PrefixLMConfig(**{k: v for k, v in cfg_dict.items() if k in known})
    (n,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    return cfg, arrays
