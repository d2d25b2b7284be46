"""Command-line surface: gen-data, train, decode, evaluate, verify.

Every command is deterministic given its inputs; data goes to files,
diagnostics to stderr, and failures exit nonzero. Output record files open
with a meta line carrying the seed and config hash so runs are traceable.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import verify as verify_suites
from .corpus import (CorpusFormatError, parse_corpus_spec, read_corpus, read_lexicon,
                     generate_synthetic_corpus, write_corpus, write_lexicon)
from .decoding import greedy_ctc_decode, greedy_lm_decode, greedy_rnnt_decode, lm_step_fn
from .losses import JointLossConfig
from .metrics import corpus_report, format_report
from .model import AsrModel, CheckpointError
from .training import (Adam, ConfigError, NonFiniteLossError, ParameterRegistry,
                       REGIMES, parse_train_config, train_step)


class CliError(RuntimeError):
    pass


def _sha256_file(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _read_text(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"{what} file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    spec = parse_corpus_spec(_read_text(args.spec, "corpus spec"))
    train, test = generate_synthetic_corpus(spec)
    write_corpus(args.out_train, train)
    write_corpus(args.out_test, test)
    write_lexicon(args.lexicon, spec.lexicon())
    print(f"wrote {len(train)} train / {len(test)} test utterances, "
          f"lexicon over [0, {spec.vocab})", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = parse_train_config(_read_text(args.config, "config"))
    config_hash = _sha256_file(args.config)
    utterances = read_corpus(args.train)
    if not utterances:
        raise CliError(f"training corpus {args.train} is empty")
    out_dir = args.out if args.out else cfg.checkpoint_dir
    os.makedirs(out_dir, exist_ok=True)
    model = AsrModel(cfg.model_config(), seed=cfg.seed)
    registry = ParameterRegistry.from_model(model)
    optimizer = Adam(registry, lr=cfg.lr)
    regime = REGIMES[cfg.regime]
    jcfg = JointLossConfig(cfg.alpha)

    manifest = {
        "record": "manifest",
        "config_path": os.path.abspath(args.config),
        "config_sha256": config_hash,
        "train_corpus": os.path.abspath(args.train),
        "regime": cfg.regime,
        "alpha": cfg.alpha,
        "asr_loss": cfg.asr_loss,
        "eval_decoder": cfg.eval_decoder,
        "seed": cfg.seed,
        "steps": cfg.steps,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    model.save(os.path.join(out_dir, "init.ckpt"))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0x646174)))
    order = rng.permutation(len(utterances))
    pos = 0
    log_path = os.path.join(out_dir, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(json.dumps({"record": "meta", "seed": cfg.seed,
                              "config_sha256": config_hash}) + "\n")
        for step in range(1, cfg.steps + 1):
            if pos + cfg.batch_size > len(order):
                order = rng.permutation(len(utterances))
                pos = 0
            batch = [utterances[i] for i in order[pos:pos + cfg.batch_size]]
            pos += cfg.batch_size
            try:
                mets = train_step(batch, model, regime, optimizer, jcfg, cfg.asr_loss)
            except NonFiniteLossError as exc:
                raise CliError(f"step {step}: {exc}") from exc
            rec = {"record": "step", "step": step,
                   "lm_loss": mets.lm_loss,
                   "lm_loss_per_token": mets.lm_loss_per_token,
                   "asr_loss": mets.asr_loss,
                   "joint_loss": mets.joint_loss,
                   "skipped_infeasible": mets.skipped_infeasible}
            for group, norm in mets.grad_norms.items():
                rec[f"grad_norm_{group}"] = norm
            log.write(json.dumps(rec) + "\n")
            if cfg.eval_every and step % cfg.eval_every == 0:
                model.save(os.path.join(out_dir, f"step{step:06d}.ckpt"))
    model.save(os.path.join(out_dir, "final.ckpt"))
    print(f"trained {cfg.steps} steps; checkpoints in {out_dir}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# decode


def _decode_one(model: AsrModel, decoder: str, utt, max_len: int, max_symbols: int):
    from .autodiff import Tape
    if decoder == "lm":
        return greedy_lm_decode(lm_step_fn(model, utt.frames, utt.lang_id),
                                model.cfg.eos_id, max_len)
    tape = Tape()
    out = model.forward(tape, utt.frames, [0], utt.lang_id)  # text side unused
    if decoder == "rnnt":
        return greedy_rnnt_decode(out.speech_outputs.data, model.rnnt_head, max_symbols)
    ctc = model.ctc_logits(tape, out.speech_outputs)
    return greedy_ctc_decode(ctc.data, model.cfg.blank_id)


def cmd_decode(args) -> int:
    ckpt = os.path.join(args.checkpoint, "final.ckpt")
    if not os.path.exists(ckpt):
        raise CliError(f"checkpoint not found: {ckpt}")
    model = AsrModel.load(ckpt)
    if args.decoder == "rnnt" and model.rnnt_head is None:
        raise CliError("checkpoint has no transducer head; cannot decode with rnnt")
    if args.decoder == "ctc" and model.ctc_w is None:
        raise CliError("checkpoint has no ctc head; cannot decode with ctc")
    utterances = read_corpus(args.corpus)
    manifest_path = os.path.join(args.checkpoint, "manifest.json")
    seed = None
    config_hash = None
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        seed = manifest.get("seed")
        config_hash = manifest.get("config_sha256")
    cap_hits = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"record": "meta", "decoder": args.decoder,
                             "seed": seed, "config_sha256": config_hash}) + "\n")
        for utt in utterances:
            hyp = _decode_one(model, args.decoder, utt, args.max_len, args.max_symbols_per_frame)
            cap_hits += hyp.cap_hits
            fh.write(json.dumps({"record": "hyp", "id": utt.id,
                                 "tokens": hyp.tokens,
                                 "truncated": hyp.truncated}) + "\n")
    note = f"; per-frame cap hit {cap_hits} times" if cap_hits else ""
    print(f"decoded {len(utterances)} utterances with {args.decoder}{note}", file=sys.stderr)
    return 0


def read_hypotheses(path: str, with_meta: bool = False):
    hyps: dict[str, list[int]] = {}
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("record") == "meta":
                meta = rec
                continue
            if "id" not in rec or "tokens" not in rec:
                raise CorpusFormatError(f"{path}:{lineno}: missing id/tokens")
            hyps[rec["id"]] = [int(t) for t in rec["tokens"]]
    return (hyps, meta) if with_meta else hyps


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    refs_list = read_corpus(args.refs)
    hyps, hyp_meta = read_hypotheses(args.hyps, with_meta=True)
    lexicon = read_lexicon(args.lexicon)
    refs = {u.id: list(u.tokens) for u in refs_list}
    langs = {u.id: u.lang for u in refs_list}
    try:
        rows = corpus_report(refs, hyps, langs, lexicon)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"record": "meta", "refs": os.path.basename(args.refs),
                             "hyps": os.path.basename(args.hyps),
                             "seed": hyp_meta.get("seed"),
                             "config_sha256": hyp_meta.get("config_sha256")}) + "\n")
        for row in rows:
            fh.write(json.dumps({"record": "lang", **row.as_record()}) + "\n")
    table = format_report(rows)
    with open(args.out + ".txt", "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, file=sys.stderr, end="")
    return 0


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    suite = args.suite.replace("-", "_")
    fn = getattr(verify_suites, f"suite_{suite}", None)
    if fn is None:
        raise CliError(f"unknown verify suite {args.suite!r}")
    result = fn(seed=args.seed)
    for line in result.lines:
        print(line)
    print(f"suite {args.suite}: {'PASS' if result.passed else 'FAIL'}")
    return 0 if result.passed else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefixasr",
                                description="speech-prefix-tuned prefix-LM ASR, desk scale")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus and lexicon")
    g.add_argument("--spec", required=True)
    g.add_argument("--out-train", required=True)
    g.add_argument("--out-test", required=True)
    g.add_argument("--lexicon", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--train", required=True)
    t.add_argument("--out", default=None,
                   help="checkpoint directory (default: checkpoint_dir from the config)")
    t.set_defaults(fn=cmd_train)

    d = sub.add_parser("decode", help="decode a corpus with a trained checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--corpus", required=True)
    d.add_argument("--decoder", required=True, choices=["lm", "rnnt", "ctc"])
    d.add_argument("--out", required=True)
    d.add_argument("--max-len", type=int, default=16)
    d.add_argument("--max-symbols-per-frame", type=int, default=5)
    d.set_defaults(fn=cmd_decode)

    e = sub.add_parser("evaluate", help="score hypotheses against references")
    e.add_argument("--refs", required=True)
    e.add_argument("--hyps", required=True)
    e.add_argument("--lexicon", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_evaluate)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True,
                   choices=["grad", "rnnt-oracle", "ctc-oracle", "mask", "routing"])
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, CorpusFormatError, ConfigError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
