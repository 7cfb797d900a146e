"""Command-line surface: train, translate, evaluate, export-attention, param-count.

Every run is reproducible from (config file, seed): batch shuffling and
dropout are reseeded per epoch from the run seed, so two invocations yield
identical metrics, checkpoints, and output files.  Verbosity comes from the
``MLRF_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .checkpoint import build_model, load_checkpoint, restore_optimizer, save_checkpoint
from .config import ConfigError, RunConfig, build_corpora, load_config
from .data import BOS_ID, EOS_ID, ParallelCorpus, Vocabulary, make_batches
from .decoding import BeamConfig, translate_ids
from .metrics import corpus_bleu
from .model import Transformer
from .training import (
    AdamState,
    StepMetrics,
    count_parameters,
    evaluate_teacher_forced,
    parameter_breakdown,
    restart_adam,
    train_epoch,
)

log = logging.getLogger("mlrf")

METRICS_HEADER = "step\tphase\tlr\tloss\ttrain_acc\tvalid_acc"


@dataclass
class RunReport:
    """Per-step metric rows plus the final evaluation summary."""

    records: list[tuple] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def add(self, m: StepMetrics, valid_acc: float | None) -> None:
        self.records.append(
            (m.step, m.phase, m.lr, m.loss, m.accuracy, valid_acc)
        )

    def write(self, path) -> None:
        lines = [METRICS_HEADER]
        for step, phase, lr, loss, acc, vacc in self.records:
            v = "" if vacc is None else f"{vacc:.6f}"
            lines.append(f"{step}\t{phase}\t{lr:.8e}\t{loss:.8f}\t{acc:.6f}\t{v}")
        Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def _vocab_meta(src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> dict:
    return {
        "reserved": ["<pad>", "<bos>", "<eos>", "<unk>"],
        "src_vocab_tokens": src_vocab.decode(range(4, len(src_vocab)), False),
        "tgt_vocab_tokens": tgt_vocab.decode(range(4, len(tgt_vocab)), False),
    }


def _vocabs_from_meta(meta: dict) -> tuple[Vocabulary, Vocabulary]:
    return (
        Vocabulary(meta["src_vocab_tokens"]),
        Vocabulary(meta["tgt_vocab_tokens"]),
    )


# ---------------------------------------------------------------------------
# train


def run_training(run_cfg: RunConfig, out_dir, resume: str | None = None) -> RunReport:
    """Phase 1 (warmup schedule) then phase 2 (restarted Adam), per config."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = run_cfg.seed
    tcfg = run_cfg.train

    train_corpus, valid_corpus, src_vocab, tgt_vocab = build_corpora(run_cfg.data, seed)
    if len(train_corpus) == 0:
        raise ConfigError("training corpus is empty")
    model_cfg = run_cfg.model_config(len(src_vocab), len(tgt_vocab))

    epochs_done = 0
    best_valid = float("inf")
    last_valid_acc: float | None = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.model_config != model_cfg or ckpt.fusion_config != run_cfg.fusion:
            raise ConfigError("resume checkpoint was built from a different config")
        model = build_model(ckpt)
        state = restore_optimizer(ckpt, model.params)
        epochs_done = int(ckpt.meta.get("epochs_done", 0))
        best_valid = float(ckpt.meta.get("best_valid_loss", float("inf")))
        last_valid_acc = ckpt.meta.get("last_valid_acc")
        log.info("resumed from %s at epoch %d, step %d", resume, epochs_done, state.t)
    else:
        model = Transformer(model_cfg, run_cfg.fusion, seed=seed)
        state = AdamState(model.params)

    valid_batches = None
    if valid_corpus is not None and len(valid_corpus) > 0:
        valid_batches = make_batches(valid_corpus, src_vocab, tgt_vocab, tcfg.batch_phase2)

    def save(path, epochs_finished: int) -> None:
        meta = {
            "seed": seed,
            "epochs_done": epochs_finished,
            "best_valid_loss": best_valid,
            "last_valid_acc": last_valid_acc,
            "dropout_rng": model.dropout_rng.bit_generator.state,
            **_vocab_meta(src_vocab, tgt_vocab),
        }
        save_checkpoint(path, model, state, tcfg, meta)

    report = RunReport()
    stats = {"loss": float("nan"), "accuracy": 0.0}
    total_epochs = tcfg.epochs_phase1 + tcfg.epochs_phase2
    schedule = [
        ("warmup_schedule", 0, tcfg.epochs_phase1, tcfg.batch_phase1),
        ("restarted", tcfg.epochs_phase1, tcfg.epochs_phase2, tcfg.batch_phase2),
    ]
    for phase, phase_start, phase_epochs, batch_size in schedule:
        for e in range(phase_epochs):
            epoch = phase_start + e
            if epoch < epochs_done:
                continue  # already covered by the resumed checkpoint
            if phase == "restarted" and not state.restarted():
                restart_adam(state)
                log.info(
                    "optimizer restarted: fixed lr %.2e, batch %d",
                    tcfg.restart_lr, batch_size,
                )
            # epoch-scoped, seed-derived streams keep runs replayable after
            # a resume at any epoch boundary
            model.reseed_dropout([seed, 7, epoch])
            batches = make_batches(
                train_corpus, src_vocab, tgt_vocab, batch_size,
                shuffle_seed=[seed, 11, epoch], sort_by_length=True,
            )
            pending: list[StepMetrics] = []

            def on_step(m: StepMetrics) -> None:
                if m.step % tcfg.log_every == 0:
                    pending.append(m)

            stats = train_epoch(model, batches, state, tcfg, on_step=on_step)
            # rows carry the most recent *completed* validation score
            for m in pending:
                report.add(m, last_valid_acc)
            if valid_batches is not None:
                valid = evaluate_teacher_forced(model, valid_batches)
                last_valid_acc = valid["accuracy"]
                if valid["loss"] < best_valid:
                    best_valid = valid["loss"]
                    save(out_dir / "best.ckpt", epoch + 1)
            save(out_dir / "last.ckpt", epoch + 1)
            log.info(
                "epoch %d/%d [%s] loss %.4f acc %.4f%s",
                epoch + 1, total_epochs, phase, stats["loss"], stats["accuracy"],
                f" valid_acc {last_valid_acc:.4f}" if last_valid_acc is not None else "",
            )
    if valid_batches is None:
        save(out_dir / "best.ckpt", epochs_done if total_epochs == 0 else total_epochs)

    report.final = {
        "train_loss": stats["loss"],
        "valid_acc": last_valid_acc,
        "steps": state.t,
    }
    report.write(out_dir / "metrics.tsv")
    return report


def cmd_train(args) -> int:
    run_cfg = load_config(args.config)
    if args.seed is not None:
        run_cfg.seed = args.seed
        run_cfg.train.seed = args.seed
    report = run_training(run_cfg, args.out, resume=args.resume)
    print(
        f"training finished (final-phase step {report.final['steps']}); "
        f"outputs in {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# translate / evaluate


def _load_model_and_vocabs(path):
    ckpt = load_checkpoint(path)
    model = build_model(ckpt)
    src_vocab, tgt_vocab = _vocabs_from_meta(ckpt.meta)
    return ckpt, model, src_vocab, tgt_vocab


def _beam_config(args, fallback: BeamConfig | None = None) -> BeamConfig:
    base = fallback or BeamConfig()
    return BeamConfig(
        width=args.beam if args.beam is not None else base.width,
        length_alpha=args.alpha if args.alpha is not None else base.length_alpha,
        max_len=args.max_len if args.max_len is not None else base.max_len,
    )


def translate_lines(model, src_vocab, tgt_vocab, lines, beam: BeamConfig) -> list[str]:
    out = []
    for line in lines:
        tokens = line.split()
        if not tokens:
            out.append("")
            continue
        ids = src_vocab.encode(tokens) + [EOS_ID]
        out_ids = translate_ids(model, ids, beam)
        out.append(" ".join(tgt_vocab.decode(out_ids)))
    return out


def cmd_translate(args) -> int:
    _, model, src_vocab, tgt_vocab = _load_model_and_vocabs(args.checkpoint)
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    hyps = translate_lines(model, src_vocab, tgt_vocab, lines, _beam_config(args))
    text = "".join(h + "\n" for h in hyps)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    _, model, src_vocab, tgt_vocab = _load_model_and_vocabs(args.checkpoint)
    src_lines = Path(args.src).read_text(encoding="utf-8").splitlines()
    ref_lines = Path(args.ref).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(ref_lines):
        raise SystemExit(
            f"error: {args.src} has {len(src_lines)} lines but {args.ref} has {len(ref_lines)}"
        )
    hyps = translate_lines(model, src_vocab, tgt_vocab, src_lines, _beam_config(args))
    bleu = corpus_bleu([h.split() for h in hyps], [r.split() for r in ref_lines])

    pairs = [(s.split(), r.split()) for s, r in zip(src_lines, ref_lines) if s.split() and r.split()]
    batches = make_batches(ParallelCorpus(pairs), src_vocab, tgt_vocab, 32)
    forced = evaluate_teacher_forced(model, batches)
    print(f"BLEU = {bleu:.2f}")
    print(f"token_accuracy = {forced['accuracy']:.4f}")
    if args.out:
        Path(args.out).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# attention export


def export_attention(model, src_vocab, tgt_vocab, lines, side: str, beam: BeamConfig):
    """Rows (sentence_id, position, token, hop, layer, weight) for one side."""
    from . import autodiff as ad

    rows = []
    for sent_id, line in enumerate(lines):
        tokens = line.split()
        if not tokens:
            continue
        src_ids = src_vocab.encode(tokens) + [EOS_ID]
        if side == "encoder":
            with ad.no_grad():
                _, trace = model.encoder_output(model.encode(src_ids, [len(src_ids)]))
            pos_tokens = tokens + ["<eos>"]
        else:
            # decode first, then force the decoded sequence to read its
            # trace; position j is labeled with the token predicted there
            out_ids = translate_ids(model, src_ids, beam)
            tgt_in = [BOS_ID] + out_ids
            with ad.no_grad():
                enc_rep, _ = model.encoder_output(model.encode(src_ids, [len(src_ids)]))
                stack = model.decode_teacher_forced(
                    tgt_in, [len(tgt_in)], enc_rep, [len(src_ids)]
                )
                _, trace = model.decoder_output(stack)
            pos_tokens = tgt_vocab.decode(out_ids, strip_reserved=False) + ["<eos>"]
        if trace is None:
            raise ValueError(f"{side} side has no self-attention fusion")
        for pos in range(trace.weights.shape[0]):
            token = pos_tokens[pos] if pos < len(pos_tokens) else "<pad>"
            for hop in range(trace.n_hops):
                for layer in range(trace.n_layers):
                    rows.append(
                        (
                            sent_id,
                            pos,
                            token,
                            hop + 1,
                            trace.first_layer + layer,
                            trace.weights[pos, hop, layer],
                        )
                    )
    return rows


def write_trace_file(rows, path) -> None:
    lines = ["sentence_id\tposition\ttoken\thop\tlayer\tweight"]
    for sent, pos, token, hop, layer, w in rows:
        # 17 significant digits: float64 survives the text round-trip exactly
        lines.append(f"{sent}\t{pos}\t{token}\t{hop}\t{layer}\t{w:.17g}")
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")


def read_trace_file(path):
    """Parse a trace file back into typed rows (inverse of write_trace_file)."""
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        sent, pos, token, hop, layer, w = line.split("\t")
        rows.append((int(sent), int(pos), token, int(hop), int(layer), float(w)))
    return rows


def cmd_export_attention(args) -> int:
    ckpt, model, src_vocab, tgt_vocab = _load_model_and_vocabs(args.checkpoint)
    fusion = ckpt.fusion_config
    sa_sides = [s for s in ("decoder", "encoder") if fusion.kind_for(s) == "self_attention"]
    if not sa_sides:
        raise SystemExit(
            "error: checkpoint has no self-attention fusion "
            f"(side={fusion.side}, enc={fusion.enc_kind}, dec={fusion.dec_kind})"
        )
    side = args.side or sa_sides[0]
    if side not in sa_sides:
        raise SystemExit(f"error: {side} side does not use self-attention fusion")
    lines = Path(args.input).read_text(encoding="utf-8").splitlines()
    rows = export_attention(model, src_vocab, tgt_vocab, lines, side, _beam_config(args))
    out = args.out or "attention.tsv"
    write_trace_file(rows, out)
    print(f"wrote {len(rows)} weights to {out}")
    return 0


# ---------------------------------------------------------------------------
# param-count


def cmd_param_count(args) -> int:
    run_cfg = load_config(args.config)
    try:
        model_cfg = run_cfg.model_config()
    except ConfigError:
        _, _, src_vocab, tgt_vocab = build_corpora(run_cfg.data, run_cfg.seed)
        model_cfg = run_cfg.model_config(len(src_vocab), len(tgt_vocab))
    model = Transformer(model_cfg, run_cfg.fusion, seed=run_cfg.seed)
    total = count_parameters(model.params)
    print(f"total\t{total}")
    for group, n in parameter_breakdown(model.params).items():
        print(f"{group}\t{n}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlrf",
        description="Transformer NMT with multi-layer representation fusion",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_beam_flags(p):
        p.add_argument("--beam", type=int, default=None, help="beam width (default 8)")
        p.add_argument("--alpha", type=float, default=None, help="length normalization weight (default 1.6)")
        p.add_argument("--max-len", type=int, default=None, help="maximum output length")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="run_out", help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="decode a file of source sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out", default=None)
    add_beam_flags(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU and token accuracy against a reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("src")
    p.add_argument("ref")
    p.add_argument("--out", default=None, help="also write the hypotheses here")
    add_beam_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-attention", help="dump fusion hop/layer weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("input")
    p.add_argument("--out", default=None)
    p.add_argument("--side", choices=("encoder", "decoder"), default=None)
    add_beam_flags(p)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("param-count", help="trainable parameter count for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MLRF_LOG_LEVEL", "INFO").upper()
    if not hasattr(logging, level):
        level = "INFO"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
