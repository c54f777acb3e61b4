"""Command-line entry points: train, parse, eval, bench and sample.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the long option names (``-`` or ``_``). Values from the file act as
defaults; flags given on the command line override them. Exit status is 0 on
success, 1 on a runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from itertools import product
from pathlib import Path

import numpy as np

from . import bench, pipeline, synthetic
from .corpus import CorpusError, Vocab, build_vocab
from .decode import bracketing_spans, left_branching, right_branching
from .evaluation import (
    EvalError, aggregate_reports, label_recall_csv, report_csv, report_text,
)
from .grammar import BINDINGS, GrammarError
from .neural import CheckpointError, ConfigError, ModelConfig, init_model, load_checkpoint, load_vocab, save_checkpoint
from .training import TrainConfig, fit, write_history

log = logging.getLogger("nblpcfg")

RUN_COLUMNS = ("binding", "n_nt", "n_pt", "d_h", "seed", "best_epoch", "dev_ppl", "dev_ppl_std", "checkpoint")
RUNTIME_ERRORS = (CorpusError, CheckpointError, ConfigError, GrammarError, EvalError, ValueError, OSError,
                  MemoryError, FloatingPointError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types and config files


def int_list(text):
    try:
        vals = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def str_list(text):
    vals = [x.strip() for x in str(text).split(",") if x.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def binding_list(text):
    vals = str_list(text)
    for v in vals:
        if v not in BINDINGS:
            raise argparse.ArgumentTypeError(f"unknown binding {v!r}; choose from {', '.join(BINDINGS)}")
    return vals


def read_config(path):
    """``{key: raw value}`` from a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _apply_config(sub, values):
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for '{sub.prog}'")
        if isinstance(act, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            val = act.type(raw) if act.type is not None else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {list(act.choices)}")
        defaults[key] = val
    sub.set_defaults(**defaults)


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="key = value file supplying option defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(prog="nblpcfg", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", metavar="COMMAND")
    subs.required = True
    table = {}

    p = subs.add_parser("train", help="train one or more models and write checkpoints")
    _common(p)
    p.add_argument("--train", help="training corpus (.mrg trees, .conll, or .txt)")
    p.add_argument("--dev", help="development corpus for early stopping")
    p.add_argument("--out-dir", default="runs", help="directory for checkpoints, histories and runs.csv")
    p.add_argument("--keep-punct", action="store_true", help="do not strip punctuation")
    p.add_argument("--vocab-cap", type=int, default=10000)
    p.add_argument("--embed-dim", type=int, default=256)
    p.add_argument("--n-nt", type=int_list, default=[15], help="nonterminal count(s), comma list sweeps")
    p.add_argument("--n-pt", type=int, default=None, help="preterminal count (default 2 * n_nt)")
    p.add_argument("--d-h", type=int_list, default=[300], help="latent domain size(s), comma list sweeps")
    p.add_argument("--binding", type=binding_list, default=["D_with_C"], help="binding mode(s)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seeds", type=int_list, default=[0], help="comma list; one run per seed")
    table["train"] = p

    p = subs.add_parser("parse", help="decode tokenized text with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="model checkpoint (vocabulary read from <checkpoint>.vocab)")
    p.add_argument("--input", help="one tokenized sentence per line ('-' for stdin)")
    p.add_argument("--output", default="-", help="output file ('-' for stdout)")
    p.add_argument("--decode", choices=pipeline.DECODERS, default="mbr")
    table["parse"] = p

    p = subs.add_parser("eval", help="score predictions or checkpoints against gold trees")
    _common(p)
    p.add_argument("--gold", help="gold trees (.mrg) or CoNLL file")
    p.add_argument("--gold-conll", help="gold dependencies aligned with --gold trees")
    p.add_argument("--pred", help="predicted parses (parse output or one tree per line)")
    p.add_argument("--pred-conll", help="predicted dependencies when --pred holds trees only")
    p.add_argument("--checkpoint", type=str_list, help="checkpoint(s), comma list; several are aggregated")
    p.add_argument("--baseline", choices=("right", "left"), help="score a branching baseline")
    p.add_argument("--decode", choices=pipeline.DECODERS, default="mbr")
    p.add_argument("--keep-punct", action="store_true", help="do not strip punctuation from gold")
    p.add_argument("--out", help="report CSV (f1_mean,f1_std,udas,uuas,ppl)")
    p.add_argument("--labels-out", help="per-label recall CSV")
    table["eval"] = p

    p = subs.add_parser("bench", help="time inside variants and fit scaling slopes")
    _common(p)
    p.add_argument("--variants", type=str_list, default=list(bench.FACTORED_VARIANTS))
    p.add_argument("--lengths", type=int_list, default=[30])
    p.add_argument("--m", type=int_list, default=[10, 20, 40, 80], help="total symbol counts")
    p.add_argument("--d-h", type=int_list, default=[300])
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-", help="timings CSV ('-' for stdout)")
    p.add_argument("--slopes-out", help="fitted slopes CSV")
    table["bench"] = p

    p = subs.add_parser("sample", help="write a synthetic treebank from a random factored grammar")
    _common(p)
    p.add_argument("--out-dir", default="synthetic")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--n-nt", type=int, default=3)
    p.add_argument("--n-pt", type=int, default=6)
    p.add_argument("--vocab-size", type=int, default=50)
    p.add_argument("--d-h", type=int, default=8)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--punct-rate", type=float, default=0.5, help="chance of an inner comma per sentence")
    p.add_argument("--seed", type=int, default=0)
    table["sample"] = p
    return parser, table


def parse_args(argv):
    parser, table = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            table[args.command].error(f"cannot read config: {exc}")
        except UsageError as exc:
            table[args.command].error(str(exc))
        try:
            _apply_config(table[args.command], values)
        except UsageError as exc:
            table[args.command].error(str(exc))
        args = parser.parse_args(argv)
    return args, table[args.command]


def _require(sub, args, *names):
    for name in names:
        val = getattr(args, name)
        if val is None:
            sub.error(f"--{name.replace('_', '-')} is required")


def _existing(sub, *paths):
    for p in paths:
        if p is not None and p != "-" and not Path(p).exists():
            sub.error(f"no such file: {p}")


# ---------------------------------------------------------------------------
# train


def _fmt(x):
    return "" if x is None else (f"{x:.6f}" if isinstance(x, float) else str(x))


def cmd_train(args, sub):
    _require(sub, args, "train")
    _existing(sub, args.train, args.dev)
    strip = not args.keep_punct
    train = pipeline.prepare(pipeline.load_sentences(args.train), strip)
    dev = pipeline.prepare(pipeline.load_sentences(args.dev), strip) if args.dev else []
    if not train:
        raise CorpusError(f"{args.train}: no sentences of length >= 2")
    vocab = build_vocab(train, cap=args.vocab_cap)
    enc_train, enc_dev = pipeline.encode(train, vocab), pipeline.encode(dev, vocab)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = list(product(args.binding, args.n_nt, args.d_h))
    rows = []
    for binding, n_nt, d_h in settings:
        n_pt = args.n_pt if args.n_pt is not None else 2 * n_nt
        tag = "" if len(settings) == 1 else f"-{binding}-nt{n_nt}-h{d_h}"
        per_seed = []
        for seed in args.seeds:
            cfg = ModelConfig(embed_dim=args.embed_dim, n_nt=n_nt, n_pt=n_pt, d_h=d_h,
                              vocab_size=len(vocab), binding=binding, seed=seed)
            tcfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                               max_len=args.max_len, seed=seed)
            model = init_model(cfg)
            log.info("training %s seed %d on %d sentences", tag or "model", seed, len(enc_train))
            res = fit(model, enc_train, enc_dev, tcfg)
            ckpt = out / f"model{tag}-seed{seed}.ckpt"
            save_checkpoint(model, ckpt, vocab=vocab.words)
            write_history(res.history, out / f"history{tag}-seed{seed}.csv")
            per_seed.append(res.best_ppl)
            rows.append((binding, n_nt, n_pt, d_h, seed, res.best_epoch, res.best_ppl, None, str(ckpt)))
        ppl = np.asarray(per_seed, dtype=np.float64)
        ok = ppl[np.isfinite(ppl)]
        mean = float(ok.mean()) if ok.size else float("nan")
        std = float(ok.std()) if ok.size else float("nan")
        rows.append((binding, n_nt, n_pt, d_h, "mean", None, mean, std, None))
    with open(out / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in rows:
            w.writerow([_fmt(x) for x in r])
    for r in rows:
        if r[4] == "mean":
            print(f"{r[0]} n_nt={r[1]} d_h={r[3]}: dev ppl {r[6]:.3f} ± {r[7]:.3f} over {len(args.seeds)} seed(s)")
    return 0


# ---------------------------------------------------------------------------
# parse


def _load_model(path):
    model = load_checkpoint(path)
    words = load_vocab(path)
    if words is None:
        raise CheckpointError(f"{path}: missing vocabulary sidecar {path}.vocab")
    vocab = Vocab(words)
    if len(vocab) != model.config.vocab_size:
        raise CheckpointError(f"{path}: vocabulary has {len(vocab)} entries, model expects {model.config.vocab_size}")
    return model, vocab


def cmd_parse(args, sub):
    _require(sub, args, "checkpoint", "input")
    _existing(sub, args.checkpoint, args.input)
    model, vocab = _load_model(args.checkpoint)
    fh = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    with fh:
        lines = [line.split() for line in fh]
    out = sys.stdout if args.output == "-" else open(args.output, "w", encoding="utf-8")
    try:
        for k, toks in enumerate(lines, 1):
            if not toks:
                continue
            if len(toks) < 2:
                out.write(f"# error: line {k}: sentences need at least 2 words\n\n")
                continue
            parse = pipeline.decode_model(model, [vocab.encode(toks)], args.decode)[0]
            out.write(pipeline.format_parse(toks, parse) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args, sub):
    _require(sub, args, "gold")
    modes = [x is not None for x in (args.pred, args.checkpoint, args.baseline)]
    if sum(modes) != 1:
        sub.error("give exactly one of --pred, --checkpoint, --baseline")
    _existing(sub, args.gold, args.gold_conll, args.pred, args.pred_conll, *(args.checkpoint or []))
    golds = pipeline.prepare(pipeline.load_sentences(args.gold, args.gold_conll), not args.keep_punct)
    if not golds:
        raise CorpusError(f"{args.gold}: no sentences of length >= 2")
    if args.checkpoint:
        reports = []
        for path in args.checkpoint:
            model, vocab = _load_model(path)
            report, _ = pipeline.evaluate_model(model, vocab, golds, args.decode)
            log.info("%s: F1 %.4f", path, report.f1_mean)
            reports.append(report)
        report = aggregate_reports(reports)
        seeds_f1 = [r.f1_mean for r in reports]
    else:
        if args.baseline:
            make = right_branching if args.baseline == "right" else left_branching
            spans = [set(bracketing_spans(make(len(g)))) for g in golds]
            heads = None
        else:
            preds = pipeline.read_predictions(args.pred)
            if args.pred_conll:
                blocks = pipeline.read_conll(args.pred_conll)
                if len(blocks) != len(preds):
                    raise CorpusError(f"{args.pred_conll}: {len(blocks)} blocks for {len(preds)} trees")
                preds = [(s, h, n) for (s, _, n), h in zip(preds, blocks)]
            for k, ((_, _, n), g) in enumerate(zip(preds, golds)):
                if n != len(g):
                    raise CorpusError(f"sentence {k}: prediction has {n} words, gold has {len(g)}")
            spans = [s for s, _, _ in preds]
            heads = [h for _, h, _ in preds] if all(h is not None for _, h, _ in preds) else None
        report = pipeline.evaluate(golds, spans, heads)
        seeds_f1 = None
    if args.out:
        Path(args.out).write_text(report_csv([report]), encoding="utf-8")
    if args.labels_out:
        Path(args.labels_out).write_text(label_recall_csv(report.label_recall), encoding="utf-8")
    sys.stdout.write(report_text(report, seeds_f1))
    return 0


# ---------------------------------------------------------------------------
# bench and sample


def cmd_bench(args, sub):
    if args.reps < 1:
        sub.error("--reps must be >= 1")
    bad = [v for v in args.variants if v not in bench.FACTORED_VARIANTS]
    if bad:
        sub.error(f"unknown variant(s) {bad}; choose from {', '.join(bench.FACTORED_VARIANTS)}")

    def progress(row):
        log.info("%s l=%d m=%d d_h=%d: %s", row.variant, row.l, row.n_nt, row.d_h, row.seconds)

    rows = bench.run_grid(args.variants, args.lengths, args.m, args.d_h, reps=args.reps,
                          seed=args.seed, progress=progress)
    text = bench.rows_csv(rows)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text, encoding="utf-8")
    fits = bench.slopes(rows)
    if args.slopes_out:
        Path(args.slopes_out).write_text(bench.slopes_csv(fits), encoding="utf-8")
    for f in fits:
        log.info("slope %s (d_h=%d) vs %s at %d: %.3f", f["variant"], f["d_h"], f["axis"], f["fixed"], f["slope"])
    return 0


def cmd_sample(args, sub):
    params = synthetic.synthetic_grammar(args.n_nt, args.n_pt, args.vocab_size, args.d_h, seed=args.seed)
    total = args.n_train + args.n_dev + args.n_test
    data = synthetic.sample_corpus(params, total, seed=args.seed, max_len=args.max_len)
    rng = np.random.default_rng(args.seed)
    golds = [synthetic.add_punctuation(synthetic.to_gold(w, t, args.n_nt, args.n_nt + args.n_pt), rng, args.punct_rate)
             for w, t in data]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": golds[:args.n_train], "dev": golds[args.n_train:args.n_train + args.n_dev],
              "test": golds[args.n_train + args.n_dev:]}
    for name, part in splits.items():
        if part:
            synthetic.write_treebank(part, out / f"{name}.mrg", out / f"{name}.conll")
    print(f"wrote {total} sentences to {out}")
    return 0


COMMANDS = {"train": cmd_train, "parse": cmd_parse, "eval": cmd_eval, "bench": cmd_bench, "sample": cmd_sample}


def main(argv=None):
    args, sub = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, sub)
    except RUNTIME_ERRORS as exc:
        print(f"nblpcfg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
