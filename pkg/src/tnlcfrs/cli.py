"""Command-line entry point: train, parse, eval, sample, gradcheck, bench."""
from __future__ import annotations

import argparse
import os
import secrets
import sys

import numpy as np

from .grammar import GrammarDims, NumericError, SampleRejected, ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _seed(args):
    if args.seed is None:
        args.seed = secrets.randbelow(2**31)
    print(f"seed={args.seed}", file=sys.stderr)
    return args.seed


def _atomic_text(path, text):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _ints(text):
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}")


def _require_file(path, what):
    if not os.path.isfile(path):
        raise DataError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    from . import corpus, plots, training

    _require_file(args.train, "training corpus")
    pairs = {}
    if args.config:
        _require_file(args.config, "config file")
    cfg_kw = training.read_config(args.config) if args.config else {}
    for item in args.set or ():
        key, eq, val = item.partition("=")
        if not eq:
            raise UsageError(f"--set expects key=value, got {item!r}")
        pairs[key.strip()] = val.strip()
    cfg_kw.update(training.parse_overrides(pairs))
    if args.seed is None and "seed" in cfg_kw:
        args.seed = cfg_kw["seed"]
    cfg_kw["seed"] = _seed(args)
    cfg = training.TrainConfig(**cfg_kw)
    print(training.format_config(cfg), end="", file=sys.stderr)

    train_tokens = corpus.read_text(args.train)
    vocab = corpus.build_vocab(train_tokens, args.vocab_size)
    dev_tokens, dev_gold = [], None
    if args.dev_gold:
        _require_file(args.dev_gold, "dev treebank")
        treebank = corpus.read_discbracket(args.dev_gold)
        dev_tokens = [list(w) for w, _ in treebank]
        dev_gold = [t for _, t in treebank]
    elif args.dev:
        _require_file(args.dev, "dev corpus")
        dev_tokens = corpus.read_text(args.dev)
    os.makedirs(args.out_dir, exist_ok=True)
    vocab.save(os.path.join(args.out_dir, "vocab.txt"))
    _atomic_text(os.path.join(args.out_dir, "config.txt"), training.format_config(cfg))
    train_ids = [corpus.encode(vocab, s) for s in train_tokens]
    dev_ids = [corpus.encode(vocab, s) for s in dev_tokens]
    if dev_gold is not None:
        keep = [k for k, s in enumerate(dev_ids) if len(s) >= 2]
        dev_ids = [dev_ids[k] for k in keep]
        dev_gold = [dev_gold[k] for k in keep]

    def report(rec):
        print(f"epoch {rec.epoch}\tlen<={rec.curriculum_len}\ttrain_nll={rec.train_nll:.4f}"
              f"\tdev_ppl={rec.dev_ppl:.4f}\t{rec.wall_seconds:.1f}s", file=sys.stderr)

    result = training.train(cfg, train_ids, dev_ids, vocab_size=len(vocab), out_dir=args.out_dir,
                            resume=args.resume, dev_gold=dev_gold, progress=report)
    _atomic_text(os.path.join(args.out_dir, "BEST"), f"best.npm\tepoch={result.best_epoch}\n")
    fig = plots.training_curve(result.history, os.path.join(args.out_dir, "training_curve.png"))
    print(f"dropped_short_sentences={result.dropped}", file=sys.stderr)
    print(f"best_epoch={result.best_epoch}\tfigure={fig}")
    return EXIT_OK


def _load_model(path, vocab_path=None):
    from . import corpus, neural

    model = os.path.join(path, "best.npm") if os.path.isdir(path) else path
    _require_file(model, "model checkpoint")
    vocab_path = vocab_path or os.path.join(os.path.dirname(os.path.abspath(model)), "vocab.txt")
    _require_file(vocab_path, "vocabulary")
    try:
        params, _ = neural.load_params(model)
    except (ValueError, ShapeError) as exc:
        raise DataError(str(exc))
    vocab = corpus.Vocab.load(vocab_path)
    if len(vocab) != params.dims.v:
        raise DataError(f"vocabulary has {len(vocab)} entries but the model expects "
                        f"{params.dims.v}")
    return params, vocab


def cmd_parse(args):
    from . import corpus, neural
    from .factored import validate_factors
    from .rank import ParseFailure, flat_tree, parse_corpus

    _require_file(args.input, "input")
    params, vocab = _load_model(args.model, args.vocab)
    fg = neural.forward(params.astype(np.float64))
    if validate_factors(fg, tol=1e-6):
        raise NumericError("model factors violate their normalization")
    tokens = corpus.read_text(args.input)
    ids = [corpus.encode(vocab, s) for s in tokens]
    trees, logz = parse_corpus(fg, ids, workers=args.workers, max_len=args.max_len,
                               with_logz=True)
    lines, flat, failed = [], 0, 0
    for sent, tree in zip(tokens, trees):
        if not sent:
            lines.append("\n")
            failed += 1
            continue
        if isinstance(tree, ParseFailure):
            failed += 1
            tree = flat_tree(len(sent))
        elif tree.nodes[tree.root].label == "FLAT":
            flat += 1
        lines.append(corpus.format_discbracket(tree, sent) + "\n")
    _atomic_text(args.output, "".join(lines))
    if args.logz:
        _atomic_text(args.logz, "index\tlength\tlogZ\n" + "".join(
            f"{k}\t{len(s)}\t{z:.10g}\n" for k, (s, z) in enumerate(zip(tokens, logz))))
    print(f"parsed={len(tokens) - flat - failed}\tflat_over_length={flat}\tfailed={failed}",
          file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    from . import corpus, plots

    _require_file(args.gold, "gold treebank")
    _require_file(args.pred, "predicted treebank")
    gold = corpus.read_discbracket(args.gold)
    pred = corpus.read_discbracket(args.pred)
    if len(gold) != len(pred):
        raise DataError(f"{len(gold)} gold trees vs {len(pred)} predicted trees")
    for k, ((gw, _), (pw, _)) in enumerate(zip(gold, pred)):
        if len(gw) != len(pw):
            raise DataError(f"tree {k + 1}: {len(gw)} gold words vs {len(pw)} predicted")
    baselines = [b for b in args.baselines.split(",") if b] if args.baselines else []
    rep = corpus.evaluate([t for _, t in gold], [t for _, t in pred], max_len=args.max_len,
                          baselines=baselines, seed=_seed(args))
    rows = [("model", rep.f1, rep.df1)] + [(k, f, d) for k, (f, d) in rep.baselines.items()]
    out = ["system\tF1\tDF1\n"] + [
        f"{name}\t{f:.2f}\t{'n/a' if d is None else f'{d:.2f}'}\n" for name, f, d in rows]
    out.append(f"# sentences={rep.sentences}\texcluded_over_length={rep.excluded}\t"
               f"dropped_fanout_gt2={rep.dropped_spans}\n")
    for label, rec in sorted(rep.recall.items(), key=lambda kv: kv[0]):
        out.append(f"recall\t{label}\t{rec:.2f}\n")
    text = "".join(out)
    sys.stdout.write(text)
    if args.report:
        _atomic_text(args.report, text)
    if args.figure:
        plots.f1_bars({name: (f, d) for name, f, d in rows}, args.figure)
    return EXIT_OK


def cmd_sample(args):
    from . import corpus
    from .grammar import normalize_random, save_grammar, sample

    seed = _seed(args)
    dims = GrammarDims(args.m1, args.m2, args.p, args.v)
    grammar = normalize_random(dims, args.grammar_seed, alpha=args.alpha)
    rng = np.random.default_rng(seed)
    texts, golds, rejected = [], [], 0
    while len(texts) < args.n:
        try:
            s = sample(grammar, rng, max_len=args.max_len, max_attempts=1)
        except SampleRejected:
            rejected += 1
            if rejected > 1000 * args.n:
                raise DataError("grammar rarely yields sentences within --max-len")
            continue
        gold = corpus.gold_from_sample(s)
        texts.append(" ".join(gold.words) + "\n")
        golds.append(corpus.format_discbracket(gold) + "\n")
    _atomic_text(args.out_text, "".join(texts))
    if args.out_gold:
        _atomic_text(args.out_gold, "".join(golds))
    if args.save_grammar:
        save_grammar(grammar, args.save_grammar)
    print(f"sentences={len(texts)}\trejected_over_length={rejected}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args):
    from .neural import xavier_init
    from .training import grad_check

    seed = _seed(args)
    dims = GrammarDims(args.m1, args.m2, args.p, args.v)
    params = xavier_init(dims, args.ranks, args.d, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    sentence = rng.integers(0, args.v, args.length).tolist()
    worst = grad_check(params, sentence, epsilon=args.eps, probes=args.probes, seed=seed)
    print(f"max_relative_error={worst:.3e}\ttolerance={args.tol:g}\tprobes={args.probes}")
    return EXIT_OK if worst <= args.tol else EXIT_NUMERIC


def cmd_bench(args):
    from . import plots
    from .bench import format_rows, run_bench

    seed = _seed(args)
    methods = tuple(m for m in args.methods.split(",") if m)
    rows = run_bench(lengths=args.lengths, m1=args.m1, m2=args.m2, p=args.p, v=args.v,
                     ranks=args.ranks, repeats=args.repeats, budget=args.budget, seed=seed,
                     methods=methods)
    text = format_rows(rows)
    sys.stdout.write(text)
    if args.out:
        _atomic_text(args.out, text)
    if args.figure:
        plots.scaling_plot(rows, args.figure)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="tnlcfrs", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a plain-text corpus")
    p.add_argument("--config")
    p.add_argument("--train", required=True)
    p.add_argument("--dev")
    p.add_argument("--dev-gold", help="discbracket dev set (needed for early_stop=f1)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab-size", type=int, default=10000)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value (repeatable)")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("parse", help="MBR-parse a plain-text corpus")
    p.add_argument("--model", required=True, help="checkpoint file or training directory")
    p.add_argument("--vocab")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--logz", help="optional TSV of per-sentence log Z")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("eval", help="unlabeled F1/DF1 of predicted trees")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--max-len", type=int, default=40)
    p.add_argument("--baselines", default="left,right,random")
    p.add_argument("--seed", type=int)
    p.add_argument("--report")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample a synthetic corpus with gold trees")
    p.add_argument("--m1", type=int, default=2)
    p.add_argument("--m2", type=int, default=2)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--v", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--grammar-seed", type=int, default=7)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-text", required=True)
    p.add_argument("--out-gold")
    p.add_argument("--save-grammar")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--ranks", type=_ints, default=(2, 2, 2, 2))
    p.add_argument("--m1", type=int, default=2)
    p.add_argument("--m2", type=int, default=2)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--v", type=int, default=20)
    p.add_argument("--length", type=int, default=5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time explicit and rank-space inside passes")
    p.add_argument("--lengths", type=_ints, default=(10, 20, 30, 40))
    p.add_argument("--m1", type=int, default=150)
    p.add_argument("--m2", type=int, default=150)
    p.add_argument("--p", type=int, default=450)
    p.add_argument("--v", type=int, default=1000)
    p.add_argument("--ranks", type=_ints, default=(400, 4, 400, 4))
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--budget", type=float, default=60.0,
                   help="seconds before an explicit run is cut off")
    p.add_argument("--methods", default="rank,explicit")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    from .corpus import DiscbracketError
    from .training import ConfigError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DiscbracketError, OSError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
