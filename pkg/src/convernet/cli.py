"""Command line: prepare, train, evaluate, predict, compare.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 internal error.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .baseline import FeatureSpec, featurize_all, lam_from_c, load_embeddings, load_linear, save_linear, squash, \
    train_linear
from .config import ATTENTION_KINDS, CELL_KINDS, LinearConfig, ModelConfig, load_kv
from .errors import CheckpointError, ConfigError, ConverNetError, DataError, MetricError, PairingError, VersionError
from .features import CONTEXT_DIM, FAMILIES, ablate
from .metrics import (METRICS, PredictionSet, accuracy, auc, average_precision, permutation_test, read_predictions,
                      write_predictions, write_report)
from .pipeline import CORPORA, PrepareOptions, load_prepared, prepare

log = logging.getLogger("convernet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CONTENT_ONLY = "context"  # --ablate value that removes every context input from the network
TEXT = "text"


class UsageError(ConverNetError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _families(text):
    return [f.strip() for f in text.split(",") if f.strip()] if text else []


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    if not os.path.isfile(path):
        raise DataError(f"{path} not found")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args):
    sizes = None
    if args.split_sizes:
        sizes = "preset" if args.split_sizes == "preset" else [int(x) for x in args.split_sizes.split(",")]
        if sizes != "preset" and len(sizes) != 3:
            raise UsageError("--split-sizes takes three comma-separated counts or 'preset'")
    opts = PrepareOptions(args.corpus, list(args.input or []), args.seed, args.min_freq, args.max_len, sizes,
                          n_threads=args.threads, lexicon=args.lexicon)
    rows = prepare(opts, args.out)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ConverNet / linear helpers


def _check_ablation(model, families):
    allowed = set(FAMILIES) | ({CONTENT_ONLY} if model == "convernet" else {"ngrams", "embeddings", TEXT})
    bad = [f for f in families if f not in allowed]
    if bad:
        raise UsageError(f"cannot ablate {bad} for the {model} model; choose from {sorted(allowed)}")


def ablate_instances(instances, families):
    """Copies of ``instances`` with the given context families switched off."""
    from dataclasses import replace

    fams = [f for f in families if f in FAMILIES]
    if not fams:
        return instances
    drop_bg = "background" in fams
    return [replace(i, context=ablate(i.context, fams), background=[0] * i.s if drop_bg else i.background)
            for i in instances]


def _convernet_config(args, prepared, ablation):
    cfg = load_kv(args.config, ModelConfig()) if args.config else ModelConfig()
    over = {"vocab_size": len(prepared.vocab), "d_context": CONTEXT_DIM, "n_backgrounds": prepared.n_backgrounds}
    if args.attention:
        over["attention"] = args.attention
    if args.cell:
        over["cell"] = args.cell
    if args.seed is not None:
        over["seed"] = args.seed
    if CONTENT_ONLY in ablation:
        over["use_context"] = False
    if "background" in ablation:
        over["n_backgrounds"] = 0
    return cfg.replace(**over).validate()


def _linear_setup(args_config, seed, prepared_meta, ablation, embeddings_path):
    lcfg = load_kv(args_config, LinearConfig(), cls=LinearConfig) if args_config else LinearConfig()
    if seed is not None:
        lcfg.seed = seed
    lcfg.validate()
    emb, emb_dim = (None, 0)
    if embeddings_path:
        emb, emb_dim = load_embeddings(embeddings_path)
    families = ["ngrams"] + (["embeddings"] if emb is not None else []) + list(prepared_meta.get("families", []))
    spec = FeatureSpec(tuple(families), lcfg.orders, lcfg.hash_dim, lcfg.bg_dim, emb_dim, lcfg.max_len)
    if ablation:
        spec = spec.without(*ablation)
    return lcfg, spec, emb


def _metric_rows(scores, labels, ids):
    rows = [("accuracy", accuracy(scores, labels))]
    try:
        rows += [("auc", auc(scores, labels)), ("map", average_precision(scores, labels, ids))]
    except MetricError as exc:
        log.warning("ranking metrics undefined: %s", exc)
        rows += [("auc", float("nan")), ("map", float("nan"))]
    return rows


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    from .train import evaluate, save_checkpoint, train, write_history

    prepared = load_prepared(args.data, ("train", "val"))
    ablation = _families(args.ablate)
    _check_ablation(args.model, ablation)
    os.makedirs(args.out, exist_ok=True)
    run = {"command": "train", "model": args.model, "data": os.path.abspath(args.data), "ablate": ablation,
           "corpus": prepared.meta.get("corpus"), "version": __version__}
    if args.model == "convernet":
        if args.embeddings:
            raise UsageError("--embeddings only applies to the linear model")
        from .layers import ConverNet

        cfg = _convernet_config(args, prepared, ablation)
        run["model_config"] = cfg.to_dict()
        _write_json(os.path.join(args.out, "config.json"), run)
        train_set = ablate_instances(prepared.splits["train"], ablation)
        val_set = ablate_instances(prepared.splits["val"], ablation)
        model = ConverNet(cfg)
        _, history = train(model, train_set, val_set, cfg,
                           on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  loss {r['train_loss']:.4f}  "
                                                    f"val_auc {r['val_auc']:.4f}"))
        save_checkpoint(model, os.path.join(args.out, "model"), history)
        write_history(history, os.path.join(args.out, "history.csv"))
        report, scores = evaluate(model, val_set, cfg)
        rows = [(k, report[k]) for k in ("accuracy", "auc", "map")]
    else:
        if args.attention or args.cell:
            raise UsageError("--attention/--cell only apply to the convernet model")
        lcfg, spec, emb = _linear_setup(args.config, args.seed, prepared.meta, ablation, args.embeddings)
        run["linear_config"] = lcfg.to_dict()
        run["feature_spec"] = spec.to_dict()
        run["embeddings"] = os.path.abspath(args.embeddings) if args.embeddings else None
        _write_json(os.path.join(args.out, "config.json"), run)
        tr, va = prepared.splits["train"], prepared.splits["val"]
        X = featurize_all(tr, spec, prepared.vocab, emb)
        y = np.array([i.label for i in tr])
        model = train_linear(X, y, spec, lam_from_c(lcfg.C, len(tr)), lcfg.epochs, lcfg.seed)
        save_linear(model, os.path.join(args.out, "linear.model"))
        with open(os.path.join(args.out, "history.csv"), "w", encoding="utf-8") as fh:
            fh.write("epoch,objective\n")
            for e, obj in enumerate(model.history, 1):
                fh.write(f"{e},{obj!r}\n")
        scores = squash(model.margins(featurize_all(va, spec, prepared.vocab, emb)))
        rows = _metric_rows(scores, np.array([i.label for i in va]), [i.instance_id for i in va])
    write_report(os.path.join(args.out, "val_metrics.csv"), rows)
    for k, v in rows:
        print(f"val_{k}  {v:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / predict


def _score_split(args):
    from .train import load_checkpoint, predict

    run = _read_json(os.path.join(args.model_dir, "config.json"))
    prepared = load_prepared(args.data, (args.split,))
    instances = prepared.splits[args.split]
    ablation = run.get("ablate", [])
    if run["model"] == "convernet":
        model, _ = load_checkpoint(os.path.join(args.model_dir, "model"))
        cfg = model.config
        if cfg.vocab_size != len(prepared.vocab) or (cfg.use_context and cfg.d_context != CONTEXT_DIM):
            raise VersionError(f"checkpoint expects vocab {cfg.vocab_size} / context {cfg.d_context}, data has "
                               f"vocab {len(prepared.vocab)} / context {CONTEXT_DIM}")
        instances = ablate_instances(instances, ablation)
        scores = predict(model, instances, cfg)
    else:
        model = load_linear(os.path.join(args.model_dir, "linear.model"))
        emb = None
        if "embeddings" in model.spec.families:
            emb, dim = load_embeddings(run["embeddings"])
            if dim != model.spec.emb_dim:
                raise VersionError(f"embedding file has {dim} dims, model expects {model.spec.emb_dim}")
        scores = squash(model.margins(featurize_all(instances, model.spec, prepared.vocab, emb)))
    pset = PredictionSet([i.instance_id for i in instances], scores, [i.label for i in instances])
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"),
                {"command": args.command, "model_dir": os.path.abspath(args.model_dir),
                 "data": os.path.abspath(args.data), "split": args.split, "train_config": run,
                 "version": __version__})
    write_predictions(os.path.join(args.out, "predictions.csv"), pset)
    return pset


def cmd_predict(args):
    pset = _score_split(args)
    print(f"wrote {len(pset)} predictions to {os.path.join(args.out, 'predictions.csv')}")
    return EXIT_OK


def cmd_evaluate(args):
    pset = _score_split(args)
    rows = _metric_rows(pset.scores, pset.labels, pset.ids)
    counts = [("n_instances", len(pset)), ("n_positive", int(pset.labels.sum()))]
    write_report(os.path.join(args.out, "report.csv"), rows + counts)
    for k, v in rows:
        print(f"{k:<9} {v:.6f}")
    for k, v in counts:
        print(f"{k:<9} {v}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args):
    if len(args.input) != 2:
        raise UsageError("compare takes exactly two prediction files via --input A B")
    a, b = (read_predictions(p) for p in args.input)
    res = permutation_test(a, b, args.metric, args.rounds, args.seed)
    rows = [("metric", res.metric), ("value_a", res.value_a), ("value_b", res.value_b), ("delta_a_minus_b", res.delta),
            ("p_value", res.p_value), ("stars", res.stars), ("rounds", res.n_rounds), ("seed", args.seed)]
    for k, v in rows:
        print(f"{k:<16} {v:.6f}" if isinstance(v, float) else f"{k:<16} {v}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "compare.csv"), "w", encoding="utf-8") as fh:
            fh.write("field,value\n")
            for k, v in rows:
                fh.write(f"{k},{v!r}\n" if isinstance(v, float) else f"{k},{v}\n")
        _write_json(os.path.join(args.out, "config.json"),
                    {"command": "compare", "inputs": [os.path.abspath(p) for p in args.input],
                     "metric": args.metric, "rounds": args.rounds, "seed": args.seed, "version": __version__})
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="convernet", description="Predict thread-ending posts in online conversations.")
    p.add_argument("--version", action="version", version=f"convernet {__version__}")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    sp = sub.add_parser("prepare", help="parse a corpus and write instance caches")
    sp.add_argument("--corpus", choices=CORPORA, required=True)
    sp.add_argument("--input", nargs="+", metavar="PATH",
                    help="reddit: posts.jsonl; movie: movie_lines.txt movie_conversations.txt")
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--min-freq", type=int, default=5)
    sp.add_argument("--max-len", type=int, default=20)
    sp.add_argument("--split-sizes", metavar="TRAIN,VAL,TEST", help="thread counts per split, or 'preset'")
    sp.add_argument("--threads", type=int, default=2000, help="synthetic corpus size")
    sp.add_argument("--lexicon", metavar="PATH", help="token<TAB>valence file (default: bundled)")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train ConverNet or the linear baseline")
    sp.add_argument("--data", required=True, metavar="DIR", help="prepared data directory")
    sp.add_argument("--out", required=True, metavar="DIR")
    sp.add_argument("--model", choices=("convernet", "linear"), default="convernet")
    sp.add_argument("--attention", choices=ATTENTION_KINDS)
    sp.add_argument("--cell", choices=CELL_KINDS)
    sp.add_argument("--ablate", metavar="FAMILY[,FAMILY]")
    sp.add_argument("--config", metavar="PATH", help="key=value overrides")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--embeddings", metavar="PATH", help="pretrained word vectors (linear model)")
    sp.set_defaults(func=cmd_train)

    for name, func, text in (("evaluate", cmd_evaluate, "score a split and report metrics"),
                             ("predict", cmd_predict, "score a split")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--data", required=True, metavar="DIR")
        sp.add_argument("--model-dir", required=True, metavar="DIR", help="output directory of a train run")
        sp.add_argument("--out", required=True, metavar="DIR")
        sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        sp.set_defaults(func=func)

    sp = sub.add_parser("compare", help="paired permutation test of two prediction files")
    sp.add_argument("--input", nargs="+", required=True, metavar="CSV")
    sp.add_argument("--metric", choices=tuple(METRICS), default="auc")
    sp.add_argument("--rounds", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", metavar="DIR")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"convernet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PairingError, MetricError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"convernet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.debug("internal error", exc_info=True)
        print(f"convernet: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
