"""Command-line driver.

Verbs: ``train``, ``evaluate``, ``report``, ``examples``, ``pretrain-lm``,
``pretrain-made`` and ``synth-data``. Failures print one JSON line on stderr
(``{"error": <kind>, "message": <text>}``) and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, DualCycleError
from .experiment import (
    export_report,
    load_experiment_corpus,
    load_run_models,
    render_summary,
    run_experiment,
    show_cycle_examples,
)
from .models import pretrain_lm, pretrain_made, save_checkpoint

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep usage errors on the single-line contract
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value sections)")
    common.add_argument("--scheme", help="learning scheme: a, c-l or custom")
    common.add_argument("--seed", type=int, action="append", help="seed; repeat for several runs")
    common.add_argument("--data-dir", help="directory holding the train/test CSV files")
    common.add_argument("--out", help="run / output directory")
    common.add_argument("--subset", type=int, help="cap on training pairs")
    common.add_argument("--test-mrs", type=int, help="cap on distinct test MRs")
    common.add_argument("--epochs", type=int)
    common.add_argument("--no-warm-start", action="store_true", help="enable rewards from the first epoch")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dualcycle", description="Joint NLU/NLG training with primal and dual cycles.")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("train", parents=[common], help="train every seed and write the summary")
    sub.add_parser("evaluate", parents=[common], help="re-evaluate the last checkpoint of a run")
    sub.add_parser("report", parents=[common], help="(re)write summary.txt / summary.json of a run")
    ex = sub.add_parser("examples", parents=[common], help="print recorded cycle traces")
    ex.add_argument("--count", type=int, default=4)
    sub.add_parser("pretrain-lm", parents=[common], help="train the language-model reward")
    sub.add_parser("pretrain-made", parents=[common], help="train the MADE reward")
    sd = sub.add_parser("synth-data", parents=[common], help="write a synthetic corpus in E2E CSV format")
    sd.add_argument("--train-mrs", type=int, default=1500)
    sd.add_argument("--test-mrs-count", type=int, default=300)
    return p


def resolve_config(args) -> ExperimentConfig:
    """Config file (if any) with command-line flags layered on top."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.data
    if args.data_dir:
        data = replace(data, dir=args.data_dir)
    if args.subset is not None:
        data = replace(data, subset=args.subset)
    if args.test_mrs is not None:
        data = replace(data, test_mrs=args.test_mrs)
    train = dict(cfg.train)
    if args.epochs is not None:
        train["epochs"] = args.epochs
    if args.no_warm_start:
        train["rl_warmup_epochs"] = 0
    return ExperimentConfig(
        data=data,
        scheme=args.scheme or cfg.scheme,
        seeds=tuple(args.seed) if args.seed else cfg.seeds,
        out=args.out or cfg.out,
        train=train,
    )


def _run_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out <run directory> is required")
    return Path(args.out)


def _cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = run_experiment(cfg)
    sys.stdout.write((out / "summary.txt").read_text(encoding="utf-8"))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    run = _run_dir(args)
    trainer = load_run_models(run, args.seed[0] if args.seed else None)
    sys.stdout.write(trainer.evaluate().to_text())
    return EXIT_OK


def _cmd_report(args) -> int:
    summary = export_report(_run_dir(args))
    sys.stdout.write(render_summary(summary))
    return EXIT_OK


def _cmd_examples(args) -> int:
    sys.stdout.write(show_cycle_examples(_run_dir(args), args.count))
    return EXIT_OK


def _cmd_pretrain(args, which: str) -> int:
    cfg = resolve_config(args)
    out = _run_dir(args)
    corpus = load_experiment_corpus(cfg)
    tcfg = cfg.train_config(cfg.seeds[0])
    lh, vh = corpus.labels.fingerprint(), corpus.vocab.fingerprint()
    if which == "lm":
        model, hist = pretrain_lm([p.tokens for p in corpus.train], len(corpus.vocab), tcfg.lm_epochs,
                                  tcfg.batch_size, seed=tcfg.seed, embed=tcfg.embed, hidden=tcfg.hidden)
    else:
        model, hist = pretrain_made(np.stack([p.frame for p in corpus.train]), tcfg.made_epochs,
                                    tcfg.batch_size, seed=tcfg.seed, hidden=tcfg.made_hidden,
                                    n_orderings=tcfg.made_orderings)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model.params, out / which, lh, vh)
    for i, nll in enumerate(hist, 1):
        print(f"epoch {i} nll {nll:.6f}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    from .synth import write_corpus

    out = _run_dir(args)
    seed = args.seed[0] if args.seed else 2020
    write_corpus(out, train_mrs=args.train_mrs, test_mrs=args.test_mrs_count, seed=seed)
    print(f"wrote {out / 'trainset.csv'} and {out / 'testset_w_refs.csv'}")
    return EXIT_OK


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"error": kind, "message": " ".join(str(message).split())}, ensure_ascii=False)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "report": _cmd_report,
        "examples": _cmd_examples,
        "pretrain-lm": lambda a: _cmd_pretrain(a, "lm"),
        "pretrain-made": lambda a: _cmd_pretrain(a, "made"),
        "synth-data": _cmd_synth,
    }
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
        return EXIT_USAGE
    except DualCycleError as exc:
        print(_error_line(exc.kind, exc), file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(_error_line("io-error", f"{exc.filename}: {exc.strerror}"), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
