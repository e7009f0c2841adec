"""Multi-seed experiment runs and their on-disk artifacts.

A run directory looks like::

    <out>/config.ini          canonical echo of the experiment config
    <out>/manifest.txt        dataset manifest (sizes, labels, vocabulary)
    <out>/seed-<n>/reward/    pretrained LM / MADE checkpoints, when needed
    <out>/seed-<n>/epoch-<k>/ checkpoints, report.{txt,json}, traces.json
    <out>/summary.{txt,json}  seed-averaged final scores
"""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig, parse_config
from .data import Corpus, git_blob_hash, load_corpus
from .errors import ContractError
from .metrics import COLUMN_TITLES, REPORT_COLUMNS, EvalReport
from .models import load_checkpoint, pretrain_lm, pretrain_made, save_checkpoint
from .trainer import CycleTrace, DualTrainer, make_scheme

log = logging.getLogger(__name__)

REPORT_FILES = ("nlg.manifest", "nlg.bin", "nlu.manifest", "nlu.bin", "report.txt", "report.json", "traces.json")


def percent(value: float) -> str:
    """Score in [0, 1] as a percentage with 2 decimals, ties to even.

    The decimal expansion of the float's shortest repr is rounded, so 0.80035
    becomes 80.04 (the tie 80.035 goes to the even last digit).
    """
    return str((Decimal(repr(float(value))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def load_experiment_corpus(cfg: ExperimentConfig) -> Corpus:
    d = cfg.data
    return load_corpus(d.dir, d.train_file, d.test_file, max_len=d.max_len, min_freq=d.min_freq,
                       train_subset=d.subset, test_mrs=d.test_mrs)


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed-{seed}"


def reward_models(trainer_cfg, corpus: Corpus, reward_dir: Path | None = None):
    """Pretrain the LM / MADE reward models a scheme needs (else ``None``)."""
    scheme = make_scheme(trainer_cfg)
    lm = made = None
    lh, vh = corpus.labels.fingerprint(), corpus.vocab.fingerprint()
    if scheme.needs_lm:
        lm, hist = pretrain_lm([p.tokens for p in corpus.train], len(corpus.vocab), trainer_cfg.lm_epochs,
                               trainer_cfg.batch_size, seed=trainer_cfg.seed, embed=trainer_cfg.embed,
                               hidden=trainer_cfg.hidden)
        log.info("LM pretraining NLL per epoch: %s", hist)
        if reward_dir:
            reward_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(lm.params, reward_dir / "lm", lh, vh)
    if scheme.needs_made:
        made, hist = pretrain_made(np.stack([p.frame for p in corpus.train]), trainer_cfg.made_epochs,
                                   trainer_cfg.batch_size, seed=trainer_cfg.seed,
                                   hidden=trainer_cfg.made_hidden, n_orderings=trainer_cfg.made_orderings)
        log.info("MADE pretraining NLL per epoch: %s", hist)
        if reward_dir:
            reward_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(made.params, reward_dir / "made", lh, vh)
    return lm, made


def run_experiment(cfg: ExperimentConfig, corpus: Corpus | None = None) -> Path:
    """Train every seed, then write the summary. Returns the run directory."""
    corpus = corpus or load_experiment_corpus(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    (out / "manifest.txt").write_text(corpus.manifest(), encoding="utf-8")
    for seed in cfg.seeds:
        tcfg = cfg.train_config(seed)
        sdir = _seed_dir(out, seed)
        lm, made = reward_models(tcfg, corpus, sdir / "reward")
        trainer = DualTrainer(corpus, tcfg, lm=lm, made=made)
        frozen = [m.params.fingerprint() for m in (lm, made) if m is not None]
        trainer.train(sdir)
        if [m.params.fingerprint() for m in (lm, made) if m is not None] != frozen:
            raise ContractError("a reward model changed during training")
    export_report(out)
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _final_epoch_dir(sdir: Path, epochs: int) -> Path:
    return sdir / f"epoch-{epochs:02d}"


def missing_artifacts(run_dir: str | Path) -> list[str]:
    run = Path(run_dir)
    missing = [n for n in ("config.ini", "manifest.txt") if not (run / n).is_file()]
    if "config.ini" in missing:
        return missing
    cfg = parse_config((run / "config.ini").read_text(encoding="utf-8"), str(run / "config.ini"))
    epochs = cfg.train_config(cfg.seeds[0]).epochs
    for seed in cfg.seeds:
        for k in range(1, epochs + 1):
            edir = _seed_dir(run, seed) / f"epoch-{k:02d}"
            for name in REPORT_FILES:
                if not (edir / name).is_file():
                    missing.append(str((edir / name).relative_to(run)))
    return missing


def export_report(run_dir: str | Path) -> dict:
    """Write ``summary.txt`` and ``summary.json`` for a finished run."""
    run = Path(run_dir)
    missing = missing_artifacts(run)
    if missing:
        raise ContractError(f"incomplete run directory {run}: missing {', '.join(missing)}")
    cfg = parse_config((run / "config.ini").read_text(encoding="utf-8"), str(run / "config.ini"))
    epochs = cfg.train_config(cfg.seeds[0]).epochs
    manifest = (run / "manifest.txt").read_text(encoding="utf-8")

    per_seed, sources = {}, {}
    for seed in cfg.seeds:
        path = _final_epoch_dir(_seed_dir(run, seed), epochs) / "report.json"
        rep = EvalReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
        per_seed[str(seed)] = {c: getattr(rep, c) for c in REPORT_COLUMNS}
        sources[str(seed)] = path.relative_to(run).as_posix()
    mean = {c: float(np.mean([per_seed[str(s)][c] for s in cfg.seeds])) for c in REPORT_COLUMNS}
    summary = {
        "scheme": cfg.scheme,
        "seeds": list(cfg.seeds),
        "epochs": epochs,
        "columns": [COLUMN_TITLES[c] for c in REPORT_COLUMNS],
        "mean": mean,
        "mean_percent": {c: percent(mean[c]) for c in REPORT_COLUMNS},
        "per_seed": per_seed,
        "per_seed_percent": {s: {c: percent(v) for c, v in r.items()} for s, r in per_seed.items()},
        "sources": sources,
        "dataset_manifest_sha1": git_blob_hash(manifest),
        "config": cfg.to_text(),
    }
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (run / "summary.txt").write_text(render_summary(summary), encoding="utf-8")
    return summary


def load_summary(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def render_summary(summary: dict) -> str:
    cols = list(REPORT_COLUMNS)
    titles = summary["columns"]
    widths = [max(len(t), 6) for t in titles]
    head = "| Row  | " + " | ".join(t.rjust(w) for t, w in zip(titles, widths)) + " |"
    rule = "|------|" + "|".join("-" * (w + 2) for w in widths) + "|"

    def row(label, vals):
        return f"| {label:<4} | " + " | ".join(vals[c].rjust(w) for c, w in zip(cols, widths)) + " |"

    lines = [f"scheme ({summary['scheme']}), {summary['epochs']} epoch(s), scores in %",
             "", head, rule, row(f"({summary['scheme']})", summary["mean_percent"]), "",
             "per seed:"]
    for s in map(str, summary["seeds"]):
        lines.append(row(s, summary["per_seed_percent"][s]))
    lines += ["", f"dataset manifest: {summary['dataset_manifest_sha1']}", "", "config:",
              *("  " + l if l else "" for l in summary["config"].splitlines())]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# cycle examples
# ---------------------------------------------------------------------------

_STAGES = {
    "primal": ("x", "y", "f(x)", "g(f(x))"),
    "dual": ("y", "x", "g(y)", "f(g(y))"),
}
EXACT_MARK = "exact reconstruction"


def latest_traces(run_dir: str | Path) -> list[CycleTrace]:
    """Traces of the last recorded epoch of the first seed directory."""
    run = Path(run_dir)
    seeds = sorted(p for p in run.glob("seed-*") if p.is_dir())
    for sdir in seeds:
        epochs = sorted(p for p in sdir.glob("epoch-*") if (p / "traces.json").is_file())
        if epochs:
            raw = json.loads((epochs[-1] / "traces.json").read_text(encoding="utf-8"))
            return [CycleTrace(**t) for t in raw]
    return []


def render_traces(traces: Sequence[CycleTrace]) -> str:
    blocks = []
    for t in traces:
        names = _STAGES[t.cycle]
        width = max(map(len, names))
        head = f"[{t.cycle}]" + (f" {EXACT_MARK}" if t.exact else "")
        vals = (t.input, t.reference, t.intermediate, t.reconstructed)
        blocks.append("\n".join([head, *(f"  {n.ljust(width)} : {v}" for n, v in zip(names, vals))]))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def show_cycle_examples(run_dir: str | Path, count: int = 4) -> str:
    traces = latest_traces(run_dir)
    # traces alternate primal/dual per sample
    return render_traces(traces[: 2 * max(count, 0)])


def load_run_models(run_dir: str | Path, seed: int | None = None, corpus: Corpus | None = None):
    """Rebuild the trainer of a finished seed from its last checkpoint."""
    run = Path(run_dir)
    cfg = parse_config((run / "config.ini").read_text(encoding="utf-8"), str(run / "config.ini"))
    seed = cfg.seeds[0] if seed is None else seed
    corpus = corpus or load_experiment_corpus(cfg)
    tcfg = cfg.train_config(seed)
    sdir = _seed_dir(run, seed)
    epochs = sorted(p for p in sdir.glob("epoch-*") if (p / "nlg.manifest").is_file())
    if not epochs:
        raise ContractError(f"no checkpoints under {sdir}")
    if make_scheme(tcfg).l1.reinforced:
        # reward models only matter during training; evaluate with the plain joint
        tcfg = replace(tcfg, scheme="custom", nlg_reward=None, nlu_reward=None, reward_placement=None)
    trainer = DualTrainer(corpus, tcfg)
    lh, vh = corpus.labels.fingerprint(), corpus.vocab.fingerprint()
    load_checkpoint(trainer.nlg.params, epochs[-1] / "nlg", lh, vh)
    load_checkpoint(trainer.nlu.params, epochs[-1] / "nlu", lh, vh)
    return trainer
