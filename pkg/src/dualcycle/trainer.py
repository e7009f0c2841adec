"""Joint training of NLG (frame -> text) and NLU (text -> frame).

Each mini-batch runs a primal cycle ``x -> f(x) -> g(f(x))`` and then a dual
cycle ``y -> g(y) -> f(g(y))``. Within a cycle the two losses are summed and
differentiated once: the model that acts first receives the gradient of both
losses (the second one flows back through the joint), while the model that
acts second only ever sees its own loss, since the first loss does not depend
on it. Each model then takes an Adam step with its own learning rate.

Learning schemes mirror the rows of the results table: ``a`` trains the two
models separately, ``c``-``f`` pick straight-through or distribution joints,
and ``g``-``l`` add a REINFORCE term on top of ``f``.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .coupling import DISTRIBUTION, STRAIGHT_THROUGH, CouplingMode, couple_frame, couple_tokens
from .data import Batch, Corpus, DataPair, batch_iter, collate
from .errors import ConfigError, EmptyDatasetError, NonFiniteLossError
from .metrics import EvalReport, bleu, corpus_rouge, micro_f1
from .models import NlgModel, NluModel, RnnLm, MadeEstimator, save_checkpoint
from .objectives import (
    LossSpec,
    RewardSpec,
    RunningBaseline,
    bernoulli_logp,
    reinforce_loss,
    reward_auto_metric_nlg,
    reward_auto_metric_nlu,
    reward_lm,
    reward_made,
    reward_reconstruction_frame,
    reward_reconstruction_tokens,
    sample_bernoulli,
    supervised_loss_nlg,
    supervised_loss_nlu,
)
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

SCHEME_IDS = ("a", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "custom")
MODES = ("supervised", "unsupervised", "semi")

# NLG-side / NLU-side reward family for the RL rows
_RL_ROWS = {
    "g": ("reconstruction", "reconstruction", "mid"),
    "h": ("reconstruction", "reconstruction", "end"),
    "i": ("auto_metric", "auto_metric", "mid"),
    "j": ("auto_metric", "auto_metric", "end"),
    "k": ("lm", "made", "mid"),
    "l": ("lm", "made", "end"),
}
_JOINT_ROWS = {
    "c": (STRAIGHT_THROUGH, STRAIGHT_THROUGH),
    "d": (DISTRIBUTION, STRAIGHT_THROUGH),
    "e": (STRAIGHT_THROUGH, DISTRIBUTION),
    "f": (DISTRIBUTION, DISTRIBUTION),
}


@dataclass
class TrainConfig:
    scheme: str = "f"
    lr_nlg: float = 1e-3          # learning rate of the NLG parameters
    lr_nlu: float = 1e-3          # learning rate of the NLU parameters
    batch_size: int = 64
    epochs: int = 10
    seed: int = 13
    hidden: int = 200
    embed: int = 50
    max_len: int = 60
    tf_ratio: float = 1.0
    clip_norm: float | None = 5.0
    threshold: float = 0.5
    share_embeddings: bool = False
    mode: str = "supervised"
    paired_fraction: float = 0.5  # semi mode only
    primal_feed: str = "generated"  # what NLU reads in the primal cycle
    sup_weight: float = 1.0
    rl_weight: float = 0.1
    baseline_decay: float | None = 0.95
    rl_warmup_epochs: int = 2
    # custom scheme knobs
    nlg_output_mode: str = DISTRIBUTION
    nlu_output_mode: str = DISTRIBUTION
    joint: bool = True
    nlg_reward: str | None = None
    nlu_reward: str | None = None
    reward_placement: str | None = None
    # reward models
    lm_epochs: int = 5
    made_epochs: int = 20
    made_hidden: int = 200
    made_orderings: int = 5
    # bookkeeping
    trace_samples: int = 4
    eval_threads: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEME_IDS:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEME_IDS)}")
        if self.lr_nlg < 0 or self.lr_nlu < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.primal_feed not in ("generated", "teacher_forced"):
            raise ConfigError(f"unknown primal_feed {self.primal_feed!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LearningScheme:
    id: str
    joint: bool
    coupling: CouplingMode | None
    l1: LossSpec  # NLG side
    l2: LossSpec  # NLU side

    @property
    def placement(self) -> str | None:
        return self.l1.reward.placement if self.l1.reward else None

    @property
    def needs_lm(self) -> bool:
        return self.l1.reward is not None and self.l1.reward.family == "lm"

    @property
    def needs_made(self) -> bool:
        return self.l2.reward is not None and self.l2.reward.family == "made"


def make_scheme(cfg: TrainConfig) -> LearningScheme:
    sid = cfg.scheme
    if sid == "a":
        return LearningScheme("a", False, None, LossSpec("cross_entropy"), LossSpec("binary_cross_entropy"))
    if sid in _JOINT_ROWS:
        return LearningScheme(sid, True, CouplingMode(*_JOINT_ROWS[sid]),
                              LossSpec("cross_entropy"), LossSpec("binary_cross_entropy"))
    if sid in _RL_ROWS:
        g_fam, u_fam, place = _RL_ROWS[sid]
        return LearningScheme(
            sid, True, CouplingMode(DISTRIBUTION, DISTRIBUTION),
            LossSpec("hybrid", RewardSpec(g_fam, place), cfg.sup_weight, cfg.rl_weight),
            LossSpec("hybrid", RewardSpec(u_fam, place), cfg.sup_weight, cfg.rl_weight),
        )
    # custom
    coupling = CouplingMode(cfg.nlg_output_mode, cfg.nlu_output_mode) if cfg.joint else None
    if cfg.nlg_reward or cfg.nlu_reward:
        if not cfg.joint:
            raise ConfigError("reward terms need a joint scheme")
        if not (cfg.nlg_reward and cfg.nlu_reward and cfg.reward_placement):
            raise ConfigError("custom RL needs nlg_reward, nlu_reward and reward_placement")
        l1 = LossSpec("hybrid", RewardSpec(cfg.nlg_reward, cfg.reward_placement), cfg.sup_weight, cfg.rl_weight)
        l2 = LossSpec("hybrid", RewardSpec(cfg.nlu_reward, cfg.reward_placement), cfg.sup_weight, cfg.rl_weight)
    else:
        l1, l2 = LossSpec("cross_entropy"), LossSpec("binary_cross_entropy")
    return LearningScheme("custom", cfg.joint, coupling, l1, l2)


@dataclass
class CycleTrace:
    cycle: str               # "primal" or "dual"
    input: str
    reference: str           # the paired other side (y for primal, x for dual)
    intermediate: str
    reconstructed: str
    losses: dict = field(default_factory=dict)
    rewards: dict = field(default_factory=dict)

    @property
    def exact(self) -> bool:
        return self.input == self.reconstructed


@dataclass
class StepResult:
    losses: dict[str, float]

    def __getitem__(self, k):
        return self.losses[k]


def _feedback_for(mode: str) -> str:
    return "straight_through" if mode == STRAIGHT_THROUGH else "distribution"


def _as_label_sets(frames: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero(f >= 0.5).tolist()) for f in frames]


def _check_finite(parts: dict[str, float], where: dict) -> None:
    bad = {k: v for k, v in parts.items() if not np.isfinite(v)}
    if bad:
        raise NonFiniteLossError(f"non-finite loss {bad} at {where}", {"losses": parts, **where})


class DualTrainer:
    def __init__(self, corpus: Corpus, config: TrainConfig | None = None,
                 lm: RnnLm | None = None, made: MadeEstimator | None = None):
        self.corpus = corpus
        self.cfg = cfg = config or TrainConfig()
        self.scheme = make_scheme(cfg)
        D, V = corpus.n_labels, len(corpus.vocab)
        self.nlg = NlgModel(D, V, cfg.embed, cfg.hidden, seed=[cfg.seed, 1])
        self.nlu = NluModel(V, D, cfg.embed, cfg.hidden, seed=[cfg.seed, 2],
                            shared_embedding=self.nlg.embedding if cfg.share_embeddings else None)
        for store in (self.nlg.params, self.nlu.params):
            store.clip_norm = cfg.clip_norm
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.lm, self.made = lm, made
        if self.scheme.needs_lm and lm is None:
            raise ConfigError(f"scheme {self.scheme.id} needs a pretrained language model")
        if self.scheme.needs_made and made is None:
            raise ConfigError(f"scheme {self.scheme.id} needs a pretrained MADE estimator")
        self._baselines: dict[tuple[str, str], RunningBaseline] = {}
        self.epoch = 0
        self.history: list[dict] = []

    # ------------------------------------------------------------------ helpers

    @property
    def coupling(self) -> CouplingMode:
        if self.scheme.coupling is None:
            raise ConfigError(f"scheme {self.scheme.id} has no joint between the models")
        return self.scheme.coupling

    def _baseline(self, side: str, family: str) -> RunningBaseline:
        key = (side, family)
        if key not in self._baselines:
            self._baselines[key] = RunningBaseline(self.cfg.baseline_decay)
        return self._baselines[key]

    def rl_active(self) -> bool:
        return self.scheme.l1.reinforced and self.epoch >= self.cfg.rl_warmup_epochs

    def _update(self, loss: Tensor, nlg: bool, nlu: bool) -> None:
        self.nlg.params.zero_grad()
        self.nlu.params.zero_grad()
        backward(loss)
        if nlg:
            self.nlg.params.adam_update(self.cfg.lr_nlg)
        if nlu:
            self.nlu.params.adam_update(self.cfg.lr_nlu)
        self.nlg.params.zero_grad()
        self.nlu.params.zero_grad()

    def _words(self, ids: Sequence[int]) -> list[str]:
        return self.corpus.vocab.decode(ids)

    def _refs(self, key: str) -> list[list[str]]:
        refs = self.corpus.train_refs.get(key) or self.corpus.test_refs.get(key)
        return refs or []

    # ------------------------------------------------------------------ NLG / NLU passes

    def _generate(self, frame: Tensor, mode: str):
        """Free-running f(x) with the joint's feedback form; returns the
        per-step inputs for NLU and their mask."""
        res = self.nlg.decode(frame, self.cfg.max_len, "greedy", _feedback_for(mode))
        return [couple_tokens(p, mode) for p in res.probs], res.content_mask, res

    # ------------------------------------------------------------------ rewards

    def _nlg_decision_reward(self, family: str, sampled, batch: Batch, cycle: str, nlg_frame) -> np.ndarray:
        B = batch.size
        seqs = [sampled.content(i) for i in range(B)]
        if family == "auto_metric":
            return np.array([reward_auto_metric_nlg(self._words(s), self._refs(k))
                             for s, k in zip(seqs, batch.keys)])
        if family == "lm":
            return reward_lm(self.lm, seqs, strict=False)
        if family == "reconstruction":
            with no_grad():
                if cycle == "primal":
                    # log p(x | sampled sentence) under NLU
                    ids = sampled.tokens
                    probs = self.nlu.forward_tokens(ids, sampled.content_mask).data
                    return reward_reconstruction_frame(probs, batch.frames)
                # dual cycle, NLG acts last: log p(y | g(y)) under NLG
                dists = self.nlg.teacher_forced(Tensor(nlg_frame), batch.inputs)
                return reward_reconstruction_tokens(dists, batch.targets, batch.mask)
        raise ConfigError(f"reward family {family!r} does not apply to NLG decisions")

    def _nlu_decision_reward(self, family: str, sample: np.ndarray, probs: np.ndarray, batch: Batch,
                             cycle: str) -> np.ndarray:
        if family == "auto_metric":
            return np.array([reward_auto_metric_nlu(p, g) for p, g in
                             zip(_as_label_sets(sample), _as_label_sets(batch.frames))])
        if family == "made":
            return reward_made(self.made, sample)
        if family == "reconstruction":
            if cycle == "primal":
                # NLU acts last: log p(x | f(x)) under NLU
                return reward_reconstruction_frame(probs, batch.frames)
            with no_grad():
                dists = self.nlg.teacher_forced(Tensor(sample), batch.inputs)
            return reward_reconstruction_tokens(dists, batch.targets, batch.mask)
        raise ConfigError(f"reward family {family!r} does not apply to NLU decisions")

    def _rl_on_nlg(self, frame: Tensor, batch: Batch, cycle: str, family: str) -> tuple[Tensor, np.ndarray]:
        sampled = self.nlg.decode(frame, self.cfg.max_len, "sample", "token", self.rng)
        r = self._nlg_decision_reward(family, sampled, batch, cycle, frame.data)
        sig = self._baseline("nlg", family)(r, family)
        return reinforce_loss(sampled.sequence_logp(), sig), r

    def _rl_on_nlu(self, probs: Tensor, batch: Batch, cycle: str, family: str) -> tuple[Tensor, np.ndarray]:
        sample = sample_bernoulli(probs.data, self.rng)
        r = self._nlu_decision_reward(family, sample, probs.data, batch, cycle)
        sig = self._baseline("nlu", family)(r, family)
        return reinforce_loss(bernoulli_logp(probs, sample), sig), r

    # ------------------------------------------------------------------ cycle losses

    def primal_losses(self, batch: Batch, detach_joint: bool = False, use_l1: bool = True,
                      rl: bool | None = None) -> tuple[Tensor, dict]:
        """Loss graph of one primal cycle (scheme must be joint)."""
        cfg, mode = self.cfg, self.coupling
        x = Tensor(batch.frames)
        parts: dict[str, float] = {}
        total = None
        w = self.scheme.l1.weight
        if use_l1:
            dists = self.nlg.teacher_forced(x, batch.inputs, cfg.tf_ratio,
                                            _feedback_for(mode.nlg_output_mode), self.rng)
            l1 = supervised_loss_nlg(dists, batch.targets, batch.mask)
            parts["l1"] = l1.item()
            total = l1 * w
        if cfg.primal_feed == "generated" or not use_l1:
            nlu_in, nlu_mask, _ = self._generate(x, mode.nlg_output_mode)
        else:
            nlu_in = [couple_tokens(d, mode.nlg_output_mode) for d in dists]
            nlu_mask = batch.content_mask
        if detach_joint:
            nlu_in = [t.detach() for t in nlu_in]
        probs = self.nlu.forward_dists(nlu_in, nlu_mask)
        l2 = supervised_loss_nlu(probs, batch.frames)
        parts["l2"] = l2.item()
        total = l2 * self.scheme.l2.weight if total is None else total + l2 * self.scheme.l2.weight
        if rl if rl is not None else self.rl_active():
            place = self.scheme.placement
            if place == "mid":
                fam = self.scheme.l1.reward.family
                term, r = self._rl_on_nlg(x, batch, "primal", fam)
                weight = self.scheme.l1.reward_weight
            else:
                fam = self.scheme.l2.reward.family
                term, r = self._rl_on_nlu(probs, batch, "primal", fam)
                weight = self.scheme.l2.reward_weight
            parts["rl"] = term.item()
            parts["reward"] = float(r.mean())
            total = total + term * weight
        return total, parts

    def dual_losses(self, batch: Batch, detach_joint: bool = False, use_l2: bool = True,
                    rl: bool | None = None) -> tuple[Tensor, dict]:
        cfg, mode = self.cfg, self.coupling
        parts: dict[str, float] = {}
        probs = self.nlu.forward_tokens(batch.targets, batch.content_mask)
        total = None
        if use_l2:
            l2 = supervised_loss_nlu(probs, batch.frames)
            parts["l2"] = l2.item()
            total = l2 * self.scheme.l2.weight
        cond = couple_frame(probs, mode.nlu_output_mode, cfg.threshold)
        if detach_joint:
            cond = cond.detach()
        dists = self.nlg.teacher_forced(cond, batch.inputs, cfg.tf_ratio,
                                        _feedback_for(mode.nlg_output_mode), self.rng)
        l1 = supervised_loss_nlg(dists, batch.targets, batch.mask)
        parts["l1"] = l1.item()
        total = l1 * self.scheme.l1.weight if total is None else total + l1 * self.scheme.l1.weight
        if rl if rl is not None else self.rl_active():
            place = self.scheme.placement
            if place == "mid":
                fam = self.scheme.l2.reward.family
                term, r = self._rl_on_nlu(probs, batch, "dual", fam)
                weight = self.scheme.l2.reward_weight
            else:
                fam = self.scheme.l1.reward.family
                term, r = self._rl_on_nlg(cond, batch, "dual", fam)
                weight = self.scheme.l1.reward_weight
            parts["rl"] = term.item()
            parts["reward"] = float(r.mean())
            total = total + term * weight
        return total, parts

    # ------------------------------------------------------------------ steps

    def primal_cycle_step(self, batch: Batch) -> StepResult:
        where = {"cycle": "primal", "epoch": self.epoch}
        if not self.scheme.joint:
            x = Tensor(batch.frames)
            dists = self.nlg.teacher_forced(x, batch.inputs, self.cfg.tf_ratio, "distribution", self.rng)
            l1 = supervised_loss_nlg(dists, batch.targets, batch.mask)
            parts = {"l1": l1.item()}
            _check_finite(parts, where)
            self._update(l1, nlg=True, nlu=False)
            return StepResult(parts)
        total, parts = self.primal_losses(batch)
        _check_finite(parts, where)
        self._update(total, nlg=True, nlu=True)
        return StepResult(parts)

    def dual_cycle_step(self, batch: Batch) -> StepResult:
        where = {"cycle": "dual", "epoch": self.epoch}
        if not self.scheme.joint:
            probs = self.nlu.forward_tokens(batch.targets, batch.content_mask)
            l2 = supervised_loss_nlu(probs, batch.frames)
            parts = {"l2": l2.item()}
            _check_finite(parts, where)
            self._update(l2, nlg=False, nlu=True)
            return StepResult(parts)
        total, parts = self.dual_losses(batch)
        _check_finite(parts, where)
        self._update(total, nlg=True, nlu=True)
        return StepResult(parts)

    def unsupervised_primal_step(self, frames: np.ndarray) -> StepResult:
        """Autoencode frames: only the reconstruction loss at the end of the cycle."""
        mode = self.coupling
        x = Tensor(np.asarray(frames, dtype=float))
        nlu_in, mask, _ = self._generate(x, mode.nlg_output_mode)
        probs = self.nlu.forward_dists(nlu_in, mask)
        l2 = supervised_loss_nlu(probs, x.data)
        parts = {"l2": l2.item()}
        _check_finite(parts, {"cycle": "unsupervised-primal", "epoch": self.epoch})
        self._update(l2, nlg=True, nlu=True)
        return StepResult(parts)

    def unsupervised_dual_step(self, batch: Batch) -> StepResult:
        """Autoencode utterances; ``batch.frames`` is ignored."""
        mode = self.coupling
        probs = self.nlu.forward_tokens(batch.targets, batch.content_mask)
        cond = couple_frame(probs, mode.nlu_output_mode, self.cfg.threshold)
        dists = self.nlg.teacher_forced(cond, batch.inputs, self.cfg.tf_ratio,
                                        _feedback_for(mode.nlg_output_mode), self.rng)
        l1 = supervised_loss_nlg(dists, batch.targets, batch.mask)
        parts = {"l1": l1.item()}
        _check_finite(parts, {"cycle": "unsupervised-dual", "epoch": self.epoch})
        self._update(l1, nlg=True, nlu=True)
        return StepResult(parts)

    def unsupervised_losses(self, frames: np.ndarray | None = None, batch: Batch | None = None) -> dict:
        """Reconstruction losses without any update (for monitoring)."""
        out = {}
        mode = self.coupling
        with no_grad():
            if frames is not None:
                x = Tensor(np.asarray(frames, dtype=float))
                nlu_in, mask, _ = self._generate(x, mode.nlg_output_mode)
                out["l2"] = supervised_loss_nlu(self.nlu.forward_dists(nlu_in, mask), x.data).item()
            if batch is not None:
                probs = self.nlu.forward_tokens(batch.targets, batch.content_mask)
                cond = couple_frame(probs, mode.nlu_output_mode, self.cfg.threshold)
                dists = self.nlg.teacher_forced(cond, batch.inputs)
                out["l1"] = supervised_loss_nlg(dists, batch.targets, batch.mask).item()
        return out

    # ------------------------------------------------------------------ gradient accounting

    def cycle_gradients(self, batch: Batch, cycle: str, detach_joint: bool = False,
                        include_first: bool = True) -> dict[str, dict[str, np.ndarray]]:
        """Gradients a cycle would apply, without updating anything.

        ``include_first=False`` drops the loss of the model that acts first
        (l1 in the primal cycle, l2 in the dual cycle).
        """
        self.nlg.params.zero_grad()
        self.nlu.params.zero_grad()
        if cycle == "primal":
            total, _ = self.primal_losses(batch, detach_joint, use_l1=include_first, rl=False)
        else:
            total, _ = self.dual_losses(batch, detach_joint, use_l2=include_first, rl=False)
        backward(total)
        grads = {"nlg": self.nlg.params.grads(), "nlu": self.nlu.params.grads()}
        self.nlg.params.zero_grad()
        self.nlu.params.zero_grad()
        return grads

    # ------------------------------------------------------------------ epochs

    def _unpaired_pools(self) -> tuple[list[DataPair], list[DataPair], list[DataPair]]:
        pairs = self.corpus.train
        if self.cfg.mode == "supervised":
            return pairs, [], []
        order = np.random.default_rng([self.cfg.seed, 4]).permutation(len(pairs))
        n_paired = int(round(self.cfg.paired_fraction * len(pairs))) if self.cfg.mode == "semi" else 0
        paired = [pairs[i] for i in order[:n_paired]]
        rest = [pairs[i] for i in order[n_paired:]]
        half = len(rest) // 2
        return paired, rest[:half], rest[half:]

    def train_epoch(self) -> dict[str, float]:
        cfg = self.cfg
        paired, x_only, y_only = self._unpaired_pools()
        sums: dict[str, list[float]] = {}

        def note(prefix, res):
            for k, v in res.losses.items():
                sums.setdefault(f"{prefix}.{k}", []).append(v)

        seed = [cfg.seed, 100 + self.epoch]
        if paired:
            for b, batch in enumerate(batch_iter(paired, cfg.batch_size, seed)):
                note("primal", self.primal_cycle_step(batch))
                note("dual", self.dual_cycle_step(batch))
        if x_only or y_only:
            xs = list(batch_iter(x_only, cfg.batch_size, seed + [1])) if x_only else []
            ys = list(batch_iter(y_only, cfg.batch_size, seed + [2])) if y_only else []
            for i in range(max(len(xs), len(ys))):
                if i < len(xs):
                    note("unsup_primal", self.unsupervised_primal_step(xs[i].frames))
                if i < len(ys):
                    note("unsup_dual", self.unsupervised_dual_step(ys[i]))
        self.epoch += 1
        summary = {k: float(np.mean(v)) for k, v in sums.items()}
        self.history.append(summary)
        return summary

    def train(self, out_dir: str | Path | None = None) -> list[EvalReport]:
        reports = []
        out = Path(out_dir) if out_dir else None
        for _ in range(self.cfg.epochs):
            try:
                losses = self.train_epoch()
            except NonFiniteLossError as exc:
                exc.trace.setdefault("epoch", self.epoch)
                raise
            report = self.evaluate()
            reports.append(report)
            log.info("epoch %d losses=%s report=%s", self.epoch, losses, report)
            if out is not None:
                self.write_epoch(out, report, losses)
        return reports

    # ------------------------------------------------------------------ evaluation

    def evaluate(self, pairs: Sequence[DataPair] | None = None) -> EvalReport:
        threads = int(os.environ.get("DUALCYCLE_THREADS", self.cfg.eval_threads) or 1)
        return evaluate(self.nlg, self.nlu, self.corpus, pairs, self.cfg.max_len, threads, self.cfg.threshold)

    def traces(self, count: int | None = None, pairs: Sequence[DataPair] | None = None) -> list[CycleTrace]:
        count = self.cfg.trace_samples if count is None else count
        pairs = list(pairs if pairs is not None else self.corpus.test)[:count]
        if not pairs:
            return []
        labels, vocab = self.corpus.labels, self.corpus.vocab
        batch = collate(pairs)
        th = self.cfg.threshold

        def frame_text(vec):
            return ", ".join(f"{s}[{v}]" for s, v in labels.decode((np.asarray(vec) >= th).astype(float)))

        out = []
        with no_grad():
            gen = self.nlg.greedy(batch.frames, self.cfg.max_len)
            ids, mask = _pad(gen)
            recon = self.nlu.predict(ids, mask)
            prim_r = reward_reconstruction_frame(recon, batch.frames)
            probs = self.nlu.predict(batch.targets, batch.content_mask)
            frames_hat = (probs >= th).astype(float)
            regen = self.nlg.greedy(frames_hat, self.cfg.max_len)
            dists = self.nlg.teacher_forced(Tensor(frames_hat), batch.inputs)
            dual_r = reward_reconstruction_tokens(dists, batch.targets, batch.mask)
        for i, p in enumerate(pairs):
            x_text = frame_text(p.frame)
            y_text = " ".join(vocab.decode(p.tokens))
            out.append(CycleTrace("primal", x_text, y_text, " ".join(vocab.decode(gen[i])),
                                  frame_text(recon[i]), {}, {"reconstruction": float(prim_r[i])}))
            out.append(CycleTrace("dual", y_text, x_text, frame_text(probs[i]),
                                  " ".join(vocab.decode(regen[i])), {}, {"reconstruction": float(dual_r[i])}))
        return out

    # ------------------------------------------------------------------ artifacts

    def write_epoch(self, out: Path, report: EvalReport, losses: dict) -> Path:
        d = out / f"epoch-{self.epoch:02d}"
        d.mkdir(parents=True, exist_ok=True)
        lh, vh = self.corpus.labels.fingerprint(), self.corpus.vocab.fingerprint()
        save_checkpoint(self.nlg.params, d / "nlg", lh, vh)
        save_checkpoint(self.nlu.params, d / "nlu", lh, vh)
        (d / "report.txt").write_text(report.to_text(), encoding="utf-8")
        (d / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
        (d / "losses.json").write_text(json.dumps(losses, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        traces = [asdict(t) for t in self.traces()]
        (d / "traces.json").write_text(json.dumps(traces, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return d


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max(1, max((len(s) for s in seqs), default=1))
    ids = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def _chunks(n: int, size: int) -> list[range]:
    return [range(s, min(n, s + size)) for s in range(0, n, size)]


def evaluate(nlg: NlgModel, nlu: NluModel, corpus: Corpus, pairs: Sequence[DataPair] | None = None,
             max_len: int = 60, threads: int = 1, threshold: float = 0.5, chunk: int = 128) -> EvalReport:
    """NLU micro-F1 over all pairs; NLG greedy decodes per distinct MR scored
    against every reference of that MR."""
    pairs = list(corpus.test if pairs is None else pairs)
    if not pairs:
        raise EmptyDatasetError("evaluation split is empty")

    def nlu_part(rng_: range):
        b = collate([pairs[i] for i in rng_])
        probs = nlu.predict(b.targets, b.content_mask)
        return _as_label_sets((probs >= threshold).astype(float))

    groups: dict[str, DataPair] = {}
    refs: dict[str, list[list[str]]] = {}
    for p in pairs:
        groups.setdefault(p.key, p)
        refs.setdefault(p.key, []).append(p.words)
    keys = list(groups)
    frames = np.stack([groups[k].frame for k in keys])

    def nlg_part(rng_: range):
        return nlg.greedy(frames[rng_.start : rng_.stop], max_len)

    nlu_chunks, nlg_chunks = _chunks(len(pairs), chunk), _chunks(len(keys), chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            preds = [s for part in ex.map(nlu_part, nlu_chunks) for s in part]
            gens = [g for part in ex.map(nlg_part, nlg_chunks) for g in part]
    else:
        preds = [s for c in nlu_chunks for s in nlu_part(c)]
        gens = [g for c in nlg_chunks for g in nlg_part(c)]
    golds = _as_label_sets(np.stack([p.frame for p in pairs]))
    hyps = [corpus.vocab.decode(g) for g in gens]
    ref_sets = [refs[k] for k in keys]
    rouge = corpus_rouge(hyps, ref_sets)
    return EvalReport(
        micro_f1=micro_f1(preds, golds),
        bleu=bleu(hyps, ref_sets),
        rouge_1=rouge["rouge_1"],
        rouge_2=rouge["rouge_2"],
        rouge_l=rouge["rouge_l"],
        nlu_samples=len(pairs),
        nlg_samples=len(keys),
    )
