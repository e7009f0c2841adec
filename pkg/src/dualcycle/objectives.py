"""Training objectives: supervised losses, the score-function (REINFORCE)
surrogate with a running-mean baseline, and the reward families."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, RewardError
from .metrics import rouge_l, sample_f1, sentence_bleu
from .tensor import Tensor, as_tensor, log

REWARD_FAMILIES = ("reconstruction", "auto_metric", "lm", "made")
PLACEMENTS = ("mid", "end")
LOSS_KINDS = ("cross_entropy", "binary_cross_entropy", "reinforce", "hybrid")


@dataclass(frozen=True)
class RewardSpec:
    family: str
    placement: str

    def __post_init__(self):
        if self.family not in REWARD_FAMILIES:
            raise ConfigError(f"unknown reward family {self.family!r}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown reward placement {self.placement!r}")


@dataclass(frozen=True)
class LossSpec:
    kind: str
    reward: RewardSpec | None = None
    weight: float = 1.0           # supervised term
    reward_weight: float = 0.1    # reinforcement term (hybrid / reinforce)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind in ("reinforce", "hybrid") and self.reward is None:
            raise ConfigError(f"{self.kind} loss needs a reward spec")
        if self.weight < 0 or self.reward_weight < 0:
            raise ConfigError("loss weights must be non-negative")

    @property
    def supervised(self) -> bool:
        return self.kind != "reinforce"

    @property
    def reinforced(self) -> bool:
        return self.kind in ("reinforce", "hybrid")


# ---------------------------------------------------------------------------
# supervised
# ---------------------------------------------------------------------------


def supervised_loss_nlg(dists: Sequence[Tensor], targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Cross entropy averaged over each row's valid steps, then over the batch."""
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets.reshape(1, -1)
        dists = [d.reshape(1, -1) if d.ndim == 1 else d for d in dists]
    if len(dists) != targets.shape[1]:
        raise ContractError(f"{len(dists)} step distributions for {targets.shape[1]} targets")
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=float)
    steps = np.maximum(mask.sum(axis=1), 1.0)
    total = None
    for t, d in enumerate(dists):
        # padded positions may carry any id; score them against 0 and mask out
        tgt = np.where(mask[:, t] > 0, targets[:, t], 0)
        term = F.cross_entropy(d, tgt) * (mask[:, t] / steps)
        total = term if total is None else total + term
    return total.mean()


def supervised_loss_nlu(probs: Tensor, gold) -> Tensor:
    return F.binary_cross_entropy(probs, gold)


# ---------------------------------------------------------------------------
# REINFORCE
# ---------------------------------------------------------------------------


@dataclass
class RewardSignal:
    value: np.ndarray
    adjusted: np.ndarray
    family: str


class RunningBaseline:
    """Exponential moving average of batch-mean rewards.

    The first batch uses its own mean. ``decay=None`` disables the baseline.
    """

    def __init__(self, decay: float | None = 0.95):
        self.decay = decay
        self.value: float | None = None

    def __call__(self, rewards: np.ndarray, family: str) -> RewardSignal:
        rewards = np.asarray(rewards, dtype=float)
        if not np.all(np.isfinite(rewards)):
            raise RewardError(f"non-finite {family} reward")
        if self.decay is None:
            return RewardSignal(rewards, rewards.copy(), family)
        b = float(rewards.mean()) if self.value is None else self.value
        out = RewardSignal(rewards, rewards - b, family)
        self.value = self.decay * b + (1.0 - self.decay) * float(rewards.mean())
        return out


def reinforce_loss(log_prob: Tensor, reward: RewardSignal) -> Tensor:
    """Surrogate whose gradient is ``-mean_b (r_b - baseline) * grad log p_b``.

    ``log_prob`` holds one summed log-probability per row (the sampled
    decisions of that row).
    """
    adj = np.asarray(reward.adjusted, dtype=float)
    if not np.all(np.isfinite(adj)):
        raise RewardError(f"non-finite {reward.family} reward")
    log_prob = as_tensor(log_prob)
    if log_prob.shape != adj.shape:
        raise ContractError(f"log-prob shape {log_prob.shape} vs reward shape {adj.shape}")
    return -(log_prob * adj).mean()


def bernoulli_logp(probs: Tensor, sample: np.ndarray) -> Tensor:
    """``sum_d log p(sample_d)`` per row under independent Bernoullis."""
    s = np.asarray(sample, dtype=float)
    ll = log(probs, floor=F.PROB_FLOOR) * s + log(1.0 - probs, floor=F.PROB_FLOOR) * (1.0 - s)
    return ll.sum(axis=-1)


def sample_bernoulli(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return (rng.random(probs.shape) < probs).astype(float)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------


def reward_reconstruction_frame(probs: np.ndarray, original: np.ndarray) -> np.ndarray:
    """Bernoulli log-likelihood of the original frame, summed over labels."""
    p = np.clip(np.asarray(probs, dtype=float), F.PROB_FLOOR, 1.0)
    q = np.clip(1.0 - np.asarray(probs, dtype=float), F.PROB_FLOOR, 1.0)
    x = np.asarray(original, dtype=float)
    return (x * np.log(p) + (1.0 - x) * np.log(q)).sum(axis=-1)


def reward_reconstruction_tokens(dists: Sequence[np.ndarray], targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-token mean log-probability of the original tokens."""
    targets = np.asarray(targets)
    rows = np.arange(targets.shape[0])
    total = np.zeros(targets.shape[0])
    for t, d in enumerate(dists):
        d = d.data if isinstance(d, Tensor) else d
        total += np.log(np.maximum(d[rows, targets[:, t]], F.PROB_FLOOR)) * mask[:, t]
    return total / np.maximum(mask.sum(axis=1), 1.0)


def reward_auto_metric_nlg(hypothesis: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Equal-weight mean of smoothed sentence BLEU and ROUGE-L F1."""
    if not references:
        raise RewardError("empty reference set")
    return 0.5 * (sentence_bleu(hypothesis, references) + rouge_l(hypothesis, references))


def reward_auto_metric_nlu(prediction: set, gold: set) -> float:
    return sample_f1(prediction, gold)


def reward_auto_metric(task: str, hypothesis, references_or_gold) -> float:
    if task == "nlg":
        return reward_auto_metric_nlg(hypothesis, references_or_gold)
    if task == "nlu":
        return reward_auto_metric_nlu(hypothesis, references_or_gold)
    raise ConfigError(f"unknown task {task!r}")


def reward_lm(lm, utterances: Sequence[Sequence[int]], strict: bool = True) -> np.ndarray:
    """Length-normalized LM log-probability of each utterance (``<eos>`` scored).

    With ``strict=False`` an empty utterance is scored as the bare ``<eos>``.
    """
    if strict and any(len(u) == 0 for u in utterances):
        raise RewardError("LM reward of an empty utterance")
    return lm.batch_logprob(utterances, normalize=True, append_eos=True)


def reward_made(made, frames) -> np.ndarray:
    """Ensemble log-likelihood of the (0.5-thresholded) frames."""
    frames = np.asarray(frames, dtype=float)
    binary = (frames >= 0.5).astype(float)
    return np.atleast_1d(made.logprob(binary))
