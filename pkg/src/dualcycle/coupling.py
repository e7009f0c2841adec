"""Differentiable joints between NLG and NLU.

Two ways to pass one model's output into the other while keeping the
composite trainable end to end:

* straight-through: the forward value is discrete (one-hot token or binary
  frame) and the backward pass copies the upstream gradient unchanged;
* distribution: the probability vector itself is the input (soft token
  embedding, or the label probabilities as the NLG condition).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, matmul

STRAIGHT_THROUGH = "straight_through"
DISTRIBUTION = "distribution"
JOINT_MODES = (STRAIGHT_THROUGH, DISTRIBUTION)


@dataclass(frozen=True)
class CouplingMode:
    nlg_output_mode: str = DISTRIBUTION
    nlu_output_mode: str = DISTRIBUTION

    def __post_init__(self):
        for m in (self.nlg_output_mode, self.nlu_output_mode):
            if m not in JOINT_MODES:
                raise ConfigError(f"unknown joint mode {m!r}; expected one of {JOINT_MODES}")

    @property
    def table_row(self) -> str:
        return {
            (STRAIGHT_THROUGH, STRAIGHT_THROUGH): "c",
            (DISTRIBUTION, STRAIGHT_THROUGH): "d",
            (STRAIGHT_THROUGH, DISTRIBUTION): "e",
            (DISTRIBUTION, DISTRIBUTION): "f",
        }[(self.nlg_output_mode, self.nlu_output_mode)]


def st_onehot(dist: Tensor, index=None) -> Tensor:
    """One-hot of the argmax (lowest index on ties) with identity backward.

    ``index`` overrides the argmax, e.g. with a sampled token.
    """
    dist = as_tensor(dist)
    d = dist.data
    idx = np.argmax(d, axis=-1) if index is None else np.asarray(index)
    out = np.zeros_like(d)
    if d.ndim == 1:
        out[int(idx)] = 1.0
    else:
        out[np.arange(d.shape[0]), idx] = 1.0
    return Tensor.from_op(out, (dist,), lambda g: (g,))


def st_threshold(probs: Tensor, threshold: float = 0.5) -> Tensor:
    """Binarize at ``threshold`` (the boundary maps to 1) with identity backward."""
    probs = as_tensor(probs)
    out = (probs.data >= threshold).astype(np.float64)
    return Tensor.from_op(out, (probs,), lambda g: (g,))


def embed_distribution(dist: Tensor, embedding_table: Tensor) -> Tensor:
    """Probability-weighted sum of embedding rows: ``dist @ table``."""
    dist = as_tensor(dist)
    if dist.shape[-1] != embedding_table.shape[0]:
        raise ShapeError(f"distribution of size {dist.shape[-1]} vs table with {embedding_table.shape[0]} rows")
    return matmul(dist, embedding_table)


def frame_distribution_input(probs: Tensor) -> Tensor:
    """Label probabilities used directly as the NLG condition vector."""
    return as_tensor(probs)


def couple_tokens(dist: Tensor, mode: str) -> Tensor:
    """What the NLU receives for one generated position."""
    return st_onehot(dist) if mode == STRAIGHT_THROUGH else dist


def couple_frame(probs: Tensor, mode: str, threshold: float = 0.5) -> Tensor:
    """What the NLG receives as its condition from the NLU output."""
    return st_threshold(probs, threshold) if mode == STRAIGHT_THROUGH else frame_distribution_input(probs)
