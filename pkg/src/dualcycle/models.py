"""The four learned components.

* :class:`NlgModel`  frame -> utterance (GRU decoder, frame projected into the
  initial hidden state)
* :class:`NluModel`  utterance -> per-label probabilities (GRU encoder, final
  state projected to the labels through a sigmoid)
* :class:`RnnLm`     GRU language model used as a fluency reward
* :class:`MadeEstimator`  masked autoencoder over binary frames, used as a
  frame-plausibility reward
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import functional as F
from .coupling import embed_distribution, st_onehot
from .data import BOS_ID, EOS_ID, PAD_ID, collate_ids
from .errors import ContractError, EmptyDatasetError, ShapeError
from .params import ParamStore
from .tensor import Tensor, backward, log, matmul, no_grad, pick, relu, sigmoid, take_rows, tanh

log_ = logging.getLogger(__name__)

HIDDEN = 200
EMBED = 50

FEEDBACK_MODES = ("token", "straight_through", "distribution")


def _embed_feedback(probs: Tensor, tokens: np.ndarray, table: Tensor, feedback: str) -> Tensor:
    """Input embedding for the next decoding step."""
    if feedback == "token":
        return take_rows(table, tokens)
    if feedback == "straight_through":
        return embed_distribution(st_onehot(probs, index=tokens), table)
    if feedback == "distribution":
        return embed_distribution(probs, table)
    raise ContractError(f"unknown feedback mode {feedback!r}")


def _sample_rows(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random((p.shape[0], 1))
    c = np.cumsum(p, axis=1)
    idx = (c < u * c[:, -1:]).sum(axis=1)
    return np.minimum(idx, p.shape[1] - 1)


@dataclass
class DecodeResult:
    """Output of free-running decoding for a batch.

    ``step_mask[b, t]`` is 1 while row ``b`` was still generating at step
    ``t`` (the step emitting ``<eos>`` included); ``content_mask`` excludes
    the ``<eos>`` step.
    """

    tokens: np.ndarray
    probs: list[Tensor]
    step_mask: np.ndarray
    content_mask: np.ndarray
    logps: list[Tensor] = field(default_factory=list)

    @property
    def lengths(self) -> np.ndarray:
        return self.content_mask.sum(axis=1).astype(int)

    def content(self, row: int) -> list[int]:
        return [int(t) for t, m in zip(self.tokens[row], self.content_mask[row]) if m]

    def sequence_logp(self) -> Tensor:
        """Sum of log-probabilities of the emitted tokens per row, ``<eos>`` included."""
        total = None
        for t, lp in enumerate(self.logps):
            term = lp * self.step_mask[:, t]
            total = term if total is None else total + term
        return total


# ---------------------------------------------------------------------------
# NLG
# ---------------------------------------------------------------------------


class NlgModel:
    def __init__(self, n_labels: int, vocab_size: int, embed: int = EMBED, hidden: int = HIDDEN,
                 seed: int = 0, store: ParamStore | None = None):
        rng = np.random.default_rng(seed)
        self.n_labels, self.vocab_size, self.hidden = n_labels, vocab_size, hidden
        self.params = store or ParamStore()
        p = self.params
        self.W_in = p.add_weight("nlg.in.W", (hidden, n_labels), rng)
        self.b_in = p.add_bias("nlg.in.b", hidden)
        self.embedding = p.add_weight("nlg.emb", (vocab_size, embed), rng)
        self.gru = p.add_gru("nlg.gru", embed, hidden, rng)
        self.W_out = p.add_weight("nlg.out.W", (vocab_size, hidden), rng)
        self.b_out = p.add_bias("nlg.out.b", vocab_size)

    def init_state(self, frame) -> Tensor:
        frame = frame if isinstance(frame, Tensor) else Tensor(np.asarray(frame, dtype=float))
        if frame.shape[-1] != self.n_labels:
            raise ShapeError(f"NLG expects frames of length {self.n_labels}, got {frame.shape}")
        return tanh(F.affine(frame, self.W_in, self.b_in))

    def step(self, x: Tensor, h: Tensor, mask=None) -> tuple[Tensor, Tensor]:
        h = F.gru_step(x, h, self.gru, mask)
        return h, F.softmax(F.affine(h, self.W_out, self.b_out))

    def teacher_forced(self, frame, inputs: np.ndarray, tf_ratio: float = 1.0,
                       feedback: str = "distribution", rng: np.random.Generator | None = None) -> list[Tensor]:
        """Per-step vocabulary distributions; step ``t`` predicts ``targets[:, t]``.

        With ``tf_ratio < 1`` each step (jointly for the batch) feeds back the
        model's own previous output, in the given ``feedback`` form, instead of
        the gold token.
        """
        inputs = np.asarray(inputs)
        if inputs.ndim != 2 or inputs.shape[1] == 0:
            raise ContractError("teacher forcing needs a non-empty target")
        if np.any(inputs[:, 0] != BOS_ID):
            raise ContractError("teacher-forced inputs must start with <bos>")
        h = self.init_state(frame)
        x = take_rows(self.embedding, inputs[:, 0])
        out = []
        for t in range(inputs.shape[1]):
            h, p = self.step(x, h)
            out.append(p)
            if t + 1 < inputs.shape[1]:
                if tf_ratio >= 1.0 or (rng is not None and rng.random() < tf_ratio):
                    x = take_rows(self.embedding, inputs[:, t + 1])
                else:
                    x = _embed_feedback(p, p.data.argmax(axis=1), self.embedding, feedback)
        return out

    def decode(self, frame, max_len: int, mode: str = "greedy", feedback: str = "token",
               rng: np.random.Generator | None = None) -> DecodeResult:
        """Free-running decoding until every row emits ``<eos>`` or ``max_len``
        content tokens have been produced."""
        if max_len < 1:
            raise ContractError("max_len must be >= 1")
        if mode not in ("greedy", "sample"):
            raise ContractError(f"unknown decode mode {mode!r}")
        if mode == "sample" and rng is None:
            raise ContractError("sample mode needs an rng")
        h = self.init_state(frame)
        B = h.shape[0] if h.ndim == 2 else 1
        if h.ndim == 1:
            h = h.reshape(1, -1)
        x = take_rows(self.embedding, np.full(B, BOS_ID))
        alive = np.ones(B, dtype=bool)
        toks, probs, steps, logps = [], [], [], []
        for t in range(max_len + 1):
            h, p = self.step(x, h)
            tok = _sample_rows(p.data, rng) if mode == "sample" else p.data.argmax(axis=1)
            if t == max_len:
                tok = np.full(B, EOS_ID)
            steps.append(alive.copy())
            toks.append(np.where(alive, tok, PAD_ID))
            probs.append(p)
            if mode == "sample":
                logps.append(log(pick(p, tok), floor=F.PROB_FLOOR))
            alive = alive & (tok != EOS_ID)
            if not alive.any():
                break
            x = _embed_feedback(p, tok, self.embedding, feedback)
        tokens = np.stack(toks, axis=1)
        step_mask = np.stack(steps, axis=1).astype(float)
        content = step_mask * (tokens != EOS_ID)
        return DecodeResult(tokens, probs, step_mask, content, logps)

    def greedy(self, frames: np.ndarray, max_len: int) -> list[list[int]]:
        with no_grad():
            res = self.decode(Tensor(frames), max_len)
        return [res.content(i) for i in range(res.tokens.shape[0])]


# ---------------------------------------------------------------------------
# NLU
# ---------------------------------------------------------------------------


class NluModel:
    def __init__(self, vocab_size: int, n_labels: int, embed: int = EMBED, hidden: int = HIDDEN,
                 seed: int = 1, store: ParamStore | None = None, shared_embedding: Tensor | None = None):
        rng = np.random.default_rng(seed)
        self.n_labels, self.vocab_size, self.hidden = n_labels, vocab_size, hidden
        self.params = store or ParamStore()
        p = self.params
        if shared_embedding is not None:
            self.embedding = shared_embedding
        else:
            self.embedding = p.add_weight("nlu.emb", (vocab_size, embed), rng)
        self.gru = p.add_gru("nlu.gru", self.embedding.shape[1], hidden, rng)
        self.W_out = p.add_weight("nlu.out.W", (n_labels, hidden), rng)
        self.b_out = p.add_bias("nlu.out.b", n_labels)

    def _encode(self, embeds: Sequence[Tensor], mask: np.ndarray | None, batch: int) -> Tensor:
        h = Tensor(np.zeros((batch, self.hidden)))
        for t, x in enumerate(embeds):
            m = None if mask is None else mask[:, t]
            if m is not None and not m.any():
                continue
            h = F.gru_step(x, h, self.gru, m)
        return sigmoid(F.affine(h, self.W_out, self.b_out))

    def forward_tokens(self, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids.reshape(1, -1)
        if ids.shape[1] == 0:
            raise ContractError("NLU input sequence is empty")
        embeds = [take_rows(self.embedding, ids[:, t]) for t in range(ids.shape[1])]
        return self._encode(embeds, mask, ids.shape[0])

    def forward_dists(self, dists: Sequence[Tensor], mask: np.ndarray | None = None) -> Tensor:
        """Encode a sequence given as per-step vocabulary vectors (soft or one-hot)."""
        if len(dists) == 0:
            raise ContractError("NLU input sequence is empty")
        embeds = [embed_distribution(d, self.embedding) for d in dists]
        batch = dists[0].shape[0] if dists[0].ndim == 2 else 1
        return self._encode(embeds, mask, batch)

    def predict(self, ids: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        with no_grad():
            return self.forward_tokens(ids, mask).data


# ---------------------------------------------------------------------------
# language model
# ---------------------------------------------------------------------------


class RnnLm:
    def __init__(self, vocab_size: int, embed: int = EMBED, hidden: int = HIDDEN, seed: int = 2):
        rng = np.random.default_rng(seed)
        self.vocab_size, self.hidden = vocab_size, hidden
        self.params = ParamStore()
        p = self.params
        self.embedding = p.add_weight("lm.emb", (vocab_size, embed), rng)
        self.gru = p.add_gru("lm.gru", embed, hidden, rng)
        self.W_out = p.add_weight("lm.out.W", (vocab_size, hidden), rng)
        self.b_out = p.add_bias("lm.out.b", vocab_size)

    def step_dists(self, inputs: np.ndarray) -> list[Tensor]:
        B = inputs.shape[0]
        h = Tensor(np.zeros((B, self.hidden)))
        out = []
        for t in range(inputs.shape[1]):
            h = F.gru_step(take_rows(self.embedding, inputs[:, t]), h, self.gru)
            out.append(F.softmax(F.affine(h, self.W_out, self.b_out)))
        return out

    def token_logprobs(self, inputs: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> Tensor:
        """Masked sum of ``log p(target_t | prefix)`` per row."""
        total = None
        for t, p in enumerate(self.step_dists(inputs)):
            term = log(pick(p, targets[:, t]), floor=F.PROB_FLOOR) * mask[:, t]
            total = term if total is None else total + term
        return total

    def logprob(self, tokens: Sequence[int], normalize: bool = False) -> float:
        """``sum_i log p(tokens_i | <bos>, tokens_<i)`` over exactly the given tokens."""
        tokens = [int(t) for t in tokens]
        if not tokens:
            raise ContractError("lm_logprob of an empty utterance")
        inputs = np.array([[BOS_ID] + tokens[:-1]])
        targets = np.array([tokens])
        with no_grad():
            lp = float(self.token_logprobs(inputs, targets, np.ones_like(targets, dtype=float)).data[0])
        return lp / len(tokens) if normalize else lp

    def batch_logprob(self, seqs: Sequence[Sequence[int]], normalize: bool = True,
                      append_eos: bool = True) -> np.ndarray:
        inputs, targets, mask = collate_ids(seqs, append_eos=append_eos)
        with no_grad():
            lp = self.token_logprobs(inputs, targets, mask).data
        return lp / np.maximum(mask.sum(axis=1), 1.0) if normalize else lp


def lm_logprob(lm: RnnLm, utterance: Sequence[int], normalize: bool = False) -> float:
    return lm.logprob(utterance, normalize)


# ---------------------------------------------------------------------------
# MADE
# ---------------------------------------------------------------------------


@dataclass
class MaskSet:
    input_degrees: np.ndarray   # [D]
    hidden_degrees: np.ndarray  # [H]
    hidden_mask: np.ndarray     # [H, D]
    output_mask: np.ndarray     # [D, H]

    def conditioning_set(self, d: int) -> set[int]:
        """Inputs that can reach output ``d`` through the network."""
        reach = (self.output_mask[d] @ self.hidden_mask) > 0
        return set(np.flatnonzero(reach).tolist())


def made_build_masks(D: int, hidden_size: int, n_orderings: int, seed: int,
                     orderings: Sequence[Sequence[int]] | None = None) -> list[MaskSet]:
    """Autoregressive connectivity masks, one set per input ordering.

    ``orderings[k][d]`` is the degree (position in the factorization) of
    input ``d``. Hidden units get degrees in ``[0, D-2]``; a hidden unit sees
    inputs of lower-or-equal degree and an output sees hidden units of
    strictly lower degree, so output ``d`` depends only on inputs ordered
    before it.
    """
    if n_orderings < 1:
        raise ContractError("n_orderings must be >= 1")
    rng = np.random.default_rng(seed)
    sets = []
    for k in range(n_orderings):
        if orderings is not None:
            deg_in = np.asarray(orderings[k], dtype=np.int64)
            if sorted(deg_in.tolist()) != list(range(D)):
                raise ContractError(f"ordering {orderings[k]} is not a permutation of range({D})")
        else:
            deg_in = rng.permutation(D)
        if D > 1:
            deg_h = rng.integers(0, D - 1, size=hidden_size)
        else:
            deg_h = np.zeros(hidden_size, dtype=np.int64)
        hidden_mask = (deg_h[:, None] >= deg_in[None, :]).astype(float)
        output_mask = (deg_in[:, None] > deg_h[None, :]).astype(float)
        sets.append(MaskSet(deg_in, deg_h, hidden_mask, output_mask))
    return sets


class MadeEstimator:
    def __init__(self, D: int, hidden: int = HIDDEN, n_orderings: int = 5, seed: int = 3):
        rng = np.random.default_rng(seed)
        self.D, self.hidden = D, hidden
        self.masks = made_build_masks(D, hidden, n_orderings, seed)
        self.params = ParamStore()
        p = self.params
        self.W1 = p.add_weight("made.W1", (hidden, D), rng)
        self.b1 = p.add_bias("made.b1", hidden)
        self.W2 = p.add_weight("made.W2", (D, hidden), rng)
        self.b2 = p.add_bias("made.b2", D)

    def zero_head(self) -> None:
        self.W2.data[...] = 0.0
        self.b2.data[...] = 0.0

    def conditionals(self, x, k: int) -> Tensor:
        """``p(x_d = 1 | x_{S_d})`` for every ``d`` under mask set ``k``."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
        if x.shape[-1] != self.D:
            raise ShapeError(f"MADE expects frames of length {self.D}, got {x.shape}")
        m = self.masks[k]
        hid = relu(F.affine(x, self.W1 * m.hidden_mask, self.b1))
        return sigmoid(F.affine(hid, self.W2 * m.output_mask, self.b2))

    def _set_loglik(self, x: np.ndarray, k: int) -> Tensor:
        p = self.conditionals(x, k)
        ll = log(p, floor=F.PROB_FLOOR) * x + log(1.0 - p, floor=F.PROB_FLOOR) * (1.0 - x)
        return ll.sum(axis=-1)

    def loglik(self, x: np.ndarray) -> Tensor:
        """Ensemble-average log-likelihood (graph), per row for a batch."""
        x = np.asarray(x, dtype=float)
        total = None
        for k in range(len(self.masks)):
            ll = self._set_loglik(x, k)
            total = ll if total is None else total + ll
        return total * (1.0 / len(self.masks))

    def logprob(self, frame) -> float | np.ndarray:
        frame = np.asarray(frame, dtype=float)
        if frame.shape[-1] != self.D:
            raise ShapeError(f"frame length {frame.shape[-1]} != D = {self.D}")
        with no_grad():
            out = self.loglik(frame).data
        return float(out) if out.ndim == 0 else out


def made_logprob(made: MadeEstimator, frame) -> float:
    return made.logprob(frame)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def pretrain_lm(corpus: Sequence[Sequence[int]], vocab_size: int, epochs: int = 5, batch_size: int = 64,
                lr: float = 1e-3, seed: int = 0, embed: int = EMBED, hidden: int = HIDDEN,
                ) -> tuple[RnnLm, list[float]]:
    """Train an LM on token-id sentences; returns the model and per-epoch mean per-token NLL."""
    corpus = [list(s) for s in corpus if len(s) > 0]
    if not corpus:
        raise EmptyDatasetError("language-model corpus is empty")
    lm = RnnLm(vocab_size, embed, hidden, seed)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        tot, count = 0.0, 0.0
        for idx in _minibatches(len(corpus), batch_size, rng):
            inputs, targets, mask = collate_ids([corpus[i] for i in idx])
            lp = lm.token_logprobs(inputs, targets, mask)
            ntok = mask.sum()
            loss = -lp.sum() * (1.0 / ntok)
            backward(loss)
            lm.params.adam_update(lr)
            tot += loss.item() * ntok
            count += ntok
        history.append(tot / count)
    lm.params.frozen = True
    return lm, history


def pretrain_made(frames: np.ndarray, epochs: int = 20, batch_size: int = 64, lr: float = 1e-3,
                  seed: int = 0, hidden: int = HIDDEN, n_orderings: int = 5,
                  ) -> tuple[MadeEstimator, list[float]]:
    """Fit MADE by maximum likelihood averaged over the mask ensemble.

    Returns the model and per-epoch mean NLL per frame.
    """
    frames = np.asarray(frames, dtype=float)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyDatasetError("MADE training set is empty")
    made = MadeEstimator(frames.shape[1], hidden, n_orderings, seed)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        tot = 0.0
        for idx in _minibatches(len(frames), batch_size, rng):
            ll = made.loglik(frames[idx])
            loss = -ll.mean()
            backward(loss)
            made.params.adam_update(lr)
            tot += loss.item() * len(idx)
        history.append(tot / len(frames))
    made.params.frozen = True
    return made, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "dualcycle-checkpoint-1"


def save_checkpoint(store: ParamStore, prefix: str | Path, labels_hash: str, vocab_hash: str) -> None:
    """Write ``<prefix>.manifest`` (text) and ``<prefix>.bin`` (raw little-endian float64)."""
    prefix = Path(prefix)
    lines = [f"format = {CHECKPOINT_FORMAT}", f"labels_sha256 = {labels_hash}", f"vocab_sha256 = {vocab_hash}"]
    chunks, offset = [], 0
    for name, t in store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        dims = ",".join(map(str, arr.shape)) or "-"
        lines.append(f"param {name} {dims} {offset} {arr.size}")
        chunks.append(arr.tobytes())
        offset += arr.size
    prefix.with_suffix(".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")
    prefix.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(store: ParamStore, prefix: str | Path, labels_hash: str, vocab_hash: str) -> None:
    prefix = Path(prefix)
    header: dict[str, str] = {}
    entries = []
    for line in prefix.with_suffix(".manifest").read_text(encoding="utf-8").splitlines():
        if line.startswith("param "):
            _, name, dims, off, count = line.split()
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            entries.append((name, shape, int(off), int(count)))
        elif "=" in line:
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{prefix}: unknown checkpoint format {header.get('format')!r}")
    if header.get("labels_sha256") != labels_hash or header.get("vocab_sha256") != vocab_hash:
        raise ContractError(f"{prefix}: checkpoint was written for a different label space or vocabulary")
    flat = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    store.load_state_dict({n: flat[o : o + c].reshape(s).astype(np.float64) for n, s, o, c in entries})
