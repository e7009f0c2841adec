"""E2E-format data ingestion: meaning representations, utterances, label
space, vocabulary and mini-batching."""

from __future__ import annotations

import csv
import hashlib
import logging
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, EmptyDatasetError, ParseError

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = range(4)

DEFAULT_MAX_LEN = 60
DEFAULT_MIN_FREQ = 2

# ---------------------------------------------------------------------------
# meaning representations
# ---------------------------------------------------------------------------


def _byte_offset(s: str, char_index: int) -> int:
    return len(s[:char_index].encode("utf-8"))


def parse_mr(mr: str) -> list[tuple[str, str]]:
    """Parse ``slot[value], slot[value], ...`` into ``(slot, value)`` pairs.

    Slots keep their case, values are lowercased, whitespace is trimmed.
    """
    pairs: list[tuple[str, str]] = []
    i, n = 0, len(mr)
    while i < n:
        while i < n and mr[i].isspace():
            i += 1
        if i >= n:
            break
        open_at = mr.find("[", i)
        if open_at < 0:
            raise ParseError(f"expected '[' after slot name in {mr!r}", _byte_offset(mr, i))
        slot = mr[i:open_at].strip()
        if not slot or "]" in slot or "," in slot:
            raise ParseError(f"malformed slot name {slot!r}", _byte_offset(mr, i))
        close_at = mr.find("]", open_at + 1)
        if close_at < 0:
            raise ParseError("unterminated '[' in meaning representation", _byte_offset(mr, open_at))
        value = mr[open_at + 1 : close_at]
        if "[" in value:
            raise ParseError("nested '[' inside value", _byte_offset(mr, open_at + 1 + value.index("[")))
        pairs.append((slot, value.strip().lower()))
        i = close_at + 1
        while i < n and mr[i].isspace():
            i += 1
        if i < n:
            if mr[i] != ",":
                raise ParseError(f"expected ',' between slot-value pairs, got {mr[i]!r}", _byte_offset(mr, i))
            i += 1
            if not mr[i:].strip():
                raise ParseError("trailing ',' with no slot-value pair", _byte_offset(mr, i - 1))
    return pairs


def format_mr(pairs: Iterable[tuple[str, str]]) -> str:
    return ", ".join(f"{slot}[{value}]" for slot, value in pairs)


def canonical_key(pairs: Iterable[tuple[str, str]]) -> str:
    """Order- and case-insensitive key used to group co-references."""
    return format_mr(sorted((s.strip().lower(), v.strip().lower()) for s, v in pairs))


# ---------------------------------------------------------------------------
# text preprocessing
# ---------------------------------------------------------------------------

_KEEP_AS_IS = frozenset(
    "is was has does his its this us yes less as always perhaps whereas plus "
    "thus bus gas news series species".split()
)
_IRREGULAR = {"children": "child", "men": "man", "women": "woman", "people": "person"}


def lemmatize(word: str) -> str:
    """Reduce plural nouns to their singular form with a fixed rule table.

    Verb inflections are left alone, which is also what a noun-default
    dictionary lemmatizer does ("called" and "priced" survive).
    """
    if word in _IRREGULAR:
        return _IRREGULAR[word]
    if len(word) <= 3 or word in _KEEP_AS_IS or not word.isalpha():
        return word
    if word.endswith(("ss", "us", "is", "ous")):
        return word
    if word.endswith("ies") and len(word) > 4:
        return word[:-3] + "y"
    if word.endswith(("ches", "shes", "xes", "zes", "sses")):
        return word[:-2]
    if word.endswith("s"):
        return word[:-1]
    return word


def _strip_punct(text: str) -> str:
    return "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)


def preprocess_text(raw: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace, lemmatize."""
    return [lemmatize(w) for w in _strip_punct(raw.lower()).split()]


# ---------------------------------------------------------------------------
# label space and vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlotValueLabel:
    slot: str
    value: str
    index: int

    def __str__(self) -> str:
        return f"{self.slot}[{self.value}]"


class LabelSpace:
    """Ordered slot-value label set; index is a bijection onto ``[0, D)``."""

    def __init__(self, pairs: Iterable[tuple[str, str]]):
        ordered = sorted(set(pairs))
        self.labels = [SlotValueLabel(s, v, i) for i, (s, v) in enumerate(ordered)]
        self._index = {(l.slot, l.value): l.index for l in self.labels}

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def index(self, slot: str, value: str) -> int | None:
        return self._index.get((slot, value))

    def decode(self, vector) -> list[tuple[str, str]]:
        v = np.asarray(vector)
        return [(self.labels[i].slot, self.labels[i].value) for i in np.flatnonzero(v >= 0.5)]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(map(str, self.labels)).encode()).hexdigest()


def build_label_space(pairs: Iterable["DataPair"]) -> LabelSpace:
    slot_values: set[tuple[str, str]] = set()
    count = 0
    for p in pairs:
        count += 1
        slot_values.update(p.slots)
    if count == 0:
        raise EmptyDatasetError("cannot build a label space from an empty training set")
    return LabelSpace(slot_values)


def encode_frame(pairs: Sequence[tuple[str, str]], space: LabelSpace) -> np.ndarray:
    """Binary vector with one bit per known pair; unknown pairs are dropped and counted."""
    vec = np.zeros(len(space))
    dropped = 0
    for slot, value in pairs:
        idx = space.index(slot, value)
        if idx is None:
            dropped += 1
        else:
            vec[idx] = 1.0
    if dropped:
        log.info("encode_frame: dropped %d slot-value pair(s) outside the label space", dropped)
    return vec


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_freq: int = DEFAULT_MIN_FREQ) -> "Vocabulary":
        counts = Counter(tok for sent in sentences for tok in sent)
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(kept)

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS_ID:
                break
            if strip and i in (PAD_ID, BOS_ID):
                continue
            out.append(self.itos[i])
        return out

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()


# ---------------------------------------------------------------------------
# pairs and datasets
# ---------------------------------------------------------------------------


@dataclass
class DataPair:
    raw_mr: str
    raw_text: str
    slots: list[tuple[str, str]]
    words: list[str]
    key: str
    frame: np.ndarray | None = None
    tokens: list[int] = field(default_factory=list)  # content ids, no markers


def read_e2e_csv(path: str | Path) -> list[tuple[str, str]]:
    """Rows of ``(mr, ref)`` from an E2E challenge CSV (header ``mr,ref``)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyDatasetError(f"{path}: empty file")
        cols = {c.strip().lower(): c for c in reader.fieldnames}
        if "mr" not in cols or "ref" not in cols:
            raise ContractError(f"{path}: expected columns 'mr' and 'ref', found {reader.fieldnames}")
        return [(row[cols["mr"]], row[cols["ref"]]) for row in reader]


def make_pairs(rows: Iterable[tuple[str, str]]) -> list[DataPair]:
    out = []
    for mr, ref in rows:
        slots = parse_mr(mr)
        out.append(DataPair(mr, ref, slots, preprocess_text(ref), canonical_key(slots)))
    return out


def group_references(pairs: Iterable[DataPair]) -> dict[str, list[list[str]]]:
    """All utterances sharing a (canonical) MR, in first-seen order."""
    groups: dict[str, list[list[str]]] = {}
    for p in pairs:
        groups.setdefault(p.key, []).append(p.words)
    return groups


@dataclass
class Corpus:
    """Training and test pairs encoded against a shared label space/vocabulary."""

    train: list[DataPair]
    test: list[DataPair]
    labels: LabelSpace
    vocab: Vocabulary
    max_len: int = DEFAULT_MAX_LEN
    truncated: int = 0
    train_refs: dict[str, list[list[str]]] = field(default_factory=dict)
    test_refs: dict[str, list[list[str]]] = field(default_factory=dict)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def manifest(self) -> str:
        lines = [
            "# dualcycle dataset manifest",
            f"train_pairs = {len(self.train)}",
            f"test_pairs = {len(self.test)}",
            f"test_mrs = {len(self.test_refs)}",
            f"labels = {len(self.labels)}",
            f"vocab = {len(self.vocab)}",
            f"max_len = {self.max_len}",
            f"truncated = {self.truncated}",
        ]
        lines += [f"label {l.index} {l}" for l in self.labels]
        lines += [f"token {i} {t}" for i, t in enumerate(self.vocab.itos)]
        return "\n".join(lines) + "\n"


def git_blob_hash(text: str) -> str:
    data = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def encode_pairs(pairs: list[DataPair], labels: LabelSpace, vocab: Vocabulary, max_len: int) -> int:
    truncated = 0
    for p in pairs:
        p.frame = encode_frame(p.slots, labels)
        ids = vocab.encode(p.words)
        if len(ids) > max_len:
            truncated += 1
            ids = ids[:max_len]
        p.tokens = ids
    if truncated:
        log.info("truncated %d utterance(s) to %d tokens", truncated, max_len)
    return truncated


def subset_test_by_mr(pairs: list[DataPair], n_mrs: int | None) -> list[DataPair]:
    """Keep every pair whose MR is among the first ``n_mrs`` distinct MRs."""
    if n_mrs is None:
        return pairs
    keep: list[str] = []
    seen: set[str] = set()
    for p in pairs:
        if p.key not in seen:
            seen.add(p.key)
            keep.append(p.key)
    chosen = set(keep[:n_mrs])
    return [p for p in pairs if p.key in chosen]


def build_corpus(
    train_rows: Sequence[tuple[str, str]],
    test_rows: Sequence[tuple[str, str]],
    max_len: int = DEFAULT_MAX_LEN,
    min_freq: int = DEFAULT_MIN_FREQ,
    train_subset: int | None = None,
    test_mrs: int | None = None,
) -> Corpus:
    if train_subset:
        # a fixed permutation so a subset mixes MRs instead of taking a file prefix
        order = np.random.default_rng(0).permutation(len(train_rows))[:train_subset]
        train_rows = [train_rows[i] for i in sorted(order)]
    train = make_pairs(train_rows)
    if not train:
        raise EmptyDatasetError("training split is empty")
    test = subset_test_by_mr(make_pairs(test_rows), test_mrs)
    labels = build_label_space(train)
    vocab = Vocabulary.build((p.words for p in train), min_freq)
    truncated = encode_pairs(train, labels, vocab, max_len)
    truncated += encode_pairs(test, labels, vocab, max_len)
    train = [p for p in train if p.tokens]
    return Corpus(train, test, labels, vocab, max_len, truncated,
                  group_references(train), group_references(test))


def load_corpus(
    data_dir: str | Path,
    train_file: str = "trainset.csv",
    test_file: str = "testset_w_refs.csv",
    **kwargs,
) -> Corpus:
    data_dir = Path(data_dir)
    return build_corpus(read_e2e_csv(data_dir / train_file), read_e2e_csv(data_dir / test_file), **kwargs)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    frames: np.ndarray       # [B, D]
    inputs: np.ndarray       # [B, T] <bos> + content, padded
    targets: np.ndarray      # [B, T] content + <eos>, padded
    mask: np.ndarray         # [B, T] 1 where targets is real
    content_mask: np.ndarray  # [B, T] 1 where targets is a content token
    keys: list[str]
    indices: np.ndarray

    @property
    def size(self) -> int:
        return self.frames.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.content_mask.sum(axis=1).astype(int)


def collate(pairs: Sequence[DataPair], indices: Sequence[int] | None = None) -> Batch:
    B = len(pairs)
    T = max(len(p.tokens) for p in pairs) + 1
    inputs = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T))
    content = np.zeros((B, T))
    for i, p in enumerate(pairs):
        L = len(p.tokens)
        inputs[i, 0] = BOS_ID
        inputs[i, 1 : L + 1] = p.tokens
        targets[i, :L] = p.tokens
        targets[i, L] = EOS_ID
        mask[i, : L + 1] = 1.0
        content[i, :L] = 1.0
    frames = np.stack([p.frame for p in pairs])
    idx = np.arange(B) if indices is None else np.asarray(indices)
    return Batch(frames, inputs, targets, mask, content, [p.key for p in pairs], idx)


def batch_iter(pairs: Sequence[DataPair], batch_size: int, seed, shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; the permutation is a pure function of ``seed``."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(pairs)) if shuffle else np.arange(len(pairs))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield collate([pairs[i] for i in idx], idx)


def collate_ids(seqs: Sequence[Sequence[int]], append_eos: bool = True):
    """``(inputs, targets, mask)`` arrays for teacher-forced scoring of id sequences."""
    extra = 1 if append_eos else 0
    B = len(seqs)
    T = max(len(s) for s in seqs) + extra
    inputs = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    mask = np.zeros((B, T))
    for i, s in enumerate(seqs):
        s = list(s) + ([EOS_ID] if append_eos else [])
        inputs[i, 0] = BOS_ID
        inputs[i, 1 : len(s)] = s[:-1]
        targets[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return inputs, targets, mask
