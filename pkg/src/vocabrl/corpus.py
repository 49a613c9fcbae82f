"""Vocabularies, examples, synthetic tasks and batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_IDS = np.array([PAD, BOS, EOS, UNK], dtype=np.int64)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Vocabulary:
    """Dense token <-> id map with special symbols at ids 0..3."""

    def __init__(self, tokens: Sequence[str], counts: dict[str, int] | None = None,
                 min_count: int = 1):
        tokens = list(tokens)
        if tokens[:len(SPECIALS)] != list(SPECIALS):
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.counts = dict(counts or {})
        self.min_count = min_count

    @classmethod
    def from_counts(cls, counts: Counter, min_count: int = 1) -> "Vocabulary":
        # Counter preserves first-occurrence order, which breaks count ties
        order = {t: i for i, t in enumerate(counts)}
        kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
        kept.sort(key=lambda t: (-counts[t], order[t]))
        return cls(list(SPECIALS) + kept, {t: counts[t] for t in kept}, min_count)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.tokens == other.tokens
                and self.counts == other.counts)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str], add_eos: bool = False) -> np.ndarray:
        ids = [self.index.get(t, UNK) for t in tokens]
        if add_eos:
            ids.append(EOS)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def count(self, token_or_id) -> int:
        tok = self.tokens[token_or_id] if isinstance(token_or_id, (int, np.integer)) else token_or_id
        return self.counts.get(tok, 0)

    def with_distractors(self, n: int, prefix: str = "<distractor>") -> "Vocabulary":
        """Append ``n`` unseen types (count 0), e.g. to inflate the output layer."""
        extra = [f"{prefix}{i}" for i in range(n)]
        counts = dict(self.counts)
        counts.update({t: 0 for t in extra})
        return Vocabulary(self.tokens + extra, counts, min(self.min_count, 0))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens[len(SPECIALS):]:
                fh.write(f"{tok}\t{self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{n}: expected token<TAB>count")
                tokens.append(parts[0])
                counts[parts[0]] = int(parts[1])
        min_count = min(counts.values()) if counts else 1
        return cls(list(SPECIALS) + tokens, counts, min_count)


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Count whitespace tokens of a file (or of a list of token lists)."""
    sentences = read_lines(corpus) if isinstance(corpus, (str, Path)) else corpus
    counts = Counter()
    for sent in sentences:
        counts.update(sent)
    if not counts:
        raise DataError("empty corpus")
    return Vocabulary.from_counts(counts, min_count)


@dataclass
class Example:
    """One source (token ids or a feature vector) with an EOS-terminated target."""

    id: int
    source: np.ndarray
    target: np.ndarray

    @property
    def is_features(self) -> bool:
        return self.source.dtype.kind == "f"

    @property
    def src_len(self) -> int:
        return 0 if self.is_features else len(self.source)

    @property
    def tgt_len(self) -> int:
        return len(self.target)


def make_examples(pairs, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                  max_n: int | None = None, start_id: int = 0) -> tuple[list[Example], int]:
    """Encode token pairs; targets longer than ``max_n`` (with EOS) are dropped."""
    out, dropped = [], 0
    for k, (src, tgt) in enumerate(pairs):
        target = tgt_vocab.encode(tgt, add_eos=True)
        if (max_n is not None and len(target) > max_n) or len(src) == 0:
            dropped += 1
            continue
        out.append(Example(start_id + k, src_vocab.encode(src), target))
    return out, dropped


def load_parallel(src_path, tgt_path, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                  max_n: int | None = None, start_id: int = 0) -> tuple[list[Example], int]:
    """Read a ``.src``/``.tgt`` pair; returns the kept examples and the drop count.

    Example ids are ``start_id`` plus the 0-based line number, so they stay
    stable after filtering.
    """
    src = read_lines(src_path)
    tgt = read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"line count mismatch: {len(src)} source vs {len(tgt)} target lines")
    examples, dropped = make_examples(zip(src, tgt), src_vocab, tgt_vocab, max_n, start_id)
    if dropped:
        log.info("dropped %d of %d pairs (target longer than %s)", dropped, len(src), max_n)
    return examples, dropped


def write_features(path, features: np.ndarray) -> None:
    """One row per line, space-separated decimal floats."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(features, dtype=np.float64):
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def read_features(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            vals = line.split()
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DataError(f"{path}:{n}: row has {len(vals)} values, expected {width}")
            rows.append([float(v) for v in vals])
    if not rows:
        raise DataError(f"{path}: no feature rows")
    return np.array(rows, dtype=np.float64)


def load_features(feature_path, tgt_path, tgt_vocab: Vocabulary,
                  max_n: int | None = None, start_id: int = 0) -> tuple[list[Example], int]:
    feats = read_features(feature_path)
    tgt = read_lines(tgt_path)
    if len(feats) != len(tgt):
        raise DataError(f"line count mismatch: {len(feats)} feature rows vs {len(tgt)} targets")
    out, dropped = [], 0
    for k, (f, t) in enumerate(zip(feats, tgt)):
        target = tgt_vocab.encode(t, add_eos=True)
        if max_n is not None and len(target) > max_n:
            dropped += 1
            continue
        out.append(Example(start_id + k, f, target))
    return out, dropped


def write_parallel(prefix, pairs) -> None:
    prefix = str(prefix)
    with open(prefix + ".src", "w", encoding="utf-8") as fs, \
            open(prefix + ".tgt", "w", encoding="utf-8") as ft:
        for src, tgt in pairs:
            fs.write(" ".join(src) + "\n")
            ft.write(" ".join(tgt) + "\n")


# ---------------------------------------------------------------------------
# synthetic translation task


@dataclass
class SyntheticSpec:
    """Desk-scale translation task.

    Source tokens are drawn from a Zipf law over ``src_vocab`` types.  The
    target is the source pushed through ``transform`` ("reverse" or "copy")
    and a fixed random dictionary into ``tgt_vocab`` types.  With
    ``swap_prob`` > 0 each adjacent source pair is emitted in swapped order
    with that probability when the first token's type id is even, which adds a
    context-dependent reordering the model has to learn.
    """

    src_vocab: int = 200
    tgt_vocab: int = 200
    min_len: int = 3
    max_len: int = 10
    n_train: int = 5000
    n_dev: int = 500
    n_test: int = 500
    zipf: float = 1.0
    transform: str = "reverse"
    swap_prob: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.src_vocab < 1 or self.tgt_vocab < 1:
            raise ValueError("vocabulary sizes must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ValueError("split sizes must be nonnegative")
        if self.transform not in ("reverse", "copy"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.zipf < 0:
            raise ValueError("zipf exponent must be nonnegative")
        if not 0.0 <= self.swap_prob <= 1.0:
            raise ValueError("swap_prob must be in [0, 1]")
        capacity = sum(self.src_vocab ** n for n in range(self.min_len, self.max_len + 1))
        if capacity < self.n_train + self.n_dev + self.n_test:
            raise ValueError("too few distinct sentences for the requested sizes")

    def zipf_probs(self) -> np.ndarray:
        w = np.arange(1, self.src_vocab + 1, dtype=np.float64) ** -self.zipf
        return w / w.sum()

    def dictionary(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1])
        perm = rng.permutation(max(self.tgt_vocab, self.src_vocab))
        return perm[: self.src_vocab] % self.tgt_vocab


def _transform(spec: SyntheticSpec, src: np.ndarray, sub: np.ndarray, rng) -> list[int]:
    seq = list(src[::-1]) if spec.transform == "reverse" else list(src)
    if spec.swap_prob > 0:
        i = 0
        while i < len(seq) - 1:
            if seq[i] % 2 == 0 and rng.random() < spec.swap_prob:
                seq[i], seq[i + 1] = seq[i + 1], seq[i]
                i += 2
            else:
                i += 1
    return [int(sub[x]) for x in seq]


def make_synthetic_task(spec: SyntheticSpec):
    """Return ``(train, dev, test)`` lists of ``(src_tokens, tgt_tokens)``.

    Dev and test source sentences never occur in train (or in each other).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    probs = spec.zipf_probs()
    sub = spec.dictionary()
    seen: set[tuple] = set()
    splits = []
    for n in (spec.n_train, spec.n_dev, spec.n_test):
        pairs = []
        while len(pairs) < n:
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = rng.choice(spec.src_vocab, size=length, p=probs)
            key = tuple(src)
            if key in seen:
                continue
            seen.add(key)
            tgt = _transform(spec, src, sub, rng)
            pairs.append(([f"s{x}" for x in src], [f"t{y}" for y in tgt]))
        splits.append(pairs)
    return tuple(splits)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Examples sorted for one update, with padded views built on demand."""

    examples: list[Example]
    sort_by: str = "source"
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        # feature sources have no length, so they always sort by target
        by_target = self.sort_by == "target" or (self.examples and self.examples[0].is_features)
        key = (lambda e: e.tgt_len) if by_target else (lambda e: e.src_len)
        self.examples = sorted(self.examples, key=key, reverse=True)

    def __len__(self):
        return len(self.examples)

    @property
    def ids(self) -> np.ndarray:
        return np.array([e.id for e in self.examples], dtype=np.int64)

    @property
    def is_features(self) -> bool:
        return self.examples[0].is_features

    def _padded(self, seqs) -> tuple[np.ndarray, np.ndarray]:
        n = max(len(s) for s in seqs)
        ids = np.full((len(seqs), n), PAD, dtype=np.int64)
        mask = np.zeros((len(seqs), n), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = True
        return ids, mask

    @property
    def source(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded source ids (B, M) and the real-token mask."""
        if "src" not in self._cache:
            self._cache["src"] = self._padded([e.source for e in self.examples])
        return self._cache["src"]

    @property
    def features(self) -> np.ndarray:
        return np.stack([e.source for e in self.examples])

    @property
    def target(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Teacher-forcing inputs (BOS-shifted), outputs and mask, all (B, N)."""
        if "tgt" not in self._cache:
            out, mask = self._padded([e.target for e in self.examples])
            inp = np.full_like(out, PAD)
            inp[:, 0] = BOS
            inp[:, 1:] = out[:, :-1]
            inp[~mask] = PAD
            self._cache["tgt"] = (inp, out, mask)
        return self._cache["tgt"]

    def split(self, s: int) -> list["Batch"]:
        return split_batch(self, s)


def batch_iter(examples: Sequence[Example], batch_size: int, seed: int | None = 0,
               epoch: int = 0, sort_by: str = "source") -> Iterator[Batch]:
    """One epoch of batches; ``seed=None`` keeps the given order."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield Batch([examples[i] for i in order[start:start + batch_size]], sort_by=sort_by)


def split_batch(batch: Batch, s: int) -> list[Batch]:
    """Contiguous split of the sorted batch into ``s`` parts differing in size by <= 1."""
    if not 1 <= s <= len(batch):
        raise ValueError(f"cannot split a batch of {len(batch)} into {s} sets")
    if s == 1:
        return [batch]
    out = []
    for idx in np.array_split(np.arange(len(batch)), s):
        sub = Batch.__new__(Batch)
        sub.examples = [batch.examples[i] for i in idx]
        sub.sort_by = batch.sort_by
        sub._cache = {}
        out.append(sub)
    return out
