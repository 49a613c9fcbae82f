"""Sentence GLEU, corpus BLEU, frequency-percentile analysis and counters."""

from __future__ import annotations

import contextlib
import math
import time
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .corpus import SPECIAL_IDS, Vocabulary
from .tensor import tracker

MAX_ORDER = 4


def ngram_counts(tokens: Sequence[Hashable], n: int) -> Counter:
    toks = tuple(tokens)
    return Counter(toks[i:i + n] for i in range(len(toks) - n + 1))


@dataclass
class NGramCounts:
    """Counts of every 1..max_order gram of one sentence, keyed by tuple."""

    counts: Counter
    max_order: int = MAX_ORDER

    @classmethod
    def of(cls, tokens: Sequence[Hashable], max_order: int = MAX_ORDER) -> "NGramCounts":
        c = Counter()
        for n in range(1, max_order + 1):
            c.update(ngram_counts(tokens, n))
        return cls(c, max_order)

    def total(self, n: int) -> int:
        return sum(v for k, v in self.counts.items() if len(k) == n)


def gleu(hyp: Sequence[Hashable], ref: Sequence[Hashable], max_order: int = MAX_ORDER) -> float:
    """min(precision, recall) of clipped n-gram matches pooled over orders 1..4.

    Returns 0 when either side has no n-grams (in particular for an empty
    hypothesis).
    """
    h = NGramCounts.of(hyp, max_order).counts
    r = NGramCounts.of(ref, max_order).counts
    n_hyp = sum(h.values())
    n_ref = sum(r.values())
    if n_hyp == 0 or n_ref == 0:
        return 0.0
    matches = sum(min(c, r[g]) for g, c in h.items() if g in r)
    return min(matches / n_hyp, matches / n_ref)


def bleu_stats(hyp: Sequence[Hashable], ref: Sequence[Hashable],
               max_order: int = MAX_ORDER) -> np.ndarray:
    """``[hyp_len, ref_len, match_1, total_1, ..., match_n, total_n]``."""
    out = np.zeros(2 + 2 * max_order, dtype=np.int64)
    out[0], out[1] = len(hyp), len(ref)
    for n in range(1, max_order + 1):
        hc, rc = ngram_counts(hyp, n), ngram_counts(ref, n)
        out[2 * n] = sum(min(c, rc[g]) for g, c in hc.items())
        out[2 * n + 1] = max(0, len(hyp) - n + 1)
    return out


def bleu_from_stats(stats: np.ndarray, max_order: int = MAX_ORDER) -> float:
    c, r = int(stats[0]), int(stats[1])
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_order + 1):
        m, t = int(stats[2 * n]), int(stats[2 * n + 1])
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_order)


def corpus_bleu(hyps: Sequence[Sequence[Hashable]], refs: Sequence[Sequence[Hashable]],
                max_order: int = MAX_ORDER) -> float:
    """Unsmoothed corpus BLEU-4 with brevity penalty, scaled to 0..100."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    stats = np.zeros(2 + 2 * max_order, dtype=np.int64)
    for h, r in zip(hyps, refs):
        stats += bleu_stats(h, r, max_order)
    return bleu_from_stats(stats, max_order)


def mean_gleu(hyps, refs) -> float:
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        return 0.0
    return float(np.mean([gleu(h, r) for h, r in zip(hyps, refs)]))


def bootstrap(hyps, refs, metric: Callable = corpus_bleu, n: int = 1000,
              seed: int = 0, alpha: float = 0.05) -> tuple[float, float, float]:
    """Resample sentence pairs with replacement; returns (point, lo, hi)."""
    if len(hyps) != len(refs) or not hyps:
        raise ValueError("bootstrap needs equal, nonempty lists")
    rng = np.random.default_rng(seed)
    N = len(hyps)
    vals = np.empty(n)
    for i in range(n):
        idx = rng.integers(0, N, size=N)
        vals[i] = metric([hyps[j] for j in idx], [refs[j] for j in idx])
    lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2])
    return metric(hyps, refs), float(lo), float(hi)


# ---------------------------------------------------------------------------
# frequency percentiles


@dataclass
class PercentileHistogram:
    labels: np.ndarray        # 10, 20, ..., 100
    counts: np.ndarray        # output tokens per bin
    total: int                # all output tokens, including ones outside the ranking

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("percentile,fraction,count\n")
            for lab, frac, cnt in zip(self.labels, self.fractions, self.counts):
                fh.write(f"{lab},{frac:.6f},{cnt}\n")


def frequency_bins(vocab: Vocabulary, n_bins: int = 10) -> np.ndarray:
    """Bin index per vocabulary id (-1 for specials); bin 0 holds the most frequent words."""
    ids = np.array([i for i in range(len(vocab)) if i not in SPECIAL_IDS], dtype=np.int64)
    counts = np.array([vocab.count(int(i)) for i in ids], dtype=np.int64)
    order = ids[np.lexsort((ids, -counts))]
    bins = np.full(len(vocab), -1, dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, n_bins)):
        bins[chunk] = b
    return bins


def percentile_histogram(outputs, vocab: Vocabulary, n_bins: int = 10) -> PercentileHistogram:
    """Share of output tokens falling in each training-frequency decile.

    ``outputs`` is a list of sentences given as ids or token strings.
    """
    bins = frequency_bins(vocab, n_bins)
    counts = np.zeros(n_bins, dtype=np.int64)
    total = 0
    for sent in outputs:
        for tok in sent:
            total += 1
            i = vocab.index.get(tok, -1) if isinstance(tok, str) else int(tok)
            if 0 <= i < len(bins) and bins[i] >= 0:
                counts[bins[i]] += 1
    labels = np.arange(1, n_bins + 1) * (100 // n_bins)
    return PercentileHistogram(labels, counts, total)


# ---------------------------------------------------------------------------
# instrumentation


@dataclass
class Timing:
    label: str
    start: float = 0.0
    seconds: float = 0.0

    @property
    def ms(self) -> float:
        return 1000.0 * self.seconds


@contextlib.contextmanager
def timing_scope(label: str = "", sink: dict | None = None):
    """Time a block with a monotonic clock; optionally add the result to ``sink[label]``."""
    rec = Timing(label, time.perf_counter())
    try:
        yield rec
    finally:
        rec.seconds = time.perf_counter() - rec.start
        if sink is not None:
            sink[label] = sink.get(label, 0.0) + rec.seconds


@contextlib.contextmanager
def alloc_counter():
    """High-water marks of live tensor bytes inside the block.

    Yields a dict with ``peak_bytes`` and ``peak_activation_bytes``, filled in
    when the block exits.
    """
    with tracker.scope() as rec:
        yield rec
