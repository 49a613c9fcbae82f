"""Per-input target vocabulary prediction.

A small multi-label classifier scores every target word for a source input.
Its top-K words, plus the special symbols, form the input's action space: a
:class:`VocabMask` that the generator uses to gather a reduced softmax head.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse

from . import nn
from . import tensor as T
from .corpus import SPECIAL_IDS, Batch, Example, batch_iter
from .optim import AdaGrad, HalvingSchedule
from .tensor import Tensor

log = logging.getLogger(__name__)

SCORE_CLAMP = 1e-7


@dataclass(eq=False)
class VocabMask:
    """K distinct global word ids, kept in ascending order.

    Local index ``i`` of the reduced softmax stands for global word
    ``selected[i]``.
    """

    selected: np.ndarray

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64)
        sel = np.sort(sel)
        if sel.ndim != 1 or sel.size == 0:
            raise ValueError("mask needs a nonempty 1-D id list")
        if np.any(sel[1:] == sel[:-1]):
            raise ValueError("mask ids must be distinct")
        if sel[0] < 0:
            raise ValueError("negative word id in mask")
        self.selected = sel

    @property
    def K(self) -> int:
        return len(self.selected)

    def __len__(self):
        return len(self.selected)

    def __contains__(self, gid) -> bool:
        i = np.searchsorted(self.selected, gid)
        return bool(i < len(self.selected) and self.selected[i] == gid)

    def __eq__(self, other):
        return isinstance(other, VocabMask) and np.array_equal(self.selected, other.selected)

    def local_of_global(self, gids):
        """Local indices of ``gids``; ``-1`` where a word is not in the mask."""
        gids = np.asarray(gids, dtype=np.int64)
        pos = np.searchsorted(self.selected, gids)
        pos_c = np.minimum(pos, len(self.selected) - 1)
        hit = self.selected[pos_c] == gids
        return np.where(hit, pos_c, -1)

    def global_of_local(self, lids) -> np.ndarray:
        return self.selected[np.asarray(lids, dtype=np.int64)]

    def as_matrix(self, vocab_size: int) -> scipy.sparse.csr_matrix:
        """The K x |V| binary selection matrix with ones at ``(i, selected[i])``."""
        if self.selected[-1] >= vocab_size:
            raise ValueError("mask id outside the vocabulary")
        k = self.K
        return scipy.sparse.csr_matrix((np.ones(k), (np.arange(k), self.selected)),
                                       shape=(k, vocab_size))

    @classmethod
    def identity(cls, vocab_size: int) -> "VocabMask":
        return cls(np.arange(vocab_size))


def stack_masks(masks: Sequence[VocabMask]) -> np.ndarray:
    """(B, K) array of sorted ids; all masks must share K."""
    ks = {m.K for m in masks}
    if len(ks) != 1:
        raise ValueError(f"masks in a batch must have the same size, got {sorted(ks)}")
    return np.stack([m.selected for m in masks])


@dataclass
class SmoothedTargets:
    t: np.ndarray
    prior: np.ndarray


def gold_words(target: np.ndarray) -> np.ndarray:
    """Distinct non-special word ids of a target sequence."""
    ids = np.unique(np.asarray(target, dtype=np.int64))
    return ids[~np.isin(ids, SPECIAL_IDS)]


def unigram_prior(examples: Iterable[Example], vocab_size: int) -> np.ndarray:
    """Fraction of training targets that contain each word."""
    counts = np.zeros(vocab_size, dtype=np.float64)
    n = 0
    for ex in examples:
        counts[gold_words(ex.target)] += 1
        n += 1
    if n == 0:
        raise ValueError("prior needs at least one example")
    return counts / n


def smooth_targets(gold_ids, eps: float, prior: np.ndarray) -> SmoothedTargets:
    """``t = (1 - eps) * onehot(gold) + eps * prior``."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("smoothing eps must be in [0, 1)")
    prior = np.asarray(prior, dtype=np.float64)
    raw = np.zeros_like(prior)
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    if gold_ids.size and gold_ids.max() >= len(prior):
        raise ValueError("prior is shorter than the vocabulary")
    raw[gold_ids] = 1.0
    return SmoothedTargets((1.0 - eps) * raw + eps * prior, prior)


def multilabel_loss(scores: Tensor, targets) -> Tensor:
    """Binary cross entropy summed over the vocabulary, averaged over the batch.

    Scores are clamped to ``[1e-7, 1 - 1e-7]`` before taking logs.
    """
    t = targets.t if isinstance(targets, SmoothedTargets) else np.asarray(targets)
    if t.shape != scores.shape:
        raise ValueError(f"targets {t.shape} do not match scores {scores.shape}")
    t = t.astype(scores.dtype)
    o = T.clip(scores, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    ll = T.log(o) * t + T.log(1.0 - o) * (1.0 - t)
    total = -ll.sum()
    if scores.ndim == 2:
        total = total * (1.0 / scores.shape[0])
    return total


def multilabel_loss_logits(logits: Tensor, targets) -> Tensor:
    """Same loss computed from pre-sigmoid logits.

    Equal in value to :func:`multilabel_loss` wherever the scores lie inside
    the clamp, but the gradient ``sigmoid(z) - t`` does not vanish when a
    unit saturates, so training can recover from large early steps.
    """
    t = targets.t if isinstance(targets, SmoothedTargets) else np.asarray(targets)
    if t.shape != logits.shape:
        raise ValueError(f"targets {t.shape} do not match logits {logits.shape}")
    z = logits.data
    t = t.astype(z.dtype)
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    scale = 1.0 / z.shape[0] if z.ndim == 2 else 1.0
    value = np.asarray((softplus - t * z).sum() * scale, dtype=z.dtype)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return ((sig - t) * (g * scale),)

    return T.custom_op(value, (logits,), backward)


def top_k(scores, K: int) -> VocabMask:
    """The K highest-scoring ids; ties go to the lower id."""
    scores = np.asarray(scores)
    if K <= 0:
        raise ValueError("K must be positive")
    if K > len(scores):
        raise ValueError("K exceeds the vocabulary size")
    if K == len(scores):
        return VocabMask(np.arange(K))
    neg = -scores
    kth = np.partition(neg, K - 1)[K - 1]
    above = np.flatnonzero(neg < kth)
    ties = np.flatnonzero(neg == kth)[: K - len(above)]
    return VocabMask(np.concatenate([above, ties]))


def build_mask(scores, K: int, gold_ids=None, mode: str = "eval") -> VocabMask:
    """Fixed-size mask: forced ids plus the best-scoring remaining words.

    Specials are always forced.  In ``train`` mode the gold words are forced
    too, so training recall is 100% and the lowest-scoring predictions make
    room for them.
    """
    scores = np.asarray(scores)
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mask mode {mode!r}")
    forced = SPECIAL_IDS
    if mode == "train":
        if gold_ids is None:
            raise ValueError("train-mode masks need the gold ids")
        forced = np.union1d(forced, np.asarray(gold_ids, dtype=np.int64))
    if len(forced) > K:
        raise ValueError(f"{len(forced)} forced ids do not fit in K={K}")
    if K > len(scores):
        raise ValueError("K exceeds the vocabulary size")
    rest = K - len(forced)
    if rest == 0:
        return VocabMask(forced)
    s = scores.astype(np.float64, copy=True)
    s[forced] = -np.inf
    picked = top_k(s, rest).selected
    return VocabMask(np.concatenate([forced, picked]))


class PredictorModel(nn.Module):
    """Bag-of-embeddings (text) or projected feature vector, one residual block,
    and a sigmoid output layer over the target vocabulary."""

    def __init__(self, vocab_size: int, d_v: int = 512, src_vocab_size: int | None = None,
                 feature_dim: int | None = None, dropout: float = 0.4, seed: int = 0):
        if (src_vocab_size is None) == (feature_dim is None):
            raise ValueError("give exactly one of src_vocab_size or feature_dim")
        self.vocab_size = vocab_size
        self.d_v = d_v
        self.src_vocab_size = src_vocab_size
        self.feature_dim = feature_dim
        if src_vocab_size is not None:
            self.src_embed = nn.Embedding(src_vocab_size, d_v)
        else:
            self.feature_proj = nn.Linear(feature_dim, d_v)
        self.block = nn.ResidualBlock(d_v, dropout)
        self.out = nn.Linear(d_v, vocab_size)
        self.block.rng = np.random.default_rng([seed, 7])
        nn.init_params(self, seed)

    def hparams(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_v": self.d_v,
                "src_vocab_size": self.src_vocab_size, "feature_dim": self.feature_dim,
                "dropout": self.block.dropout}

    @property
    def is_text(self) -> bool:
        return self.src_vocab_size is not None

    def input_repr(self, sources) -> Tensor:
        """v(X) for a Batch, a list of sources, or a single source (1-D)."""
        single = isinstance(sources, np.ndarray) and sources.ndim == 1 and (
            self.is_text or sources.dtype.kind == "f")
        if single:
            return self.input_repr([sources]).reshape(-1)
        if isinstance(sources, Batch):
            sources = [e.source for e in sources.examples]
        if not self.is_text:
            return self.feature_proj(Tensor(np.stack(sources).astype(T.get_default_dtype())))
        if any(len(s) == 0 for s in sources):
            raise ValueError("empty source")
        # sorting the ids fixes the summation order: the bag is order-free exactly
        seqs = [np.sort(np.asarray(s, dtype=np.int64)) for s in sources]
        M = max(len(s) for s in seqs)
        ids = np.zeros((len(seqs), M), dtype=np.int64)
        w = np.zeros((len(seqs), M, 1), dtype=T.get_default_dtype())
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            w[i, : len(s)] = 1.0 / len(s)
        return (self.src_embed(ids) * w).sum(axis=1)

    def logits(self, sources) -> Tensor:
        return self.out(self.block(self.input_repr(sources)))

    def predict_scores(self, sources) -> Tensor:
        return T.sigmoid(self.logits(sources))


def predict_scores(model: PredictorModel, source) -> Tensor:
    return model.predict_scores(source)


def input_repr(model: PredictorModel, source) -> Tensor:
    return model.input_repr(source)


def _eval_logits(model: PredictorModel, examples: Sequence[Example], batch_size: int = 256):
    """Yield (example, logits row) pairs in eval mode without recording a graph."""
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            for start in range(0, len(examples), batch_size):
                chunk = examples[start:start + batch_size]
                lg = model.logits([e.source for e in chunk]).data
                for ex, row in zip(chunk, lg):
                    yield ex, row
    finally:
        model.train(was)


def gold_ranks(model: PredictorModel, examples: Sequence[Example]) -> np.ndarray:
    """Rank (0 = best) of every non-special gold token occurrence in its example."""
    ranks = []
    for ex, row in _eval_logits(model, examples):
        order = np.argsort(-row, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        tgt = np.asarray(ex.target)
        tgt = tgt[~np.isin(tgt, SPECIAL_IDS)]
        ranks.append(rank[tgt])
    return np.concatenate(ranks) if ranks else np.zeros(0, dtype=np.int64)


def recall_at_k(model: PredictorModel, examples: Sequence[Example], K) -> float | np.ndarray:
    """Share of gold target tokens (occurrences, specials excluded) in each top-K.

    Ranking uses the pre-sigmoid logits, which order words exactly like the
    scores but without ties from saturation.  ``K`` may be a sequence, in
    which case an array of recalls is returned.
    """
    if len(examples) == 0:
        raise ValueError("recall needs a nonempty dataset")
    ranks = gold_ranks(model, examples)
    ks = np.atleast_1d(np.asarray(K))
    if ranks.size == 0:
        out = np.ones(len(ks))
    else:
        out = np.array([(ranks < k).mean() for k in ks])
    return out if np.ndim(K) else float(out[0])


def build_masks(model: PredictorModel, examples: Sequence[Example], K: int,
                mode: str = "eval") -> dict[int, VocabMask]:
    """Masks for many examples, keyed by example id."""
    out = {}
    for ex, row in _eval_logits(model, examples):
        gold = gold_words(ex.target) if mode == "train" else None
        out[ex.id] = build_mask(row, K, gold, mode)
    return out


def write_mask_cache(path, masks: dict[int, VocabMask]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex_id in sorted(masks):
            fh.write(f"{ex_id}\t{','.join(str(int(i)) for i in masks[ex_id].selected)}\n")


def read_mask_cache(path) -> dict[int, VocabMask]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ex_id, ids = line.split("\t")
            out[int(ex_id)] = VocabMask(np.array([int(i) for i in ids.split(",")]))
    return out


@dataclass
class PredictorTrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.08
    smoothing: float = 0.1
    select_k: int = 1000
    clip_norm: float | None = 1.0
    weight_decay: float = 1e-6
    seed: int = 0
    evals_per_epoch: int = 2


@dataclass
class PredictorHistory:
    rows: list[dict] = field(default_factory=list)
    best_recall: float = -1.0
    best_epoch: float = 0.0


def train_predictor(model: PredictorModel, train: Sequence[Example], dev: Sequence[Example],
                    cfg: PredictorTrainConfig | None = None) -> PredictorHistory:
    """AdaGrad training with label smoothing; keeps the parameters with the best dev recall."""
    cfg = cfg or PredictorTrainConfig()
    prior = unigram_prior(train, model.vocab_size)
    opt = AdaGrad(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                  clip_norm=cfg.clip_norm)
    sched = HalvingSchedule(cfg.lr, freeze_epochs=0)
    # selecting at K >= |V| is vacuous (recall 1.0), so small vocabularies use |V|/2
    k = min(cfg.select_k, max(1, model.vocab_size // 2))
    hist = PredictorHistory()
    best_state = copy.deepcopy(model.state_dict())
    n_batches = -(-len(train) // cfg.batch_size)
    checkpoints = {round(n_batches * j / cfg.evals_per_epoch) for j in range(1, cfg.evals_per_epoch + 1)}
    dtype = T.get_default_dtype()
    for epoch in range(cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        total = 0.0
        for b, batch in enumerate(batch_iter(train, cfg.batch_size, cfg.seed, epoch), 1):
            tg = np.stack([smooth_targets(gold_words(e.target), cfg.smoothing, prior).t
                           for e in batch.examples]).astype(dtype)
            loss = multilabel_loss_logits(model.logits(batch), tg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            if b in checkpoints:
                ep = epoch + b / n_batches
                rec = recall_at_k(model, dev, k)
                opt.lr = sched.update(rec, ep)
                hist.rows.append({"epoch": round(ep, 3), "loss": total / b, "recall": rec,
                                  "lr": opt.lr, "seconds": time.perf_counter() - t0})
                log.info("predictor epoch %.2f loss %.4f recall@%d %.4f", ep, total / b, k, rec)
                if rec > hist.best_recall:
                    hist.best_recall, hist.best_epoch = rec, ep
                    best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return hist
