"""Greedy and beam-search decoding over full or predicted-vocabulary heads."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .corpus import BOS, EOS, PAD, Batch, Example
from .generator import FullHead, GeneratorModel, ReducedHead, sample_inverse_cdf
from .metrics import timing_scope
from .predictor import PredictorModel, VocabMask, build_mask


def _strip(tokens) -> list[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


def _as_head(model: GeneratorModel, head):
    if head is None:
        return FullHead(model)
    if isinstance(head, (FullHead, ReducedHead)):
        return head
    return ReducedHead(model, head)


def decode_loop(model: GeneratorModel, state, head, max_n: int, rng=None) -> np.ndarray:
    """Greedy (``rng is None``) or sampled ids (B, <= max_n) for a batch of states, no graph."""
    B = state.h[0].shape[0]
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = []
    with T.no_grad():
        for _ in range(max_n):
            state, s = model.step(state, prev)
            lg = head.step_logits(model.out_vector(s).data)
            if rng is None:
                loc = lg.argmax(axis=-1)
            else:
                loc = sample_inverse_cdf(T._softmax_np(lg.astype(np.float64), -1), rng.random(B))
            gid = np.where(done, PAD, head.to_global(loc))
            out.append(gid)
            done |= gid == EOS
            prev = np.where(done, EOS, gid)
            if done.all():
                break
    return np.stack(out, axis=1)


def greedy_decode(model: GeneratorModel, source, head=None, max_n: int = 50) -> list[int]:
    """Arg-max decoding of one source; EOS is stripped from the result."""
    head = _as_head(model, head)
    with T.no_grad():
        state = model.initial_state_single(source)
        return _strip(decode_loop(model, state, head, max_n)[0])


def greedy_batch(model: GeneratorModel, batch: Batch, masks: np.ndarray | None = None,
                 max_n: int = 50) -> list[list[int]]:
    """Greedy outputs for a batch, in the batch's (sorted) order."""
    with T.no_grad():
        head = FullHead(model) if masks is None else ReducedHead(model, masks)
        state = model.initial_state(batch)
        return [_strip(row) for row in decode_loop(model, state, head, max_n)]


def decode_examples(model: GeneratorModel, examples: Sequence[Example], masks: dict | None = None,
                    max_n: int = 50, batch_size: int = 64) -> list[list[int]]:
    """Greedy outputs for ``examples`` in their given order (eval mode)."""
    was_training = model.training
    model.eval()
    out: dict[int, list[int]] = {}
    try:
        for i in range(0, len(examples), batch_size):
            batch = Batch(list(examples[i:i + batch_size]))
            m = None if masks is None else np.stack([masks[e.id].selected for e in batch.examples])
            for ex, hyp in zip(batch.examples, greedy_batch(model, batch, m, max_n)):
                out[ex.id] = hyp
    finally:
        model.train(was_training)
    return [out[e.id] for e in examples]


@dataclass(order=True)
class Hypothesis:
    sort_key: tuple
    tokens: list = field(compare=False)
    score: float = field(compare=False)
    normalized: float = field(compare=False)


@dataclass
class Beam:
    width: int
    live_tokens: list = field(default_factory=list)
    live_scores: np.ndarray = field(default_factory=lambda: np.zeros(1))
    finished: list = field(default_factory=list)


def _normalize(score: float, length: int, alpha: float) -> float:
    return score / (max(length, 1) ** alpha)


def beam_decode(model: GeneratorModel, source, head=None, width: int = 5, max_n: int = 50,
                alpha: float = 1.0, norm: str = "length", nbest: bool = False):
    """Beam search ranked by ``logp / len**alpha`` (``norm='none'`` ranks by ``logp``).

    Lengths count the EOS token.  A hypothesis that reaches ``max_n`` tokens is
    finished as is.  Search stops once no live hypothesis can beat the best
    finished normalized score (scores only fall as tokens are added, so the
    live bound is ``score / max_n**alpha``).  Returns the best token list, or
    with ``nbest`` every finished hypothesis sorted best first.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if norm not in ("length", "none"):
        raise ValueError(f"unknown length normalization {norm!r}")
    a = alpha if norm == "length" else 0.0
    head = _as_head(model, head)
    beam = Beam(width, [[]], np.zeros(1))
    with T.no_grad():
        state = model.initial_state_single(source)
        for t in range(1, max_n + 1):
            prev = np.array([toks[-1] if toks else BOS for toks in beam.live_tokens])
            state, s = model.step(state, prev)
            lg = head.step_logits(model.out_vector(s).data).astype(np.float64)
            logp = lg - lg.max(axis=-1, keepdims=True)
            logp -= np.log(np.exp(logp).sum(axis=-1, keepdims=True))
            cand = (beam.live_scores[:, None] + logp).reshape(-1)
            order = np.argsort(-cand, kind="stable")[:width]
            K = logp.shape[1]
            rows, locs = order // K, order % K
            gids = head.to_global(locs) if not head.reduced else head.ids[0, locs]
            keep_rows, keep_toks, keep_scores = [], [], []
            for r, g, sc in zip(rows, gids, cand[order]):
                toks = beam.live_tokens[r] + [int(g)]
                if g == EOS or t == max_n:
                    beam.finished.append(Hypothesis((-_normalize(sc, len(toks), a),
                                                     len(beam.finished)),
                                                    toks, float(sc), _normalize(sc, len(toks), a)))
                else:
                    keep_rows.append(r)
                    keep_toks.append(toks)
                    keep_scores.append(sc)
            if not keep_rows:
                break
            best_done = max((h.normalized for h in beam.finished), default=-np.inf)
            bound = max(_normalize(sc, max_n, a) for sc in keep_scores)
            if best_done >= bound:
                break
            beam.live_tokens = keep_toks
            beam.live_scores = np.array(keep_scores)
            state = state.index(np.array(keep_rows))
    ranked = sorted(beam.finished)
    if nbest:
        return [(_strip(h.tokens), h.score, h.normalized) for h in ranked]
    return _strip(ranked[0].tokens)


def predict_mask(predictor: PredictorModel, source, K: int) -> VocabMask:
    with T.no_grad():
        was = predictor.training
        predictor.eval()
        scores = predictor.logits([np.asarray(source)]).data[0]
        predictor.train(was)
    return build_mask(scores, K, mode="eval")


def decode_with_predictor(generator: GeneratorModel, predictor: PredictorModel, source, K: int,
                          mode: str = "greedy", width: int = 5, alpha: float = 1.0,
                          max_n: int = 50):
    """Predict an eval-mode mask, gather the small head and decode.

    Returns ``(tokens, mask, timing)`` with ``mask_ms`` (prediction and mask
    construction), ``decode_ms`` (head gather and search) and ``total_ms``.
    """
    timing: dict[str, float] = {}
    with timing_scope("total", timing):
        with timing_scope("mask", timing):
            mask = predict_mask(predictor, source, K)
        with timing_scope("decode", timing):
            with T.no_grad():
                head = ReducedHead(generator, [mask])
            if mode == "greedy":
                toks = greedy_decode(generator, source, head, max_n)
            elif mode == "beam":
                toks = beam_decode(generator, source, head, width, max_n, alpha)
            else:
                raise ValueError(f"unknown decode mode {mode!r}")
    return toks, mask, {k + "_ms": 1000.0 * v for k, v in timing.items()}


BENCH_FIELDS = ["setting", "vocab", "K", "mean_ms", "p50_ms", "p95_ms", "model_size", "ratio"]


def decode_benchmark(generator: GeneratorModel, examples: Sequence[Example],
                     predictor: PredictorModel | None = None, settings=None,
                     max_n: int = 50, warmup: int = 2, threads: int = 1) -> list[dict]:
    """Per-sentence greedy decode time for each ``(name, K)`` setting.

    ``K=None`` means the full head.  Small-head timings include predicting the
    mask.  ``ratio`` is the setting's mean over the full head's mean (empty
    when no full setting is present).
    """
    if not examples:
        raise ValueError("benchmark needs at least one example")
    settings = settings or [("full", None), ("small", 1000)]
    V = generator.vocab_size
    rows = []
    was = generator.training
    generator.eval()
    try:
        with threadpool_limits(limits=threads):
            for name, K in settings:
                if K is not None and predictor is None:
                    raise ValueError("small-head settings need a predictor")
                times = []
                for i, ex in enumerate(list(examples[:warmup]) + list(examples)):
                    with timing_scope(name) as tm:
                        if K is None:
                            greedy_decode(generator, ex.source, None, max_n)
                        else:
                            decode_with_predictor(generator, predictor, ex.source, K, max_n=max_n)
                    if i >= warmup:
                        times.append(tm.ms)
                times = np.array(times)
                size = generator.num_parameters() + (predictor.num_parameters() if K else 0)
                rows.append({"setting": name, "vocab": V, "K": K if K is not None else V,
                             "mean_ms": times.mean(), "p50_ms": np.percentile(times, 50),
                             "p95_ms": np.percentile(times, 95), "model_size": size})
    finally:
        generator.train(was)
    full = [r["mean_ms"] for r, (_, K) in zip(rows, settings) if K is None]
    for r in rows:
        r["ratio"] = r["mean_ms"] / full[0] if full else ""
    return rows


def write_benchmark_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
