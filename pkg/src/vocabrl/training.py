"""Cross-entropy pre-training, REINFORCE with a GLEU reward, and the joint loss.

The RL objective for a sampled sentence ``y_1..y_T`` is

    L_r = -sum_t (GLEU(y, y_gold) - b_t) * log p(y_t | y_<t, X)

with ``b_t = sigmoid(W_r . s_t + b_r)`` a learned baseline regressed onto the
sentence reward from detached decoder states.  Training minimises
``lam * L_c + (1 - lam) * L_r`` plus the baseline's squared error.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .corpus import EOS, Batch, Example, batch_iter, split_batch
from .decode import decode_examples
from .generator import (FullHead, GeneratorModel, ReducedHead, example_uniforms,
                        gold_log_probs, sample_batch)
from .metrics import corpus_bleu, gleu, mean_gleu
from .optim import SGD, Adam, HalvingSchedule, Optimizer, make_optimizer
from .predictor import PredictorModel, VocabMask, _eval_logits, build_mask, gold_words
from .tensor import Tensor, tracker

log = logging.getLogger(__name__)

CURVE_FIELDS = ["epoch", "phase", "loss", "dev_gleu", "dev_bleu", "lr", "seconds", "peak_bytes"]


@dataclass
class TrainConfig:
    head: str = "full"            # full | small
    K: int = 1000
    lam: float = 0.005
    S: int = 1
    batch_size: int = 128
    max_n: int = 50
    optimizer: str = "sgd"
    lr: float = 1.0               # cross-entropy phase
    momentum: float = 0.75
    rl_lr: float = 0.01
    baseline_lr: float = 1e-3
    clip_norm: float = 1.0
    weight_decay: float = 1e-6
    dropout: float = 0.2
    freeze_epochs: float = 6.0
    ce_epochs: int = 20
    rl_epochs: int = 5
    evals_per_epoch: int = 2
    rl_masks: str = "eval"        # eval (top-K + specials) | train (gold-union)
    seed: int = 0
    precision: str = "float32"
    deterministic: bool = True
    eval_batch_size: int = 64
    sort_by: str = "source"       # length used to sort examples within a batch

    def validate(self) -> "TrainConfig":
        if self.head not in ("full", "small"):
            raise ValueError(f"head must be 'full' or 'small', got {self.head!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.S < 1 or self.batch_size < 1 or self.max_n < 1 or self.K < 1:
            raise ValueError("S, batch_size, max_n and K must be >= 1")
        rates = (self.lr, self.momentum, self.rl_lr, self.baseline_lr, self.clip_norm,
                 self.weight_decay, self.dropout, self.freeze_epochs)
        if any(r < 0 for r in rates):
            raise ValueError("rates must be nonnegative")
        if self.rl_masks not in ("eval", "train"):
            raise ValueError("rl_masks must be 'eval' or 'train'")
        if self.sort_by not in ("source", "target"):
            raise ValueError("sort_by must be 'source' or 'target'")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# masks


class MaskTable:
    """Per-example vocabularies for the small head, in train and eval flavours."""

    def __init__(self, train: dict[int, VocabMask], eval: dict[int, VocabMask]):
        self.masks = {"train": train, "eval": eval}

    @classmethod
    def from_predictor(cls, predictor: PredictorModel, examples: Sequence[Example],
                       K: int) -> "MaskTable":
        tr, ev = {}, {}
        for ex, row in _eval_logits(predictor, examples):
            tr[ex.id] = build_mask(row, K, gold_words(ex.target), "train")
            ev[ex.id] = build_mask(row, K, None, "eval")
        return cls(tr, ev)

    def update(self, other: "MaskTable") -> "MaskTable":
        for mode in self.masks:
            self.masks[mode].update(other.masks[mode])
        return self

    def get(self, mode: str) -> dict[int, VocabMask]:
        return self.masks[mode]

    def ids(self, batch: Batch, mode: str) -> np.ndarray:
        table = self.masks[mode]
        try:
            return np.stack([table[e.id].selected for e in batch.examples])
        except KeyError as err:
            raise KeyError(f"no {mode} mask for example {err.args[0]}") from None


def make_head(model: GeneratorModel, batch: Batch, masks: MaskTable | None, mode: str):
    return FullHead(model) if masks is None else ReducedHead(model, masks.ids(batch, mode))


# ---------------------------------------------------------------------------
# losses


def _as_batch(x) -> Batch:
    return Batch([x]) if isinstance(x, Example) else x


def xent_loss(model: GeneratorModel, batch, head=None, skip_missing: bool = False,
              norm: float | None = None, state=None) -> Tensor:
    """Teacher-forced ``-sum_t log p(y_t)`` summed over the batch and divided by ``norm``.

    ``norm`` defaults to the number of examples.  Padding never counts; with a
    reduced head a gold word outside the mask is an error unless
    ``skip_missing`` drops it.
    """
    batch = _as_batch(batch)
    logp, mask = gold_log_probs(model, batch, head, state, skip_missing)
    norm = len(batch) if norm is None else norm
    return -(logp * mask).sum() / norm


@dataclass
class RewardTrace:
    """Sampled sentences with their log-probabilities, baselines and rewards.

    Arrays are (B, T); ``mask`` marks the steps that belong to each sentence
    (up to and including EOS, or all ``max_n`` steps after truncation).
    """

    tokens: np.ndarray
    logp: Tensor
    baseline: Tensor
    gleu: np.ndarray
    mask: np.ndarray

    @classmethod
    def single(cls, logp, baseline, gleu_value: float, tokens=None) -> "RewardTrace":
        """Trace of one sentence from per-step values (tensors or plain numbers)."""
        lp = logp if isinstance(logp, Tensor) else Tensor(np.asarray(logp, dtype=float))
        bl = baseline if isinstance(baseline, Tensor) else Tensor(np.asarray(baseline, dtype=float))
        n = lp.shape[-1]
        toks = np.zeros((1, n), dtype=np.int64) if tokens is None else np.asarray(tokens)[None]
        return cls(toks, lp.reshape(1, n), bl.reshape(1, n), np.array([gleu_value], dtype=float),
                   np.ones((1, n), dtype=bool))

    def __len__(self):
        return int(self.mask.sum())

    @property
    def rewards(self) -> np.ndarray:
        """R_t = GLEU - b_t on real steps, 0 elsewhere."""
        return np.where(self.mask, self.gleu[:, None] - self.baseline.data, 0.0)


class BaselineEstimator(nn.Module):
    """b_t = sigmoid(W_r . s_t + b_r) on detached decoder vectors."""

    def __init__(self, d: int, seed: int = 0):
        self.lin = nn.Linear(d, 1)
        nn.init_params(self, seed)

    def __call__(self, states: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(states, dtype=self.lin.weight.dtype))
        return T.sigmoid(self.lin(x)).reshape(x.shape[:-1])


def reinforce_loss(trace: RewardTrace, norm: float | None = None) -> Tensor:
    """``-sum_t R_t log p(y_t)`` with the baseline held constant."""
    if len(trace) == 0:
        raise ValueError("empty reward trace")
    norm = trace.mask.shape[0] if norm is None else norm
    R = trace.rewards.astype(trace.logp.dtype)
    return -(trace.logp * R).sum() / norm


def baseline_loss(trace: RewardTrace, norm: float | None = None) -> Tensor:
    """``sum_t (b_t - GLEU)^2`` over real steps; only the estimator gets gradient."""
    norm = trace.mask.shape[0] if norm is None else norm
    diff = trace.baseline - trace.gleu[:, None].astype(trace.baseline.dtype)
    return (diff * diff * trace.mask).sum() / norm


def sample_trace(model: GeneratorModel, baseline: BaselineEstimator, batch: Batch, head,
                 max_n: int, seed: int, epoch: int, state=None) -> RewardTrace:
    """Sample one sentence per example and score it against the gold target."""
    u = example_uniforms(seed, epoch, batch.ids, max_n)
    smp = sample_batch(model, state if state is not None else batch, head, max_n, u)
    refs = [list(e.target[:-1]) if len(e.target) and e.target[-1] == EOS else list(e.target)
            for e in batch.examples]
    scores = np.array([gleu(h, r) for h, r in zip(smp.sentences(), refs)])
    return RewardTrace(smp.tokens, smp.logp, baseline(smp.states), scores, smp.mask)


@dataclass
class StepStats:
    loss: float = 0.0
    xent: float = 0.0
    reinforce: float = 0.0
    baseline: float = 0.0
    gleu: float = 0.0
    n: int = 0

    def add(self, other: "StepStats") -> None:
        for f in ("loss", "xent", "reinforce", "baseline", "gleu"):
            setattr(self, f, getattr(self, f) + getattr(other, f))
        self.n += other.n


def joint_loss(model: GeneratorModel, baseline: BaselineEstimator | None, batch: Batch,
               cfg: TrainConfig, masks: MaskTable | None, epoch: int,
               norm: float | None = None) -> tuple[Tensor, StepStats]:
    """``lam * L_c + (1 - lam) * L_r + L_baseline`` for one (sub-)batch.

    Both terms share one encoder pass and one gathered head.  RL-phase masks
    may miss gold words, so the teacher-forced term skips those positions.
    """
    norm = len(batch) if norm is None else norm
    mode = cfg.rl_masks
    head = make_head(model, batch, masks, mode)
    state = model.initial_state(batch)
    st = StepStats(n=len(batch))
    total = None
    if cfg.lam > 0:
        lc = xent_loss(model, batch, head, skip_missing=True, norm=norm, state=state)
        total = lc * cfg.lam
        st.xent = lc.item() * norm
    if cfg.lam < 1:
        trace = sample_trace(model, baseline, batch, head, cfg.max_n, cfg.seed, epoch, state)
        lr_ = reinforce_loss(trace, norm)
        lb = baseline_loss(trace, norm)
        term = lr_ * (1.0 - cfg.lam) + lb
        total = term if total is None else total + term
        st.reinforce = lr_.item() * norm
        st.baseline = lb.item() * norm
        st.gleu = float(trace.gleu.sum())
    st.loss = total.item() * norm
    return total, st


def split_update(batch: Batch, S: int, loss_fn: Callable, optimizers: Sequence[Optimizer]):
    """Accumulate gradients over ``S`` sub-batches, then take one optimizer step.

    ``loss_fn(sub_batch, norm)`` returns ``(loss, stats)``; every sub-loss is
    normalised by the full batch size so the sum matches the unsplit loss.
    Each backward pass frees its graph before the next sub-batch runs.
    """
    parts = split_batch(batch, S)
    for opt in optimizers:
        opt.zero_grad()
    total = None
    for part in parts:
        loss, st = loss_fn(part, len(batch))
        loss.backward()
        del loss
        if total is None:
            total = st
        else:
            total.add(st)
    for opt in optimizers:
        opt.step()
    return total


def joint_step(model: GeneratorModel, baseline: BaselineEstimator, batch: Batch,
               cfg: TrainConfig, optimizers: Sequence[Optimizer], masks: MaskTable | None = None,
               epoch: int = 0) -> dict:
    """One split update of the joint loss; returns per-example means."""
    st = split_update(batch, cfg.S,
                      lambda part, norm: joint_loss(model, baseline, part, cfg, masks, epoch, norm),
                      optimizers)
    return {k: getattr(st, k) / st.n for k in ("loss", "xent", "reinforce", "baseline", "gleu")}


def xent_step(model: GeneratorModel, batch: Batch, cfg: TrainConfig,
              optimizers: Sequence[Optimizer], masks: MaskTable | None = None) -> dict:
    def fn(part, norm):
        loss = xent_loss(model, part, make_head(model, part, masks, "train"), norm=norm)
        return loss, StepStats(loss=loss.item() * norm, xent=loss.item() * norm, n=len(part))

    st = split_update(batch, cfg.S, fn, optimizers)
    return {"loss": st.loss / st.n}


# ---------------------------------------------------------------------------
# loops


def evaluate(model: GeneratorModel, examples: Sequence[Example], masks: MaskTable | None = None,
             max_n: int = 50, batch_size: int = 64) -> dict:
    """Greedy decoding of ``examples``: mean sentence GLEU and corpus BLEU (x100)."""
    hyps = decode_examples(model, examples, None if masks is None else masks.get("eval"),
                           max_n, batch_size)
    refs = [[t for t in e.target if t != EOS] for e in examples]
    return {"gleu": mean_gleu(hyps, refs), "bleu": corpus_bleu(hyps, refs), "hyps": hyps}


@dataclass
class Curves:
    rows: list[dict] = field(default_factory=list)
    deterministic: bool = True

    def add(self, **row) -> None:
        self.rows.append(row)

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_FIELDS)
            for r in self.rows:
                w.writerow(_format_row(r, self.deterministic))


def _format_row(r: dict, deterministic: bool) -> list[str]:
    out = []
    for k in CURVE_FIELDS:
        v = r.get(k, "")
        if k == "seconds" and deterministic:
            v = ""
        elif isinstance(v, float):
            v = f"{v:.6f}"
        out.append(str(v))
    return out


def _eval_points(n_batches: int, per_epoch: int) -> set[int]:
    return {max(1, round(n_batches * j / per_epoch)) for j in range(1, per_epoch + 1)}


def _run_phase(phase: str, model, train, dev, cfg: TrainConfig, masks, epochs: int,
               opt: Optimizer, step_fn: Callable, curves: Curves | None, epoch_offset: float,
               select_best: bool) -> dict:
    sched = HalvingSchedule(opt.lr, cfg.freeze_epochs)
    n_batches = -(-len(train) // cfg.batch_size)
    points = _eval_points(n_batches, cfg.evals_per_epoch)
    best = {"bleu": -1.0, "gleu": -1.0, "state": None, "epoch": 0.0}
    result = {"epoch_seconds": [], "epoch_peak_bytes": []}
    for epoch in range(epochs):
        model.train()
        loss_sum, count = 0.0, 0
        seg_time, seg_t0 = 0.0, time.perf_counter()
        tracker.reset_peak()
        epoch_time = 0.0
        epoch_peak = 0
        batches = batch_iter(train, cfg.batch_size, cfg.seed, epoch, cfg.sort_by)
        for b, batch in enumerate(batches, 1):
            stats = step_fn(batch, epoch)
            if not math.isfinite(stats["loss"]):
                raise T.NumericalError(f"{phase} loss became {stats['loss']}")
            loss_sum += stats["loss"] * len(batch)
            count += len(batch)
            if b in points:
                seg_time = time.perf_counter() - seg_t0
                epoch_time += seg_time
                peak = tracker.peak
                epoch_peak = max(epoch_peak, peak)
                ep = epoch + b / n_batches
                ev = evaluate(model, dev, masks, cfg.max_n, cfg.eval_batch_size)
                score = ev["bleu"] if phase == "xent" else ev["gleu"]
                opt.lr = sched.update(score, ep)
                log.info("%s epoch %.2f loss %.4f dev gleu %.4f bleu %.2f lr %.4g",
                         phase, epoch_offset + ep, loss_sum / count, ev["gleu"], ev["bleu"], opt.lr)
                if curves is not None:
                    curves.add(epoch=epoch_offset + ep, phase=phase, loss=loss_sum / count,
                               dev_gleu=ev["gleu"], dev_bleu=ev["bleu"], lr=opt.lr,
                               seconds=seg_time, peak_bytes=peak)
                key = (ev["bleu"], ev["gleu"]) if phase == "xent" else (ev["gleu"], ev["bleu"])
                if key > ((best["bleu"], best["gleu"]) if phase == "xent"
                          else (best["gleu"], best["bleu"])):
                    best.update(bleu=ev["bleu"], gleu=ev["gleu"], epoch=epoch_offset + ep,
                                state=copy.deepcopy(model.state_dict()) if select_best else None)
                tracker.reset_peak()
                seg_t0 = time.perf_counter()
        result["epoch_seconds"].append(epoch_time)
        result["epoch_peak_bytes"].append(epoch_peak)
    if select_best and best["state"] is not None:
        model.load_state_dict(best["state"])
    result.update(best_bleu=best["bleu"], best_gleu=best["gleu"], best_epoch=best["epoch"])
    return result


def train_xent(model: GeneratorModel, train: Sequence[Example], dev: Sequence[Example],
               cfg: TrainConfig, masks: MaskTable | None = None, epochs: int | None = None,
               curves: Curves | None = None, select_best: bool = True) -> dict:
    """Teacher-forced training with gold-union masks; keeps the best dev-BLEU parameters."""
    epochs = cfg.ce_epochs if epochs is None else epochs
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr,
                         weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm,
                         **({"momentum": cfg.momentum} if cfg.optimizer == "sgd" else {}))
    return _run_phase("xent", model, train, dev, cfg, masks, epochs, opt,
                      lambda batch, ep: xent_step(model, batch, cfg, [opt], masks),
                      curves, 0.0, select_best)


def train_rl(model: GeneratorModel, train: Sequence[Example], dev: Sequence[Example],
             cfg: TrainConfig, masks: MaskTable | None = None,
             baseline: BaselineEstimator | None = None, epochs: int | None = None,
             curves: Curves | None = None, epoch_offset: float = 0.0,
             select_best: bool = True) -> dict:
    """Joint REINFORCE training; the dev-GLEU-best parameters are kept."""
    epochs = cfg.rl_epochs if epochs is None else epochs
    baseline = baseline or BaselineEstimator(model.cfg.d, cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.rl_lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    bopt = Adam(baseline.parameters(), lr=cfg.baseline_lr)
    out = _run_phase("rl", model, train, dev, cfg, masks, epochs, opt,
                     lambda batch, ep: joint_step(model, baseline, batch, cfg, [opt, bopt],
                                                  masks, ep),
                     curves, epoch_offset, select_best)
    out["baseline"] = baseline
    return out


def pretrain_then_rl(make_model: Callable[[], GeneratorModel], train: Sequence[Example],
                     dev: Sequence[Example], cfg: TrainConfig, masks: MaskTable | None = None,
                     pretrain_epochs: Sequence[int] | None = None,
                     curves_path=None) -> list[dict]:
    """CE pre-training followed by RL, once per pre-training length.

    Without ``pretrain_epochs`` a single run uses ``cfg.ce_epochs``.  Every
    run contributes its own rows (phase ``xent`` / ``rl``, prefixed with the
    setting when sweeping) to one curves file.
    """
    settings = list(pretrain_epochs) if pretrain_epochs is not None else [cfg.ce_epochs]
    sweep = pretrain_epochs is not None
    curves = Curves(deterministic=cfg.deterministic)
    results = []
    for n_pre in settings:
        model = make_model()
        run_curves = Curves(deterministic=cfg.deterministic)
        ce = train_xent(model, train, dev, cfg, masks, n_pre, run_curves) if n_pre > 0 else {}
        before = evaluate(model, dev, masks, cfg.max_n, cfg.eval_batch_size)
        rl = train_rl(model, train, dev, cfg, masks, epochs=cfg.rl_epochs, curves=run_curves,
                      epoch_offset=float(n_pre))
        after = evaluate(model, dev, masks, cfg.max_n, cfg.eval_batch_size)
        for r in run_curves.rows:
            if sweep:
                r["phase"] = f"{r['phase']}@pre{n_pre}"
            curves.add(**r)
        results.append({"pretrain_epochs": n_pre, "model": model, "xent": ce, "rl": rl,
                        "gleu_before": before["gleu"], "bleu_before": before["bleu"],
                        "gleu_after": after["gleu"], "bleu_after": after["bleu"]})
    if curves_path is not None:
        curves.write(curves_path)
    return results


def profile_rl_epoch(model: GeneratorModel, train: Sequence[Example], cfg: TrainConfig,
                     masks: MaskTable | None = None, max_batches: int | None = None,
                     epoch: int = 0) -> dict:
    """Wall time and live-tensor high-water marks of one RL pass (no evaluation)."""
    baseline = BaselineEstimator(model.cfg.d, cfg.seed)
    opt = SGD(model.parameters(), lr=cfg.rl_lr, momentum=cfg.momentum,
              weight_decay=cfg.weight_decay, clip_norm=cfg.clip_norm)
    bopt = Adam(baseline.parameters(), lr=cfg.baseline_lr)
    model.train()
    seconds, n = 0.0, 0
    with tracker.scope() as mem:
        for batch in batch_iter(train, cfg.batch_size, cfg.seed, epoch, cfg.sort_by):
            if max_batches is not None and n >= max_batches:
                break
            t0 = time.perf_counter()
            joint_step(model, baseline, batch, cfg, [opt, bopt], masks, epoch)
            seconds += time.perf_counter() - t0
            n += 1
    return {"seconds": seconds, "batches": n,
            "peak_bytes": mem["peak_bytes"], "peak_activation_bytes": mem["peak_activation_bytes"]}
