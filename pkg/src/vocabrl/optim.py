"""Optimizers, gradient clipping and the dev-score learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state: list[dict[str, np.ndarray]] = [{} for _ in self.params]
        self.steps = 0
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        if self.clip_norm is not None:
            self.last_grad_norm = clip_grad_norm(self.params, self.clip_norm)
        self.steps += 1
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self._update(p, g, st)

    def _update(self, p: Tensor, g: np.ndarray, st: dict) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"steps": np.array(self.steps), "lr": np.array(self.lr)}
        for i, st in enumerate(self.state):
            for k, v in st.items():
                out[f"{i}.{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.steps = int(np.asarray(state["steps"]).reshape(-1)[0])
        self.lr = float(np.asarray(state["lr"]).reshape(-1)[0])
        for key, val in state.items():
            if key in ("steps", "lr"):
                continue
            i, name = key.split(".", 1)
            self.state[int(i)][name] = np.array(val)


class SGD(Optimizer):
    """SGD with heavy-ball momentum: ``v = mu * v + g``, ``p -= lr * v``."""

    def __init__(self, params, lr=1.0, momentum=0.0, **kw):
        super().__init__(params, lr, **kw)
        self.momentum = momentum

    def _update(self, p, g, st):
        if self.momentum:
            v = st.get("momentum")
            if v is None:
                v = st["momentum"] = np.array(g, copy=True)
            else:
                v *= self.momentum
                v += g
            g = v
        p.data -= self.lr * g


class AdaGrad(Optimizer):
    def __init__(self, params, lr=0.08, eps=1e-10, **kw):
        super().__init__(params, lr, **kw)
        self.eps = eps

    def _update(self, p, g, st):
        acc = st.get("sum")
        if acc is None:
            acc = st["sum"] = np.zeros_like(p.data)
        acc += g * g
        p.data -= self.lr * g / (np.sqrt(acc) + self.eps)


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, **kw):
        super().__init__(params, lr, **kw)
        self.betas = betas
        self.eps = eps

    def _update(self, p, g, st):
        b1, b2 = self.betas
        if "m" not in st:
            st["m"] = np.zeros_like(p.data)
            st["v"] = np.zeros_like(p.data)
            st["t"] = np.array(0)
        st["t"] = st["t"] + 1
        t = int(st["t"])
        m, v = st["m"], st["v"]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, params, lr: float, **kw) -> Optimizer:
    kinds = {"sgd": SGD, "adagrad": AdaGrad, "adam": Adam}
    if kind not in kinds:
        raise ValueError(f"unknown optimizer {kind!r}")
    return kinds[kind](params, lr=lr, **kw)


class HalvingSchedule:
    """Halve the learning rate whenever a dev score fails to improve.

    Scores are checked as often as the caller likes (every half epoch in the
    training loops); no halving happens while ``epoch <= freeze_epochs``.
    """

    def __init__(self, lr: float, freeze_epochs: float = 0.0):
        self.lr = lr
        self.freeze_epochs = freeze_epochs
        self.best = -math.inf

    def update(self, score: float, epoch: float) -> float:
        if score > self.best:
            self.best = score
        elif epoch > self.freeze_epochs:
            self.lr /= 2.0
        return self.lr


def lr_schedule(base_lr: float, history: Sequence[tuple[float, float]],
                freeze_epochs: float = 6.0) -> float:
    """Learning rate after replaying ``(epoch, dev_score)`` checks in order."""
    sched = HalvingSchedule(base_lr, freeze_epochs)
    for epoch, score in history:
        sched.update(score, epoch)
    return sched.lr
