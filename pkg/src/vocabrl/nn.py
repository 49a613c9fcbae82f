"""Layers shared by the sentence generator and the vocabulary predictor."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_SCALE = 0.1


class Module:
    """Parameter container.

    Tensors held as attributes (directly, or inside child modules and lists of
    modules) are discovered by attribute order, which makes parameter
    enumeration deterministic.  A tensor reachable twice, as with tied
    weights, is reported once under its first name.
    """

    training = True

    def named_tensors(self, prefix: str = "", seen=None) -> Iterator[tuple[str, Tensor]]:
        seen = set() if seen is None else seen
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.", seen)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors():
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def reset_parameters(self, rng: np.random.Generator) -> None:
        pass

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in own.items():
            arr = state[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data[...] = arr

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def parameter(shape, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=T.get_default_dtype()), requires_grad=True, name=name)


def init_params(model: Module, seed: int | np.random.Generator = 0) -> None:
    """Uniform(-0.1, 0.1) weights, zero biases, unit LSTM forget-gate biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for m in model.modules():
        m.reset_parameters(rng)


def _uniform(rng, t: Tensor) -> None:
    t.data[...] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=t.shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.weight = parameter((out_features, in_features))
        self.bias = parameter((out_features,)) if bias else None

    def reset_parameters(self, rng):
        _uniform(rng, self.weight)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    """Lookup table.  Passing ``table`` aliases an existing matrix (weight tying)."""

    def __init__(self, num: int, dim: int, table: Tensor | None = None):
        self.tied = table is not None
        if table is not None:
            if table.shape != (num, dim):
                raise ValueError("tied table has the wrong shape")
            self.table = table
        else:
            self.table = parameter((num, dim))

    def reset_parameters(self, rng):
        if not self.tied:
            _uniform(rng, self.table)

    def __call__(self, ids) -> Tensor:
        return T.take_rows(self.table, ids)


def _lstm_pointwise(z: Tensor, c_prev: Tensor) -> Tensor:
    """Gate nonlinearities and state update, returning ``stack([h, c], axis=-2)``.

    ``z`` holds pre-activations ordered input, forget, candidate, output.
    """
    d = c_prev.shape[-1]
    zd = z.data
    i = 1.0 / (1.0 + np.exp(-zd[..., :d]))
    f = 1.0 / (1.0 + np.exp(-zd[..., d:2 * d]))
    g = np.tanh(zd[..., 2 * d:3 * d])
    o = 1.0 / (1.0 + np.exp(-zd[..., 3 * d:]))
    cp = c_prev.data
    c = f * cp + i * g
    tc = np.tanh(c)
    h = o * tc
    out = np.stack([h, c], axis=-2)

    def backward(gout):
        gh = gout[..., 0, :]
        gc = gout[..., 1, :] + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc * g * i * (1.0 - i),
            gc * cp * f * (1.0 - f),
            gc * i * (1.0 - g * g),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        return dz, gc * f

    return T.custom_op(out, (z, c_prev), backward)


class LSTMCell(Module):
    """LSTM over ``[input; hidden]`` with one fused gate matrix of shape (4d, in + d)."""

    def __init__(self, input_size: int, hidden_size: int):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight = parameter((4 * hidden_size, input_size + hidden_size))
        self.bias = parameter((4 * hidden_size,))

    def reset_parameters(self, rng):
        _uniform(rng, self.weight)
        d = self.hidden_size
        self.bias.data[...] = 0.0
        self.bias.data[d:2 * d] = 1.0

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return lstm_step(self, h, c, x)


def lstm_step(cell: LSTMCell, h_prev: Tensor, c_prev: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    if x.shape[-1] != cell.input_size or h_prev.shape[-1] != cell.hidden_size:
        raise ValueError(f"LSTM width mismatch: input {x.shape}, hidden {h_prev.shape}")
    z = T.linear(T.concat([x, h_prev], axis=-1), cell.weight, cell.bias)
    hc = _lstm_pointwise(z, c_prev)
    return hc[..., 0, :], hc[..., 1, :]


def masked_update(new: Tensor, old: Tensor, m: np.ndarray | None) -> Tensor:
    """Rows with ``m == 0`` keep ``old``; exact for 0/1 masks."""
    if m is None:
        return new
    m = m.astype(new.dtype)[:, None]
    return new * m + old * (1.0 - m)


def bilstm_encode(fwd: LSTMCell, bwd: LSTMCell, embeddings: Tensor,
                  mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Run a bidirectional LSTM over ``embeddings`` of shape (B, M, d_in).

    Returns encoder states (B, M, 2d) with ``[forward; backward]`` at every
    position and the decoder seed ``h0 = forward_last + backward_first``.
    ``mask`` (B, M) marks real tokens; padding must be a suffix.  Padded
    steps freeze the forward state and keep the backward state at zero, so
    results do not depend on how much padding a batch carries.
    """
    if embeddings.ndim == 2:
        states, h0 = bilstm_encode(fwd, bwd, embeddings.reshape(1, *embeddings.shape),
                                   None if mask is None else mask[None])
        return states.reshape(states.shape[1:]), h0.reshape(h0.shape[1:])
    B, M, _ = embeddings.shape
    if M == 0:
        raise ValueError("cannot encode an empty sequence")
    d = fwd.hidden_size
    dtype = embeddings.dtype
    cols = [None] * M
    if mask is not None:
        for t in range(M):
            if not mask[:, t].all():
                cols[t] = mask[:, t]
    xs = [embeddings[:, t, :] for t in range(M)]

    zeros = T.Tensor(np.zeros((B, d), dtype=dtype))
    h, c = zeros, zeros
    fwd_states = []
    for t in range(M):
        hn, cn = lstm_step(fwd, h, c, xs[t])
        h, c = masked_update(hn, h, cols[t]), masked_update(cn, c, cols[t])
        fwd_states.append(h)
    h_last = h

    h, c = zeros, zeros
    bwd_states = [None] * M
    for t in reversed(range(M)):
        hn, cn = lstm_step(bwd, h, c, xs[t])
        h, c = masked_update(hn, h, cols[t]), masked_update(cn, c, cols[t])
        bwd_states[t] = h
    h_first = h

    states = T.concat([T.stack(fwd_states, axis=1), T.stack(bwd_states, axis=1)], axis=-1)
    return states, h_last + h_first


class BatchNorm(Module):
    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.weight = parameter((dim,))
        self.bias = parameter((dim,))
        self.running_mean = Tensor(np.zeros(dim, dtype=T.get_default_dtype()))
        self.running_var = Tensor(np.ones(dim, dtype=T.get_default_dtype()))

    def reset_parameters(self, rng):
        self.weight.data[...] = 1.0
        self.bias.data[...] = 0.0
        self.running_mean.data[...] = 0.0
        self.running_var.data[...] = 1.0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
            return (x - self.running_mean.data) * inv * self.weight + self.bias
        mu = x.mean(axis=0, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=0, keepdims=True)
        xhat = xc / T.sqrt(var + self.eps)
        n = x.shape[0]
        m = self.momentum
        self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mu.data[0]
        unbiased = var.data[0] * (n / max(n - 1, 1))
        self.running_var.data[...] = (1 - m) * self.running_var.data + m * unbiased
        return xhat * self.weight + self.bias


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-rate) at train time, identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep


class ResidualBlock(Module):
    """BN-tanh-linear-BN-tanh-(dropout)-linear with an identity skip."""

    def __init__(self, dim: int, dropout: float = 0.4):
        self.bn1 = BatchNorm(dim)
        self.lin1 = Linear(dim, dim)
        self.bn2 = BatchNorm(dim)
        self.lin2 = Linear(dim, dim)
        self.dropout = dropout
        self.rng = None

    def __call__(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.lin1.weight.shape[1]:
            raise ValueError("residual block width mismatch")
        r2 = T.tanh(self.bn1(v))
        r4 = self.bn2(self.lin1(r2))
        r5 = dropout(T.tanh(r4), self.dropout, self.training, self.rng)
        return self.lin2(r5) + v


def residual_block(v: Tensor, block: ResidualBlock) -> Tensor:
    return block(v)
