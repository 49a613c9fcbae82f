"""Sentence generators with full or mask-reduced softmax heads.

Two source paths share one decoder:

* text: bidirectional LSTM encoder, global attention and input feeding;
* features: a dense vector mapped to the decoder's initial hidden state.

The output matrix ``W_p`` doubles as the target embedding table.  A
:class:`ReducedHead` gathers the K rows of ``W_p``/``b_p`` named by each
example's :class:`~vocabrl.predictor.VocabMask`, so the softmax only spans the
predicted vocabulary; gradients scatter back onto exactly those rows.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .corpus import BOS, EOS, PAD, Batch
from .predictor import VocabMask, stack_masks
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class GeneratorConfig:
    vocab_size: int
    d: int = 256
    layers: int = 1
    src_vocab_size: int | None = None
    feature_dim: int | None = None
    attention: bool = True
    input_feed: bool = True
    score: str = "general"
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if (self.src_vocab_size is None) == (self.feature_dim is None):
            raise ValueError("give exactly one of src_vocab_size or feature_dim")
        if self.feature_dim is not None:
            self.attention = False
        if not self.attention:
            self.input_feed = False
        if self.score not in ("general", "dot"):
            raise ValueError(f"unknown attention score {self.score!r}")
        if self.layers not in (1, 2):
            raise ValueError("decoder supports 1 or 2 layers")

    @classmethod
    def preset(cls, name: str, **kw) -> "GeneratorConfig":
        presets = {"small": dict(d=256, layers=1), "large": dict(d=512, layers=2)}
        return cls(**{**presets[name], **kw})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Encoded:
    states: Tensor            # (B, M, 2d)
    mask: np.ndarray          # (B, M) bool
    keys: Tensor | None       # (B, M, d) attention keys; None without attention
    score_bias: np.ndarray    # (B, M) 0 on tokens, -1e9 on padding

    def index(self, rows) -> "Encoded":
        return Encoded(Tensor(self.states.data[rows]), self.mask[rows],
                       None if self.keys is None else Tensor(self.keys.data[rows]),
                       self.score_bias[rows])


@dataclass
class DecoderState:
    h: list[Tensor]
    c: list[Tensor]
    s_prev: Tensor | None = None
    enc: Encoded | None = None
    t: int = 0

    def index(self, rows) -> "DecoderState":
        """Reorder/select batch rows (decode time only, no gradient)."""
        rows = np.asarray(rows)
        return DecoderState([Tensor(h.data[rows]) for h in self.h],
                            [Tensor(c.data[rows]) for c in self.c],
                            None if self.s_prev is None else Tensor(self.s_prev.data[rows]),
                            None if self.enc is None else self.enc.index(rows), self.t)


class GeneratorModel(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        d = cfg.d
        self.out_weight = nn.parameter((cfg.vocab_size, d), name="W_p")
        self.out_bias = nn.parameter((cfg.vocab_size,), name="b_p")
        self.tgt_embed = nn.Embedding(cfg.vocab_size, d, table=self.out_weight)
        if cfg.src_vocab_size is not None:
            self.src_embed = nn.Embedding(cfg.src_vocab_size, d)
            self.enc_fwd = nn.LSTMCell(d, d)
            self.enc_bwd = nn.LSTMCell(d, d)
            if cfg.attention and cfg.score == "general":
                self.attn = nn.Linear(2 * d, d, bias=False)
            if cfg.attention:
                self.attn_out = nn.Linear(3 * d, d)
        else:
            self.feat = nn.Linear(cfg.feature_dim, d)
        first_in = 2 * d if cfg.input_feed else d
        self.dec = [nn.LSTMCell(first_in if i == 0 else d, d) for i in range(cfg.layers)]
        self.rng = np.random.default_rng([cfg.seed, 11])
        nn.init_params(self, cfg.seed)

    def reset_parameters(self, rng):
        nn._uniform(rng, self.out_weight)
        self.out_bias.data[...] = 0.0

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def is_text(self) -> bool:
        return self.cfg.src_vocab_size is not None

    def _drop(self, x: Tensor) -> Tensor:
        return nn.dropout(x, self.cfg.dropout, self.training, self.rng)

    # -- encoders

    def encode(self, src_ids: np.ndarray, mask: np.ndarray | None = None):
        """Bi-LSTM over padded source ids (B, M); returns ``(Encoded, h0)``."""
        if not self.is_text:
            raise TypeError("encode() needs a text-source model")
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        if src_ids.shape[1] == 0:
            raise ValueError("cannot encode an empty source")
        if mask is None:
            mask = np.ones(src_ids.shape, dtype=bool)
        states, h0 = nn.bilstm_encode(self.enc_fwd, self.enc_bwd, self.src_embed(src_ids), mask)
        d = self.cfg.d
        if not self.cfg.attention:
            keys = None
        elif self.cfg.score == "general":
            keys = self.attn(states)
        else:
            keys = states[..., :d] + states[..., d:]
        bias = np.where(mask, 0.0, NEG_INF).astype(states.dtype)
        return Encoded(states, mask, keys, bias), h0

    def init_from_features(self, f) -> DecoderState:
        if self.is_text:
            raise TypeError("init_from_features() needs a feature-source model")
        f = f if isinstance(f, Tensor) else Tensor(np.atleast_2d(f).astype(T.get_default_dtype()))
        if f.shape[-1] != self.cfg.feature_dim:
            raise ValueError(f"feature width {f.shape[-1]} != {self.cfg.feature_dim}")
        h0 = T.tanh(self.feat(f))
        return self._fresh_state(h0, None)

    def _fresh_state(self, h0: Tensor, enc: Encoded | None) -> DecoderState:
        zeros = Tensor(np.zeros(h0.shape, dtype=h0.dtype))
        s_prev = zeros if self.cfg.input_feed else None
        return DecoderState([h0] * self.cfg.layers, [zeros] * self.cfg.layers, s_prev, enc, 0)

    def initial_state(self, batch: Batch) -> DecoderState:
        if batch.is_features:
            return self.init_from_features(batch.features)
        ids, mask = batch.source
        enc, h0 = self.encode(ids, mask)
        return self._fresh_state(h0, enc)

    def initial_state_single(self, source) -> DecoderState:
        source = np.asarray(source)
        if source.dtype.kind == "f":
            return self.init_from_features(source[None])
        enc, h0 = self.encode(source[None])
        return self._fresh_state(h0, enc)

    # -- decoder

    def attention(self, h: Tensor, enc: Encoded) -> tuple[Tensor, Tensor]:
        """Attentional vector s_t (B, d) and the weights a (B, M)."""
        if enc is None or enc.states.shape[1] == 0:
            raise ValueError("attention needs encoder states")
        B, M, _ = enc.states.shape
        scores = T.matmul(enc.keys, h.reshape(B, -1, 1)).reshape(B, M) + enc.score_bias
        a = T.softmax(scores, axis=-1)
        ctx = T.matmul(a.reshape(B, 1, M), enc.states).reshape(B, -1)
        s = T.tanh(self.attn_out(self._drop(T.concat([h, ctx], axis=-1))))
        return s, a

    def step(self, state: DecoderState, prev_ids) -> tuple[DecoderState, Tensor]:
        """Advance one token; returns the new state and the vector fed to the head.

        The returned vector is s_t on the text path and h_t on the feature path,
        with output dropout applied in train mode.
        """
        prev_ids = np.atleast_1d(np.asarray(prev_ids, dtype=np.int64))
        if prev_ids.max() >= self.vocab_size or prev_ids.min() < 0:
            raise IndexError("previous token id outside the vocabulary")
        x = self.tgt_embed(prev_ids)
        return self.step_embedded(state, x)

    def step_embedded(self, state: DecoderState, x: Tensor) -> tuple[DecoderState, Tensor]:
        if self.cfg.input_feed:
            x = T.concat([x, state.s_prev], axis=-1)
        hs, cs = [], []
        for i, cell in enumerate(self.dec):
            if i > 0:
                x = self._drop(x)
            h, c = nn.lstm_step(cell, state.h[i], state.c[i], x)
            hs.append(h)
            cs.append(c)
            x = h
        if self.cfg.attention:
            s, _ = self.attention(x, state.enc)
        else:
            s = x
        new = DecoderState(hs, cs, s if self.cfg.input_feed else None, state.enc, state.t + 1)
        return new, s

    def out_vector(self, s: Tensor) -> Tensor:
        return self._drop(s)

    def full_head(self) -> "FullHead":
        return FullHead(self)

    def reduced_head(self, masks) -> "ReducedHead":
        return ReducedHead(self, masks)

    def hparams(self) -> dict:
        return self.cfg.to_dict()


# ---------------------------------------------------------------------------
# output heads


def _pick_log_softmax(logits: Tensor, idx: np.ndarray) -> Tensor:
    """``log_softmax(logits)[..., idx]`` as one node.

    Only a per-row log-normalizer is kept; the backward pass recomputes the
    probabilities from the logits, so no second vocabulary-sized buffer lives
    in the graph.
    """
    z = logits.data
    idx = np.asarray(idx, dtype=np.int64)
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    out = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0] - lse[..., 0]

    def backward(g):
        p = np.exp(z - lse)
        p *= -g[..., None]
        np.put_along_axis(p, idx[..., None],
                          np.take_along_axis(p, idx[..., None], axis=-1) + g[..., None], axis=-1)
        return (p,)

    return T.custom_op(out, (logits,), backward)


class FullHead:
    """Softmax over the whole target vocabulary."""

    reduced = False

    def __init__(self, model: GeneratorModel):
        self.model = model
        self.K = model.vocab_size

    def step_logits(self, x: np.ndarray) -> np.ndarray:
        m = self.model
        return x @ m.out_weight.data.T + m.out_bias.data

    def logits(self, x: Tensor, precomputed: np.ndarray | None = None) -> Tensor:
        """Logits for (B, d) or (B, T, d) vectors."""
        m = self.model
        if precomputed is None:
            return T.linear(x, m.out_weight, m.out_bias)
        W, b = m.out_weight, m.out_bias
        xd, wd = x.data, W.data

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1]), g2.sum(axis=0))

        return T.custom_op(precomputed, (x, W, b), backward)

    def to_global(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local)

    def to_local(self, gids: np.ndarray) -> np.ndarray:
        return np.asarray(gids)

    def index(self, rows) -> "FullHead":
        return self


class ReducedHead:
    """Per-example K x d slices of ``W_p`` and ``b_p`` (the gathered small softmax)."""

    reduced = True

    def __init__(self, model: GeneratorModel, masks):
        if isinstance(masks, VocabMask):
            masks = [masks]
        ids = stack_masks(masks) if isinstance(masks, (list, tuple)) else np.asarray(masks)
        if ids.ndim == 1:
            ids = ids[None]
        # local index i always means the i-th smallest selected id
        ids = np.sort(ids, axis=1)
        if np.any(ids[:, 1:] == ids[:, :-1]):
            raise ValueError("mask ids must be distinct")
        if ids.max() >= model.vocab_size:
            raise ValueError("mask id outside the vocabulary")
        self.model = model
        self.ids = ids.astype(np.int64)
        self.K = ids.shape[1]
        self.W = T.take_rows(model.out_weight, self.ids)                  # (B, K, d)
        bias_col = model.out_bias.reshape(model.vocab_size, 1)
        self.b = T.take_rows(bias_col, self.ids).reshape(self.ids.shape)  # (B, K)

    def step_logits(self, x: np.ndarray) -> np.ndarray:
        return np.matmul(self.W.data, x[:, :, None])[:, :, 0] + self.b.data

    def logits(self, x: Tensor, precomputed: np.ndarray | None = None) -> Tensor:
        """Logits (B, K) for x (B, d), or (B, T, K) for x (B, T, d)."""
        seq = x.ndim == 3
        W, b = self.W, self.b
        xd, wd = x.data, W.data
        if precomputed is None:
            if seq:
                out = np.matmul(xd, np.swapaxes(wd, 1, 2)) + b.data[:, None, :]
            else:
                out = np.matmul(wd, xd[:, :, None])[:, :, 0] + b.data
        else:
            out = precomputed

        def backward(g):
            if seq:
                gx = np.matmul(g, wd)
                gw = np.matmul(np.swapaxes(g, 1, 2), xd)
                gb = g.sum(axis=1)
            else:
                gx = np.matmul(g[:, None, :], wd)[:, 0, :]
                gw = g[:, :, None] * xd[:, None, :]
                gb = g
            return gx, gw, gb

        return T.custom_op(out, (x, W, b), backward)

    def to_global(self, local: np.ndarray) -> np.ndarray:
        local = np.asarray(local)
        rows = np.arange(self.ids.shape[0]).reshape((-1,) + (1,) * (local.ndim - 1))
        return self.ids[rows, local]

    def to_local(self, gids: np.ndarray) -> np.ndarray:
        """Local ids of global words per example; -1 where absent."""
        gids = np.asarray(gids, dtype=np.int64)
        out = np.empty_like(gids)
        for b in range(self.ids.shape[0]):
            out[b] = VocabMask(self.ids[b]).local_of_global(gids[b])
        return out

    def index(self, rows) -> "ReducedHead":
        """Select rows for decoding (no gradient)."""
        new = ReducedHead.__new__(ReducedHead)
        new.model = self.model
        new.ids = self.ids[rows]
        new.K = self.K
        new.W = Tensor(self.W.data[rows])
        new.b = Tensor(self.b.data[rows])
        return new


def make_head(model: GeneratorModel, masks=None):
    return FullHead(model) if masks is None else ReducedHead(model, masks)


def output_dist_full(model: GeneratorModel, x: Tensor) -> Tensor:
    return T.softmax(FullHead(model).logits(x), axis=-1)


def output_dist_reduced(head: ReducedHead, x: Tensor) -> Tensor:
    return T.softmax(head.logits(x), axis=-1)


def step(model: GeneratorModel, state: DecoderState, prev_ids, head=None):
    """One decoder step returning ``(new_state, distribution)``."""
    head = head or FullHead(model)
    new, s = model.step(state, prev_ids)
    return new, T.softmax(head.logits(model.out_vector(s)), axis=-1)


# ---------------------------------------------------------------------------
# teacher forcing and sampling


def teacher_forced_vectors(model: GeneratorModel, batch: Batch,
                           state: DecoderState | None = None) -> Tensor:
    """Decoder output vectors (B, N, d) with gold previous tokens."""
    state = state or model.initial_state(batch)
    tgt_in, _, _ = batch.target
    emb = model.tgt_embed(tgt_in)
    outs = []
    for t in range(tgt_in.shape[1]):
        state, s = model.step_embedded(state, emb[:, t, :])
        outs.append(model.out_vector(s))
    return T.stack(outs, axis=1)


def gold_log_probs(model: GeneratorModel, batch: Batch, head=None,
                   state: DecoderState | None = None, skip_missing: bool = False):
    """Per-position log p(gold) (B, N) and the mask of positions that count."""
    head = head or FullHead(model)
    _, tgt_out, tmask = batch.target
    local = head.to_local(tgt_out)
    missing = (local < 0) & tmask
    if missing.any() and not skip_missing:
        raise KeyError("gold word missing from the reduced vocabulary")
    mask = tmask & (local >= 0)
    X = teacher_forced_vectors(model, batch, state)
    logp = _pick_log_softmax(head.logits(X), np.where(mask, local, 0))
    return logp, mask


@dataclass
class Sample:
    tokens: np.ndarray          # (B, T) global ids, PAD after the end
    mask: np.ndarray            # (B, T) positions that belong to the sentence
    logp: Tensor                # (B, T) log-probabilities of the sampled ids
    states: np.ndarray          # (B, T, d) pre-dropout s_t / h_t, detached
    lengths: np.ndarray = field(default=None)

    def sentences(self) -> list[list[int]]:
        """Sampled ids per example, EOS stripped."""
        out = []
        for row, m in zip(self.tokens, self.mask):
            toks = row[m].tolist()
            if toks and toks[-1] == EOS:
                toks = toks[:-1]
            out.append(toks)
        return out


def example_uniforms(seed, epoch: int, ids, steps: int) -> np.ndarray:
    """Per-example uniform draws; identical however the batch is split."""
    return np.stack([np.random.default_rng([seed, epoch, int(i)]).random(steps) for i in ids])


def sample_inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1, dtype=np.float64)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


def sample_batch(model: GeneratorModel, batch_or_state, head, max_n: int, uniforms: np.ndarray,
                 greedy: bool = False) -> Sample:
    """Sample (or, with ``greedy``, arg-max) sentences while recording the graph.

    Each step draws from the distribution of ``head``; the returned log
    probabilities are under that same distribution and remain differentiable.
    Truncation at ``max_n`` ends a sentence like EOS does.
    """
    state = (model.initial_state(batch_or_state) if isinstance(batch_or_state, Batch)
             else batch_or_state)
    B = state.h[0].shape[0]
    prev = np.full(B, BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    K = head.K
    dtype = state.h[0].dtype
    logits_buf = np.empty((B, max_n, K), dtype=dtype)
    local_ids = np.zeros((B, max_n), dtype=np.int64)
    tokens = np.full((B, max_n), PAD, dtype=np.int64)
    mask = np.zeros((B, max_n), dtype=bool)
    outs, raw = [], []
    t = 0
    while t < max_n and not done.all():
        state, s = model.step(state, prev)
        x = model.out_vector(s)
        outs.append(x)
        raw.append(s.data)
        lg = head.step_logits(x.data)
        logits_buf[:, t] = lg
        if greedy:
            loc = lg.argmax(axis=-1)
        else:
            p = T._softmax_np(lg.astype(np.float64), -1)
            loc = sample_inverse_cdf(p, uniforms[:, t])
        gid = head.to_global(loc)
        live = ~done
        mask[:, t] = live
        local_ids[:, t] = np.where(live, loc, 0)
        tokens[:, t] = np.where(live, gid, PAD)
        done |= gid == EOS
        prev = np.where(live, gid, EOS)
        t += 1
    X = T.stack(outs, axis=1)
    logp = _pick_log_softmax(head.logits(X, logits_buf[:, :t]), local_ids[:, :t])
    return Sample(tokens[:, :t], mask[:, :t], logp, np.stack(raw, axis=1), mask[:, :t].sum(1))


def sample_sentence(model: GeneratorModel, source, head=None, max_n: int = 50, rng=None):
    """Sample one sentence; returns ``(tokens, per-step log-probs, per-step states)``."""
    rng = rng if rng is not None else np.random.default_rng()
    head = head or FullHead(model)
    state = model.initial_state_single(source)
    smp = sample_batch(model, state, head, max_n, rng.random((1, max_n)))
    n = int(smp.lengths[0])
    return smp.tokens[0, :n], smp.logp.data[0, :n], smp.states[0, :n]
