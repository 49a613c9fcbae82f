import itertools

import numpy as np
import pytest

from vocabrl import decode as Dm
from vocabrl import generator as G
from vocabrl import tensor as T
from vocabrl.corpus import BOS, EOS, Batch, Example
from vocabrl.predictor import PredictorModel, VocabMask

V, SV, D = 14, 9, 6


def _gen(seed=0, scale=1.0, **kw):
    m = G.GeneratorModel(G.GeneratorConfig(vocab_size=V, d=D, src_vocab_size=SV, dropout=0.0,
                                           seed=seed, **kw))
    rng = np.random.default_rng(seed + 50)
    for p in m.parameters():
        p.data[...] = rng.uniform(-scale, scale, size=p.shape)
    m.eval()
    return m


SOURCES = [np.array(s) for s in ([4, 5, 6], [7], [8, 4, 4, 5], [6, 7])]


class TestGreedy:
    def test_eos_only_mask(self):
        m = _gen()
        assert Dm.greedy_decode(m, SOURCES[0], VocabMask(np.array([EOS]))) == []

    def test_identity_mask_equals_full(self):
        m = _gen()
        for src in SOURCES:
            assert Dm.greedy_decode(m, src, VocabMask.identity(V), 12) == Dm.greedy_decode(m, src, None, 12)

    def test_deterministic_and_bounded(self):
        m = _gen()
        a = [Dm.greedy_decode(m, s, max_n=7) for s in SOURCES]
        assert a == [Dm.greedy_decode(m, s, max_n=7) for s in SOURCES]
        assert all(len(x) <= 7 for x in a)

    def test_batch_matches_single(self):
        m = _gen()
        ex = [Example(i, s, np.array([EOS])) for i, s in enumerate(SOURCES)]
        single = [Dm.greedy_decode(m, s, max_n=10) for s in SOURCES]
        assert Dm.decode_examples(m, ex, max_n=10, batch_size=3) == single
        masks = {e.id: VocabMask(np.array([0, 1, 2, 3, 5, 8, 9, 11])) for e in ex}
        single_m = [Dm.greedy_decode(m, s, masks[0], 10) for s in SOURCES]
        assert Dm.decode_examples(m, ex, masks, max_n=10) == single_m


def _exhaustive(m, src, ids, max_n, alpha):
    """Score every sequence over ``ids`` that ends in EOS or hits ``max_n``."""
    best = (-np.inf, None)
    head = G.ReducedHead(m, [VocabMask(ids)])
    with T.no_grad():
        for n in range(1, max_n + 1):
            for seq in itertools.product(ids, repeat=n):
                if EOS in seq[:-1] or (n < max_n and seq[-1] != EOS):
                    continue
                st = m.initial_state_single(src)
                prev, score = BOS, 0.0
                for tok in seq:
                    st, s = m.step(st, [prev])
                    lg = head.step_logits(s.data)[0].astype(np.float64)
                    lp = lg - np.log(np.exp(lg - lg.max()).sum()) - lg.max()
                    score += lp[list(head.ids[0]).index(tok)]
                    prev = tok
                norm = score / n ** alpha
                if norm > best[0]:
                    best = (norm, [t for t in seq if t != EOS])
    return best


class TestBeam:
    def test_width_one_is_greedy(self):
        m = _gen()
        for src in SOURCES:
            assert Dm.beam_decode(m, src, width=1, max_n=10) == Dm.greedy_decode(m, src, max_n=10)

    @pytest.mark.parametrize("alpha", [0.0, 1.0])
    def test_matches_exhaustive_search(self, alpha):
        ids = np.array([EOS, 5, 9])
        for seed in range(3):
            m = _gen(seed=seed, scale=1.5)
            src = SOURCES[seed]
            score, toks = _exhaustive(m, src, ids, 4, alpha)
            got = Dm.beam_decode(m, src, VocabMask(ids), width=27, max_n=4, alpha=alpha, nbest=True)
            assert got[0][0] == toks
            assert got[0][2] == pytest.approx(score, abs=1e-9)

    def test_best_of_finished(self):
        m = _gen()
        res = Dm.beam_decode(m, SOURCES[2], width=4, max_n=8, nbest=True)
        norms = [r[2] for r in res]
        assert norms == sorted(norms, reverse=True)
        assert Dm.beam_decode(m, SOURCES[2], width=4, max_n=8) == res[0][0]

    def test_tokens_stay_in_mask(self):
        m = _gen()
        mask = VocabMask(np.array([0, 1, 2, 3, 6, 10]))
        for src in SOURCES:
            for toks, _, _ in Dm.beam_decode(m, src, mask, width=5, max_n=9, nbest=True):
                assert set(toks) <= set(mask.selected)

    def test_wider_beam_never_worse_unnormalized(self, f64):
        # float64: in float32 the same sequence scores differently by ~1e-7
        # depending on how many rows share the matmul
        m = _gen(scale=1.5)
        for src in SOURCES:
            best = [Dm.beam_decode(m, src, width=w, max_n=8, norm="none", nbest=True)[0][1]
                    for w in (1, 2, 4, 8)]
            assert all(b2 >= b1 - 1e-9 for b1, b2 in zip(best, best[1:]))

    def test_errors(self):
        with pytest.raises(ValueError):
            Dm.beam_decode(_gen(), SOURCES[0], width=0)
        with pytest.raises(ValueError):
            Dm.beam_decode(_gen(), SOURCES[0], norm="gnmt")


class TestWithPredictor:
    def test_tokens_in_mask_and_timing(self):
        m = _gen()
        pred = PredictorModel(V, d_v=8, src_vocab_size=SV, seed=0)
        for K in (6, 10, V):   # decode-time K need not match the training K
            toks, mask, tm = Dm.decode_with_predictor(m, pred, SOURCES[0], K, max_n=10)
            assert mask.K == K and set(toks) <= set(mask.selected)
            assert tm["total_ms"] >= tm["mask_ms"] + tm["decode_ms"] - 1e-6
            assert tm["total_ms"] - tm["mask_ms"] - tm["decode_ms"] < 5.0
        toks, _, _ = Dm.decode_with_predictor(m, pred, SOURCES[0], V, mode="beam", width=1)
        assert toks == Dm.greedy_decode(m, SOURCES[0])

    def test_benchmark_rows(self, tmp_path):
        m = _gen()
        pred = PredictorModel(V, d_v=8, src_vocab_size=SV, seed=0)
        ex = [Example(i, s, np.array([EOS])) for i, s in enumerate(SOURCES)]
        rows = Dm.decode_benchmark(m, ex, pred, [("full", None), ("small", 8)], max_n=6, warmup=1)
        assert [r["setting"] for r in rows] == ["full", "small"]
        assert rows[0]["ratio"] == 1.0 and rows[1]["K"] == 8 and rows[0]["K"] == V
        assert rows[1]["model_size"] > rows[0]["model_size"]
        Dm.write_benchmark_csv(tmp_path / "b.csv", rows)
        header = (tmp_path / "b.csv").read_text().splitlines()[0]
        assert header == "setting,vocab,K,mean_ms,p50_ms,p95_ms,model_size,ratio"
