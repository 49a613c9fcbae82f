"""
Training with a predicted vocabulary on the synthetic task
==========================================================

End to end on the desk-scale synthetic translation task: train the
vocabulary predictor, look at its recall curve, then train the generator with
the full and the small output layer and compare dev BLEU.  Takes about four
minutes on one CPU.
"""

import numpy as np

from vocabrl.corpus import SyntheticSpec, build_vocab, make_examples, make_synthetic_task
from vocabrl.generator import GeneratorConfig, GeneratorModel
from vocabrl.predictor import PredictorModel, PredictorTrainConfig, recall_at_k, train_predictor
from vocabrl.training import MaskTable, TrainConfig, pretrain_then_rl

###############################################################################
# The task: Zipf-distributed source sentences, reversed and passed through a
# fixed dictionary.  Dev sources never occur in training.

spec = SyntheticSpec()
train_pairs, dev_pairs, _ = make_synthetic_task(spec)
src_vocab = build_vocab([s for s, _ in train_pairs])
tgt_vocab = build_vocab([t for _, t in train_pairs])
train, _ = make_examples(train_pairs, src_vocab, tgt_vocab, 50)
dev, _ = make_examples(dev_pairs, src_vocab, tgt_vocab, 50, start_id=1_000_000)
print(f"{len(train)} training pairs, {len(tgt_vocab)} target types")

###############################################################################
# The vocabulary predictor is a bag-of-embeddings classifier.  Recall@K is the
# share of gold target words inside the top K predictions.

predictor = PredictorModel(len(tgt_vocab), d_v=256, src_vocab_size=len(src_vocab), seed=0)
train_predictor(predictor, train, dev, PredictorTrainConfig(epochs=5))
ks = [5, 10, 20, 50, 100, len(tgt_vocab)]
for k, r in zip(ks, recall_at_k(predictor, dev, ks)):
    print(f"recall@{k:<4d} {r:.3f}")

###############################################################################
# Training masks force the gold words in (100% recall); evaluation and RL
# masks are the pure top-K.  Train a generator with each head: six epochs of
# cross-entropy, then five of REINFORCE with a little cross-entropy mixed in.

K = 100
masks = MaskTable.from_predictor(predictor, train + dev, K)
for head, table in (("full", None), ("small", masks)):
    cfg = TrainConfig(head=head, K=K, batch_size=32, max_n=20, ce_epochs=6, rl_epochs=5, lam=0.005,
                      dropout=0.0, freeze_epochs=2, rl_lr=0.1)

    def make():
        return GeneratorModel(GeneratorConfig(vocab_size=len(tgt_vocab),
                                              src_vocab_size=len(src_vocab), d=64, dropout=0.0))

    result = pretrain_then_rl(make, train, dev, cfg, table)[0]
    print(f"{head:5s} head: BLEU {result['bleu_before']:.1f} after cross-entropy, "
          f"{result['bleu_after']:.1f} after RL")
