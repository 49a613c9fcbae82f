"""
A small softmax is an exact renormalization
===========================================

The reduced output layer only scores the K words a vocabulary predictor
selected for the current input.  This walk-through shows that its
distribution is the full softmax restricted to those words and renormalized,
and that words outside the selection receive no gradient at all.
"""

import numpy as np

from vocabrl import tensor as T
from vocabrl.generator import (GeneratorConfig, GeneratorModel, ReducedHead, output_dist_full,
                               output_dist_reduced)

###############################################################################
# A generator with a 50-word target vocabulary.  Only its output layer matters
# here, so the decoder vectors are drawn at random.

T.set_default_dtype(np.float64)
rng = np.random.default_rng(0)
model = GeneratorModel(GeneratorConfig(vocab_size=50, src_vocab_size=10, d=8, dropout=0.0))
x = T.Tensor(rng.normal(size=(2, 8)))

###############################################################################
# Each row gets its own selection of K = 6 word ids.

ids = np.array([[2, 7, 11, 19, 30, 41],
                [2, 3, 4, 5, 6, 7]])
head = ReducedHead(model, ids)
small = output_dist_reduced(head, x)
print("small-softmax rows sum to", small.data.sum(axis=1))

###############################################################################
# Restrict the full distribution to the same ids and renormalize by hand.

with T.no_grad():
    full = output_dist_full(model, x).data
restricted = np.take_along_axis(full, ids, axis=1)
restricted /= restricted.sum(axis=1, keepdims=True)
print("largest difference:", np.abs(small.data - restricted).max())

###############################################################################
# Backpropagate any loss through the small softmax: the rows of the output
# matrix that no selection contains keep an all-zero gradient.

(small * rng.normal(size=small.shape)).sum().backward()
touched = np.flatnonzero(np.abs(model.out_weight.grad).sum(axis=1))
print("rows with gradient:", touched)
print("selected ids:      ", np.unique(ids))
