"""REINFORCE training for sentence generators with a predicted small vocabulary.

A multi-label predictor picks K candidate target words per input; the
generator's softmax (and hence the RL action space) is restricted to them.
"""

from .corpus import Batch, Example, SyntheticSpec, Vocabulary, make_synthetic_task
from .generator import FullHead, GeneratorConfig, GeneratorModel, ReducedHead
from .metrics import corpus_bleu, gleu, percentile_histogram
from .predictor import PredictorModel, VocabMask
from .tensor import Tensor, gradient_check
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "Batch", "Example", "SyntheticSpec", "Vocabulary", "make_synthetic_task",
    "FullHead", "GeneratorConfig", "GeneratorModel", "ReducedHead",
    "corpus_bleu", "gleu", "percentile_histogram",
    "PredictorModel", "VocabMask", "Tensor", "gradient_check", "TrainConfig",
]
