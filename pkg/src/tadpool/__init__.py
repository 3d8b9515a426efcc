"""Retrieval-augmented adaptation of small classifiers to unlabeled target data.

The package is organized around one pipeline: generate or load a shifted
classification task, index an auxiliary pool of unlabeled vectors, and
adapt a source-trained classifier on the target set by combining
pseudo-label self-training with a contrastive loss whose negatives are
retrieved from the pool through a bounded FIFO feature bank.
"""

from tadpool.numerics import Rng, cosine_sim, l2_normalize, log_sum_exp, softmax

__all__ = [
    "Rng",
    "cosine_sim",
    "l2_normalize",
    "log_sum_exp",
    "softmax",
]

__version__ = "0.1.0"
