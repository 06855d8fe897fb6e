"""Variational Bayesian transformer for sequence transduction.

A desk-scale, from-scratch stack: float64 reverse-mode autodiff, Bayesian
feed-forward layers trained with the local reparameterization trick, a
transformer encoder/decoder with a convolutional frontend, a joint CTC +
cross-entropy objective with an epoch-weighted KL term, beam-search
decoding, and edit-distance error metrics.
"""

from .autodiff import Tensor
from .bayes_linear import GaussianVariationalLayer, KlAccumulator, gaussian_kl

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "GaussianVariationalLayer",
    "KlAccumulator",
    "gaussian_kl",
    "__version__",
]
