"""Float64 numeric substrate: autograd, softmax/cross-entropy, sampling."""

from .autograd import Tensor, backward
from .primitives import cross_entropy_soft, finite_diff_grad, softmax
from .rng import SeededRng, sample_beta

__all__ = [
    "Tensor",
    "backward",
    "cross_entropy_soft",
    "finite_diff_grad",
    "softmax",
    "SeededRng",
    "sample_beta",
]
