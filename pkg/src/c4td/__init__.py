"""Clustered cross-covariance control for TD critic training on offline data.

The package trains a small ReLU critic with temporal-difference targets while
steering minibatch composition and feature geometry: an EM-fitted Gaussian
mixture over stacked gradient pairs supplies single-cluster minibatches, and a
Frobenius penalty on the within-cluster cross-covariance suppresses the
harmful coupling between target-side and online-side gradients. Policy-side
helpers implement divergence-penalized Gaussian improvement with closed-form
step sizes and the bounds that justify per-cluster training.
"""

from .errors import C4Error, FormatError, InputError, NumericalError, ParseError

__version__ = "0.1.0"

__all__ = [
    "C4Error",
    "FormatError",
    "InputError",
    "NumericalError",
    "ParseError",
    "__version__",
]
