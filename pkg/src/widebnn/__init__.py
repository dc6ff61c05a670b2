"""Mean-field variational inference for wide Bayesian neural networks.

A library plus CLI for fitting diagonal-Gaussian posteriors over
width-scaled fully-connected networks, evaluating the closed-form bounds
that force wide posteriors back to the prior, computing infinite-width
kernel references, and reproducing the non-odd-activation counterexample
at desk scale.
"""

__version__ = "0.1.0"

from . import bounds, counterexample, data, harness, mfvi, net, nngp  # noqa: F401
from .net import ActivationSpec, Architecture, activation  # noqa: F401
from .mfvi import (  # noqa: F401
    LikelihoodSpec,
    MeanFieldGaussian,
    TrainConfig,
    gaussian_likelihood,
    logistic_likelihood,
    student_t_likelihood,
)
from .data import Dataset  # noqa: F401
