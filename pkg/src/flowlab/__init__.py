"""Overparameterized one-hidden-layer normalizing flows.

Two families share one API: UNF models the Jacobian diagonal with an
unconstrained ReLU network and integrates it numerically; CNF models each
coordinate directly with a tanh network kept monotone by projected SGD.
"""
from .density import invert_flow, kl_monte_carlo, log_density, sample
from .estimator import CNFDensityEstimator, UNFDensityEstimator
from .flows import CNF, CNF_SQUARE, UNF, FlowModel, load_model, save_model
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "UNF",
    "CNF",
    "CNF_SQUARE",
    "FlowModel",
    "TrainConfig",
    "train",
    "log_density",
    "invert_flow",
    "sample",
    "kl_monte_carlo",
    "load_model",
    "save_model",
    "UNFDensityEstimator",
    "CNFDensityEstimator",
]
