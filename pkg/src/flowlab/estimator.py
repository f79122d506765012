"""Scikit-learn style density estimators wrapping UNF and CNF training."""
import numpy as np
from sklearn.base import BaseEstimator, DensityMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .density import invert_batch, log_density, forward_map, sample
from .flows import CNF, EXPONENTIAL, GAUSSIAN, UNF
from .numcore import Rng
from .training import TrainConfig, init_model, train

__all__ = ["UNFDensityEstimator", "CNFDensityEstimator"]


class _FlowEstimator(TransformerMixin, DensityMixin, BaseEstimator):
    _family = None

    def _config(self):
        raise NotImplementedError

    def _validate(self, X, reset):
        X = check_array(X, dtype=np.float64)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, but {type(self).__name__} "
                             f"was fitted with {self.n_features_in_}")
        return X

    def fit(self, X, y=None):
        """Train a fresh flow on the rows of ``X``."""
        X = self._validate(X, reset=True)
        cfg = self._config()
        rng = Rng(cfg.seed)
        model = init_model(cfg, X.shape[1], rng.spawn(0))
        self.model_, self.checkpoints_ = train(model, X, cfg, rng.spawn(1))
        return self

    def score_samples(self, X):
        """Log-density of each row."""
        check_is_fitted(self, "model_")
        return log_density(self.model_, self._validate(X, reset=False), self.Q)

    def score(self, X, y=None):
        """Mean log-likelihood."""
        return float(np.mean(self.score_samples(X)))

    def transform(self, X):
        """Push rows through the flow, ``z = f(x)``."""
        check_is_fitted(self, "model_")
        return forward_map(self.model_, self._validate(X, reset=False), self.Q)

    def inverse_transform(self, Z):
        """Invert the flow by bisection; rows outside the image come back as NaN."""
        check_is_fitted(self, "model_")
        Z = check_array(Z, dtype=np.float64)
        X, _ = invert_batch(self.model_, Z, self.Q)
        return X

    def sample(self, n_samples=1, random_state=None):
        """Draw ``n_samples`` points from the fitted flow."""
        check_is_fitted(self, "model_")
        seed = self.random_state if random_state is None else random_state
        return sample(self.model_, n_samples, Rng(0 if seed is None else seed).spawn(2), self.Q)


class UNFDensityEstimator(_FlowEstimator):
    """Flow whose Jacobian diagonal is ``elu_plus_one`` of a one-hidden-layer ReLU net.

    Inputs must lie in the unit ball.

    Parameters
    ----------
    m : int
        Hidden width.
    eta : float
        SGD step size.
    T : int
        Number of SGD steps.
    batch : int
        Mini-batch size.
    eps_a : float
        Standard deviation of the frozen outer weights.
    Q : int
        Quadrature nodes per coordinate.
    base : {"exponential", "gaussian"}
    random_state : int
    """

    _family = UNF

    def __init__(self, m=400, eta=0.05, T=2000, batch=32, eps_a=0.2, Q=64, base=EXPONENTIAL,
                 random_state=0):
        self.m = m
        self.eta = eta
        self.T = T
        self.batch = batch
        self.eps_a = eps_a
        self.Q = Q
        self.base = base
        self.random_state = random_state

    def _config(self):
        return TrainConfig(family=UNF, eta=self.eta, T=self.T, batch=self.batch, m=self.m,
                           eps_a=self.eps_a, Q=self.Q, base=self.base,
                           seed=0 if self.random_state is None else self.random_state,
                           checkpoint_every=max(self.T, 1))


class CNFDensityEstimator(_FlowEstimator):
    """Flow whose coordinates are one-hidden-layer tanh nets, monotone by projection.

    Parameters
    ----------
    m : int
        Hidden width.
    eta : float
        SGD step size.
    T : int
        Number of SGD steps.
    batch : int
        Mini-batch size.
    eps_a : float
        Scale of the half-normal outer weights.
    sigma_wb : float, optional
        Initial weight and bias scale; ``1/sqrt(m)`` when omitted.
    tau : float, optional
        Output normalization; ``1/m`` when omitted.
    eps_floor : float
        Lower bound kept on the monotone input weight.
    base : {"gaussian", "exponential"}
    random_state : int
    """

    _family = CNF
    Q = 64

    def __init__(self, m=400, eta=0.05, T=2000, batch=32, eps_a=0.2, sigma_wb=None, tau=None,
                 eps_floor=1e-3, base=GAUSSIAN, random_state=0):
        self.m = m
        self.eta = eta
        self.T = T
        self.batch = batch
        self.eps_a = eps_a
        self.sigma_wb = sigma_wb
        self.tau = tau
        self.eps_floor = eps_floor
        self.base = base
        self.random_state = random_state

    def _config(self):
        return TrainConfig(family=CNF, eta=self.eta, T=self.T, batch=self.batch, m=self.m,
                           eps_a=self.eps_a, sigma_wb=self.sigma_wb, tau=self.tau,
                           eps_floor=self.eps_floor, base=self.base,
                           seed=0 if self.random_state is None else self.random_state,
                           checkpoint_every=max(self.T, 1))
