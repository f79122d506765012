"""Right-endpoint rectangle rule for rebuilding ``f_i`` from its derivative.

Integration always runs over the last coordinate from -1 to ``x_i``; every
node shares the coefficient ``(x_i + 1) / Q`` and node ``j`` sits at
``-1 + j * (x_i + 1) / Q`` (``j = 1..Q``), so the last node is ``x_i`` itself.
"""
from dataclasses import dataclass

import numpy as np

from .flows import UNF, elu_plus_one, embed_normalized, unf_forward_embedded

__all__ = [
    "QuadratureScheme",
    "DEFAULT_Q",
    "quad_nodes",
    "batch_nodes",
    "rectangle_sum",
    "reconstruct_f",
    "quad_error_oracle",
]

DEFAULT_Q = 64


@dataclass(frozen=True)
class QuadratureScheme:
    q_points: int = DEFAULT_Q
    rule: str = "rectangle-right"

    def __post_init__(self):
        if int(self.q_points) < 1:
            raise ValueError("Q must be >= 1")
        if self.rule != "rectangle-right":
            raise ValueError(f"unsupported rule {self.rule!r}")

    def nodes(self, x_prefix):
        return quad_nodes(x_prefix, self.q_points)


def _check_q(Q):
    Q = int(Q)
    if Q < 1:
        raise ValueError("Q must be >= 1")
    return Q


def quad_nodes(x_prefix, Q):
    """Coefficient and the ``(Q, i)`` node matrix for one prefix ``x[:i]``.

    Returns ``(delta, nodes)``; the rule weights every node by ``delta``.
    """
    Q = _check_q(Q)
    x = np.atleast_1d(np.asarray(x_prefix, dtype=np.float64))
    upper = x[-1]
    if upper < -1.0:
        raise ValueError("lower limit exceeds upper limit")
    delta = (upper + 1.0) / Q
    nodes = np.repeat(x[None, :], Q, axis=0)
    nodes[:, -1] = -1.0 + np.arange(1, Q + 1) * delta
    nodes[-1, -1] = upper
    return float(delta), nodes


def batch_nodes(x_prefix, Q):
    """Vectorized :func:`quad_nodes` over a batch ``(n, i)``.

    Returns ``delta`` of shape ``(n,)`` and nodes of shape ``(n, Q, i)``.
    """
    Q = _check_q(Q)
    x = np.atleast_2d(np.asarray(x_prefix, dtype=np.float64))
    upper = x[:, -1]
    if np.any(upper < -1.0):
        raise ValueError("lower limit exceeds upper limit")
    delta = (upper + 1.0) / Q
    nodes = np.repeat(x[:, None, :], Q, axis=1)
    nodes[:, :, -1] = -1.0 + np.arange(1, Q + 1)[None, :] * delta[:, None]
    nodes[:, -1, -1] = upper
    return delta, nodes


def rectangle_sum(fprime, lower, upper, Q):
    """Right-endpoint sum of a scalar integrand over ``[lower, upper]``."""
    Q = _check_q(Q)
    delta = (upper - lower) / Q
    t = lower + np.arange(1, Q + 1) * delta
    t[-1] = upper
    vals = np.asarray(fprime(t), dtype=np.float64) * np.ones_like(t)
    return float(delta * np.sum(vals))


def reconstruct_f(model, i, x_prefix, Q=DEFAULT_Q):
    """Rectangle-rule estimate of ``f_i(x[:i])`` for a UNF model.

    Accepts one prefix ``(i,)`` or a batch ``(n, i)``.  Nodes that leave the
    unit ball get a clamped embedding.
    """
    if model.family != UNF:
        raise ValueError("reconstruct_f needs a UNF model")
    p = model.per_dim[i - 1]
    x = np.asarray(x_prefix, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != i:
        raise ValueError(f"shape mismatch: expected prefix length {i}")
    delta, nodes = batch_nodes(x, Q)
    n = x.shape[0]
    xbar = embed_normalized(nodes.reshape(n * Q, i), clamp=True)
    deriv = elu_plus_one(unf_forward_embedded(p, xbar)).reshape(n, Q)
    out = delta * deriv.sum(axis=1)
    return float(out[0]) if single else out


def quad_error_oracle(fprime, f_analytic, upper, Q):
    """Absolute error of the rectangle sum from -1 to ``upper``.

    ``f_analytic`` is the antiderivative normalized so ``f_analytic(-1) = 0``.
    """
    return abs(rectangle_sum(fprime, -1.0, upper, Q) - float(f_analytic(upper)))
