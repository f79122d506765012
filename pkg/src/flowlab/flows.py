"""One-hidden-layer networks used by the unconstrained and constrained flows.

Every output coordinate ``i`` (1-based) owns a network whose outer weights
and initial inner weights are frozen at initialization; only the offsets
``dw`` and ``db`` train.  UNF networks read the unit-norm embedding of
``x[:i]`` (length ``i + 1``) through a ReLU layer and model the diagonal
Jacobian entry as ``elu_plus_one(N)``.  CNF networks read ``x[:i]`` directly
through a tanh layer scaled by ``tau`` and *are* the flow coordinate.

All forward helpers accept either a single prefix of shape ``(i,)`` (and then
return a float) or a batch of shape ``(n, i)`` (and then return an array).
"""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ._kernels import relu_forward
from .numcore import Rng, sample_half_normal, sample_normal

__all__ = [
    "UNF",
    "CNF",
    "CNF_SQUARE",
    "EXPONENTIAL",
    "GAUSSIAN",
    "FAMILIES",
    "BASES",
    "NonPositiveJacobian",
    "FlowParams",
    "FlowModel",
    "embed_normalized",
    "elu_plus_one",
    "elu_plus_one_prime",
    "relu",
    "tanh_prime",
    "tanh_second",
    "unf_net_forward",
    "unf_derivative",
    "cnf_net_forward",
    "cnf_partial_xi",
    "cnf_square_forward",
    "cnf_square_partial_xi",
    "init_unf",
    "init_cnf",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

UNF = "UNF"
CNF = "CNF"
CNF_SQUARE = "CNF-SquareReparam"
FAMILIES = (UNF, CNF, CNF_SQUARE)

EXPONENTIAL = "exponential"
GAUSSIAN = "gaussian"
BASES = (EXPONENTIAL, GAUSSIAN)

FORMAT_VERSION = 1


class NonPositiveJacobian(ArithmeticError):
    """A CNF diagonal Jacobian entry came out <= 0."""

    def __init__(self, msg="nonpositive Jacobian"):
        super().__init__(msg)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(u):
    return np.maximum(u, 0.0)


def elu_plus_one(u):
    """``exp(u)`` for ``u < 0`` and ``u + 1`` otherwise."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u < 0, np.exp(np.minimum(u, 0.0)), u + 1.0)
    return out if out.ndim else float(out)


def elu_plus_one_prime(u):
    """Derivative of :func:`elu_plus_one`; takes the right limit 1 at 0."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(u < 0, np.exp(np.minimum(u, 0.0)), 1.0)
    return out if out.ndim else float(out)


def log_elu_plus_one(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0, u, np.log1p(np.maximum(u, 0.0)))


def tanh_prime(u):
    t = np.tanh(u)
    return 1.0 - t * t


def tanh_second(u):
    t = np.tanh(u)
    return -2.0 * t * (1.0 - t * t)


def embed_normalized(x_prefix, clamp=False):
    """Append ``sqrt(1 - ||x||^2)`` so the result has unit 2-norm.

    With ``clamp=True`` points outside the unit ball get a zero residual
    coordinate instead of raising; quadrature nodes rely on this.
    """
    x = np.asarray(x_prefix, dtype=np.float64)
    sq = np.sum(x * x, axis=-1, keepdims=True)
    if not clamp and np.any(sq > 1.0):
        raise ValueError("point outside unit ball")
    resid = np.sqrt(np.maximum(0.0, 1.0 - sq))
    return np.concatenate([x, resid], axis=-1)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class FlowParams:
    """Parameters of the network for output coordinate ``dim_index``.

    ``outer``, ``w0`` and ``b0`` are frozen; ``dw`` and ``db`` are the
    trainable offsets and start at zero.
    """

    dim_index: int
    outer: np.ndarray
    w0: np.ndarray
    b0: np.ndarray
    dw: np.ndarray = None
    db: np.ndarray = None

    def __post_init__(self):
        self.outer = np.asarray(self.outer, dtype=np.float64)
        self.w0 = np.atleast_2d(np.asarray(self.w0, dtype=np.float64))
        self.b0 = np.asarray(self.b0, dtype=np.float64)
        if self.dw is None:
            self.dw = np.zeros_like(self.w0)
        if self.db is None:
            self.db = np.zeros_like(self.b0)
        self.dw = np.atleast_2d(np.asarray(self.dw, dtype=np.float64))
        self.db = np.asarray(self.db, dtype=np.float64)
        m = self.outer.shape[0]
        if (self.w0.shape[0] != m or self.b0.shape != (m,)
                or self.dw.shape != self.w0.shape or self.db.shape != (m,)):
            raise ValueError("shape mismatch in FlowParams")

    @property
    def width(self):
        return self.outer.shape[0]

    @property
    def input_dim(self):
        return self.w0.shape[1]

    @property
    def weight(self):
        return self.w0 + self.dw

    @property
    def bias(self):
        return self.b0 + self.db

    def offsets(self):
        """Offsets as one ``(m, input_dim + 1)`` matrix, rows ``[dw_r, db_r]``."""
        return np.hstack([self.dw, self.db[:, None]])

    def copy(self):
        return FlowParams(self.dim_index, self.outer.copy(), self.w0.copy(),
                          self.b0.copy(), self.dw.copy(), self.db.copy())


@dataclass
class FlowModel:
    family: str
    d: int
    per_dim: list
    tau: float = 1.0
    eps_floor: float = 1e-3
    base: str = EXPONENTIAL
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.base not in BASES:
            raise ValueError(f"unknown base distribution {self.base!r}")
        if len(self.per_dim) != self.d:
            raise ValueError("need one FlowParams per dimension")
        extra = 1 if self.family == UNF else 0
        for k, p in enumerate(self.per_dim):
            if p.dim_index != k + 1 or p.input_dim != k + 1 + extra:
                raise ValueError(f"bad shapes for dimension {k + 1}")

    @property
    def width(self):
        return self.per_dim[0].width

    def copy(self):
        return FlowModel(self.family, self.d, [p.copy() for p in self.per_dim],
                         self.tau, self.eps_floor, self.base, dict(self.meta))

    def offsets(self):
        return [p.offsets() for p in self.per_dim]

    def set_offsets(self, offsets):
        for p, th in zip(self.per_dim, offsets):
            p.dw[...] = th[:, :-1]
            p.db[...] = th[:, -1]

    def frozen_digest(self):
        """SHA-256 over every frozen array; changes iff a frozen value does."""
        h = hashlib.sha256()
        for p in self.per_dim:
            for arr in (p.outer, p.w0, p.b0):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _batch(x_prefix, width):
    x = np.asarray(x_prefix, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != width:
        raise ValueError(f"shape mismatch: expected prefix length {width}, got {x.shape[1]}")
    return x, single


def _out(v, single):
    return float(v[0]) if single else v


def unf_forward_embedded(p, xbar):
    """ReLU network on already-embedded inputs ``xbar`` of shape (n, i+1)."""
    xbar = np.ascontiguousarray(xbar, dtype=np.float64)
    return relu_forward(xbar, np.ascontiguousarray(p.weight.T), p.bias, p.outer)


def unf_net_forward(p, x_prefix):
    x, single = _batch(x_prefix, p.input_dim - 1)
    return _out(unf_forward_embedded(p, embed_normalized(x)), single)


def unf_derivative(p, x_prefix):
    """Modeled diagonal Jacobian entry ``elu_plus_one(N_i(x))``."""
    return elu_plus_one(unf_net_forward(p, x_prefix))


def cnf_net_forward(tau, p, x_prefix):
    x, single = _batch(x_prefix, p.input_dim)
    return _out(tau * (np.tanh(x @ p.weight.T + p.bias) @ p.outer), single)


def cnf_partial_xi(tau, p, x_prefix):
    """Exact derivative of :func:`cnf_net_forward` in its last input."""
    x, single = _batch(x_prefix, p.input_dim)
    u = x @ p.weight.T + p.bias
    val = tau * ((tanh_prime(u) * p.weight[:, -1]) @ p.outer)
    if np.any(val <= 0):
        raise NonPositiveJacobian()
    return _out(val, single)


def _zeta(w):
    w = w.copy()
    w[:, -1] = w[:, -1] ** 2
    return w


def cnf_square_forward(tau, p, x_prefix):
    """Squared-reparameterization CNF: outer weights and last input weight squared."""
    x, single = _batch(x_prefix, p.input_dim)
    u = x @ _zeta(p.weight).T + p.bias
    return _out(tau * (np.tanh(u) @ (p.outer ** 2)), single)


def cnf_square_partial_xi(tau, p, x_prefix):
    x, single = _batch(x_prefix, p.input_dim)
    wz = _zeta(p.weight)
    u = x @ wz.T + p.bias
    return _out(tau * ((tanh_prime(u) * wz[:, -1]) @ (p.outer ** 2)), single)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_unf(d, m, eps_a, rng, base=EXPONENTIAL):
    """Outer ~ N(0, eps_a^2); inner weights and biases ~ N(0, 1/m)."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    s = 1.0 / np.sqrt(m)
    per_dim = []
    for i in range(1, d + 1):
        a = sample_normal(rng, 0.0, eps_a, m)
        w0 = sample_normal(rng, 0.0, s, (m, i + 1))
        b0 = sample_normal(rng, 0.0, s, m)
        per_dim.append(FlowParams(i, a, w0, b0))
    return FlowModel(UNF, d, per_dim, tau=1.0, base=base,
                     meta={"eps_a": eps_a})


def init_cnf(d, m, eps_a, sigma_wb, rng, tau=None, eps_floor=1e-3,
             base=GAUSSIAN, square=False):
    """Half-normal outer and monotone-coordinate weights; the rest N(0, sigma_wb^2).

    ``tau`` defaults to ``1/m``.  The monotone-coordinate weight is raised to
    ``eps_floor`` if a draw lands below it, so the model starts feasible.
    """
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    tau = 1.0 / m if tau is None else float(tau)
    per_dim = []
    for i in range(1, d + 1):
        a = sample_half_normal(rng, eps_a, m)
        w0 = sample_normal(rng, 0.0, sigma_wb, (m, i))
        w0[:, -1] = sample_half_normal(rng, sigma_wb, m)
        if not square:
            w0[:, -1] = np.maximum(w0[:, -1], eps_floor)
        b0 = sample_normal(rng, 0.0, sigma_wb, m)
        per_dim.append(FlowParams(i, a, w0, b0))
    family = CNF_SQUARE if square else CNF
    return FlowModel(family, d, per_dim, tau=tau, eps_floor=eps_floor,
                     base=base, meta={"eps_a": eps_a, "sigma_wb": sigma_wb})


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(model):
    return {
        "format": "flowlab-model",
        "version": FORMAT_VERSION,
        "family": model.family,
        "d": model.d,
        "m": model.width,
        "tau": model.tau,
        "eps_floor": model.eps_floor,
        "base": model.base,
        "meta": model.meta,
        "per_dim": [
            {
                "dim_index": p.dim_index,
                "outer": p.outer.tolist(),
                "w0": p.w0.tolist(),
                "b0": p.b0.tolist(),
                "dw": p.dw.tolist(),
                "db": p.db.tolist(),
            }
            for p in model.per_dim
        ],
    }


def model_from_dict(doc):
    if doc.get("format") != "flowlab-model":
        raise ValueError("not a flowlab model document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {doc.get('version')}")
    per_dim = [FlowParams(e["dim_index"], e["outer"], e["w0"], e["b0"],
                          e["dw"], e["db"]) for e in doc["per_dim"]]
    return FlowModel(doc["family"], doc["d"], per_dim, doc["tau"],
                     doc["eps_floor"], doc["base"], doc.get("meta", {}))


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
