"""Negative log-likelihood losses, exact gradients and (projected) SGD.

Losses follow the flow NLL without additive constants:

* UNF, exponential base: ``sum_i f~_i(x) - log phi(N_i(x))`` where ``f~_i`` is
  the rectangle-rule reconstruction.  With a Gaussian base the reconstruction
  term becomes ``f~_i^2 / 2``.
* CNF: ``sum_i N_i(x) - log dN_i/dx_i`` (exponential) or
  ``sum_i N_i(x)^2 / 2 - log dN_i/dx_i`` (Gaussian).

Gradients are hand-derived and batched; a batch gradient is the mean of the
per-point gradients.  Gradient arrays use the offset layout of
:meth:`FlowParams.offsets`: one ``(m, k + 1)`` matrix per dimension whose
rows are ``[d/d dw_r, d/d db_r]``.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .flows import (
    CNF,
    CNF_SQUARE,
    EXPONENTIAL,
    GAUSSIAN,
    UNF,
    NonPositiveJacobian,
    elu_plus_one,
    elu_plus_one_prime,
    embed_normalized,
    init_cnf,
    init_unf,
    log_elu_plus_one,
)
from ._kernels import relu_backward, relu_forward, relu_forward_linearized
from .numcore import Rng, norm_pq
from .quadrature import DEFAULT_Q, batch_nodes

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "Checkpoint",
    "NumericAbort",
    "unf_loss",
    "cnf_loss",
    "unf_loss_grad",
    "cnf_loss_grad",
    "per_sample_loss",
    "batch_loss_and_grad",
    "mean_loss",
    "sgd_step",
    "project_cnf",
    "drift_norms",
    "init_model",
    "train",
    "write_checkpoints_csv",
    "read_checkpoints_csv",
]

LOSS_LIMIT = 1e12
PARAM_LIMIT = 1e8


class NumericAbort(ArithmeticError):
    """Training stopped on overflow; carries the last good state."""

    def __init__(self, step, reason, checkpoints=(), model=None):
        super().__init__(f"numeric overflow at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.checkpoints = list(checkpoints)
        self.model = model


@dataclass
class TrainConfig:
    family: str = UNF
    eta: float = 0.05
    T: int = 1000
    batch: int = 32
    m: int = 100
    eps_a: float = 0.2
    sigma_wb: float = None
    tau: float = None
    eps_floor: float = 1e-3
    Q: int = DEFAULT_Q
    base: str = None
    seed: int = 0
    checkpoint_every: int = 1000
    reduction: str = "mean"

    def __post_init__(self):
        if self.base is None:
            self.base = EXPONENTIAL if self.family == UNF else GAUSSIAN
        if self.family == CNF:
            if self.sigma_wb is None:
                self.sigma_wb = 1.0 / math.sqrt(self.m)
            if self.tau is None:
                self.tau = 1.0 / self.m
        self.validate()

    def validate(self):
        if self.family not in (UNF, CNF):
            raise ValueError(f"cannot train family {self.family!r}")
        if not self.eta >= 0:
            raise ValueError("eta must be nonnegative")
        if self.T < 0 or self.batch < 1 or self.m < 1 or self.Q < 1:
            raise ValueError("T >= 0, batch >= 1, m >= 1 and Q >= 1 required")
        if self.family == CNF and not self.eps_floor > 0:
            raise ValueError("eps_floor must be positive for CNF")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class LossBreakdown:
    """Per-dimension ``(reconstruction term, -log dfi/dxi)`` pairs."""

    total: float
    per_dim: list


@dataclass
class Checkpoint:
    step: int
    loss: float
    offsets: list = field(repr=False)
    drift: list = field(default_factory=list)

    @property
    def drift_2_2(self):
        return math.sqrt(sum(d[0] ** 2 for d in self.drift))

    @property
    def drift_2_inf(self):
        return max(d[1] for d in self.drift)

    @property
    def drift_2_1(self):
        return sum(d[2] for d in self.drift)


# ---------------------------------------------------------------------------
# per-dimension kernels
# ---------------------------------------------------------------------------

def _t(w):
    return np.ascontiguousarray(w.T)


def _unf_dim(p, xi, Q, base, linearized=False, grad=True, scale=1.0):
    """Loss terms and (optionally) gradient for one UNF coordinate.

    ``xi`` is the batch of prefixes ``(B, i)``.  The last quadrature node is
    the data point itself, so its network value doubles as ``N_i(x)``.
    """
    B, i = xi.shape
    delta, nodes = batch_nodes(xi, Q)
    xbar = embed_normalized(nodes.reshape(B * Q, i), clamp=True)
    a = p.outer
    if linearized:
        N = relu_forward_linearized(xbar, _t(p.w0), p.b0, _t(p.dw), p.db, a)
    else:
        w, b = p.w0 + p.dw, p.b0 + p.db
        N = relu_forward(xbar, _t(w), b, a)
    N = N.reshape(B, Q)
    Nx = N[:, -1]
    ftil = delta * elu_plus_one(N).sum(axis=1)
    logterm = -log_elu_plus_one(Nx)
    if base == EXPONENTIAL:
        recon, drecon = ftil, np.ones(B)
    else:
        recon, drecon = 0.5 * ftil ** 2, ftil
    if not grad:
        return recon, logterm, None
    gN = (drecon * delta)[:, None] * elu_plus_one_prime(N)
    gN[:, -1] -= elu_plus_one_prime(Nx) / elu_plus_one(Nx)
    gN = np.ascontiguousarray(gN.reshape(-1) * scale)
    # the pseudo-network gates on the initial pre-activations
    if linearized:
        g = relu_backward(xbar, _t(p.w0), p.b0, a, gN)
    else:
        g = relu_backward(xbar, _t(w), b, a, gN)
    return recon, logterm, g


def _cnf_dim(p, xi, tau, base, linearized=False, grad=True, scale=1.0,
             strict=True):
    """Loss terms and gradient for one CNF coordinate (tanh network)."""
    a = p.outer
    if linearized:
        u0 = xi @ p.w0.T + p.b0
        t = np.tanh(u0)
        s = 1.0 - t * t
        lin = xi @ p.dw.T + p.db
        wlast = p.w0[:, -1]
        N = tau * ((t + s * lin) @ a)
        D = tau * ((s * wlast + (-2.0 * t * s) * wlast * lin + s * p.dw[:, -1]) @ a)
    else:
        W = p.w0 + p.dw
        t = np.tanh(xi @ W.T + (p.b0 + p.db))
        s = 1.0 - t * t
        wlast = W[:, -1]
        N = tau * (t @ a)
        D = tau * ((s * wlast) @ a)
    if np.any(D <= 0):
        if strict:
            raise NonPositiveJacobian()
        logterm = np.where(D > 0, -np.log(np.where(D > 0, D, 1.0)), np.inf)
    else:
        logterm = -np.log(D)
    if base == EXPONENTIAL:
        recon, gNv = N, np.ones_like(N)
    else:
        recon, gNv = 0.5 * N * N, N
    if not grad:
        return recon, logterm, None
    cN = gNv * scale
    cD = -scale / D
    s2 = -2.0 * t * s
    Gu = tau * a * (cN[:, None] * s + cD[:, None] * s2 * wlast)
    gw = Gu.T @ xi
    gw[:, -1] += tau * a * (cD @ s)
    gb = Gu.sum(axis=0)
    return recon, logterm, np.hstack([gw, gb[:, None]])


def _cnf_square_dim(p, xi, tau, base, linearized=False):
    """Loss terms for the squared-reparameterization CNF (no gradient)."""
    a2 = p.outer ** 2
    wz0 = p.w0.copy()
    wz0[:, -1] = wz0[:, -1] ** 2
    W = p.w0 + p.dw
    wz = W.copy()
    wz[:, -1] = wz[:, -1] ** 2
    if linearized:
        u0 = xi @ wz0.T + p.b0
        t = np.tanh(u0)
        s = 1.0 - t * t
        lin = xi @ (wz - wz0).T + p.db
        N = tau * ((t + s * lin) @ a2)
        D = tau * ((s * wz[:, -1] + (-2.0 * t * s) * wz0[:, -1] * lin) @ a2)
    else:
        u = xi @ wz.T + (p.b0 + p.db)
        t = np.tanh(u)
        N = tau * (t @ a2)
        D = tau * (((1.0 - t * t) * wz[:, -1]) @ a2)
    logterm = np.where(D > 0, -np.log(np.where(D > 0, D, 1.0)), np.inf)
    recon = N if base == EXPONENTIAL else 0.5 * N * N
    return recon, logterm


def _as_batch(x, d):
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if X.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got {X.shape[1]}")
    return X


def _check_ball(X):
    if np.any(np.sum(X * X, axis=1) > 1.0):
        raise ValueError("point outside unit ball")


def _dim_terms(model, X, Q, linearized, grad, scale, strict=True):
    out = []
    for k, p in enumerate(model.per_dim):
        xi = X[:, :k + 1]
        if model.family == UNF:
            out.append(_unf_dim(p, xi, Q, model.base, linearized, grad, scale))
        elif model.family == CNF:
            out.append(_cnf_dim(p, xi, model.tau, model.base, linearized, grad,
                                scale, strict))
        else:
            if grad:
                raise ValueError("no gradient for the squared-reparameterization CNF")
            out.append(_cnf_square_dim(p, xi, model.tau, model.base, linearized)
                       + (None,))
    return out


# ---------------------------------------------------------------------------
# public losses and gradients
# ---------------------------------------------------------------------------

def per_sample_loss(model, X, Q=DEFAULT_Q, linearized=False, strict=True):
    """Loss of every row of ``X``; ``linearized`` swaps in the pseudo-network."""
    X = _as_batch(X, model.d)
    if model.family == UNF:
        _check_ball(X)
    terms = _dim_terms(model, X, Q, linearized, False, 1.0, strict)
    total = np.zeros(X.shape[0])
    for recon, logterm, _ in terms:
        total += recon + logterm
    return total


def mean_loss(model, X, Q=DEFAULT_Q, chunk=512):
    """Average loss over a dataset, evaluated in chunks to bound memory."""
    X = _as_batch(X, model.d)
    acc = 0.0
    for lo in range(0, X.shape[0], chunk):
        acc += float(np.sum(per_sample_loss(model, X[lo:lo + chunk], Q)))
    return acc / X.shape[0]


def batch_loss_and_grad(model, X, Q=DEFAULT_Q, linearized=False,
                        reduction="mean"):
    """Reduced loss and gradient over the rows of ``X``."""
    X = _as_batch(X, model.d)
    if model.family == UNF:
        _check_ball(X)
    B = X.shape[0]
    scale = 1.0 / B if reduction == "mean" else 1.0
    terms = _dim_terms(model, X, Q, linearized, True, scale)
    loss = 0.0
    grads = []
    for recon, logterm, g in terms:
        loss += float(np.sum(recon + logterm))
        grads.append(g)
    return loss * scale, grads


def _breakdown(model, x, Q, linearized=False):
    X = _as_batch(x, model.d)
    if X.shape[0] != 1:
        raise ValueError("expected a single point")
    if model.family == UNF:
        _check_ball(X)
    terms = _dim_terms(model, X, Q, linearized, False, 1.0)
    per_dim = [(float(r[0]), float(lt[0])) for r, lt, _ in terms]
    return LossBreakdown(sum(r + lt for r, lt in per_dim), per_dim)


def unf_loss(model, x, Q=DEFAULT_Q):
    """Approximate UNF loss at one point, split per dimension."""
    if model.family != UNF:
        raise ValueError("unf_loss needs a UNF model")
    bd = _breakdown(model, x, Q)
    if not math.isfinite(bd.total):
        raise ArithmeticError("numeric overflow")
    return bd


def cnf_loss(model, x):
    """Exact CNF loss at one point, split per dimension."""
    if model.family not in (CNF, CNF_SQUARE):
        raise ValueError("cnf_loss needs a CNF model")
    bd = _breakdown(model, x, None)
    if model.family == CNF_SQUARE and not math.isfinite(bd.total):
        raise NonPositiveJacobian()
    return bd


def unf_loss_grad(model, x, Q=DEFAULT_Q):
    if model.family != UNF:
        raise ValueError("unf_loss_grad needs a UNF model")
    return batch_loss_and_grad(model, x, Q)[1]


def cnf_loss_grad(model, x):
    if model.family != CNF:
        raise ValueError("cnf_loss_grad needs a CNF model")
    return batch_loss_and_grad(model, x)[1]


# ---------------------------------------------------------------------------
# updates
# ---------------------------------------------------------------------------

def sgd_step(model, grads, eta):
    """In place: ``offsets -= eta * grads``.  Returns ``model``."""
    for p, g in zip(model.per_dim, grads):
        if g.shape != (p.width, p.input_dim + 1):
            raise ValueError("gradient shape mismatch")
        p.dw -= eta * g[:, :-1]
        p.db -= eta * g[:, -1]
    return model


def project_cnf(model):
    """In place: keep every monotone-coordinate weight at or above ``eps_floor``."""
    if model.family != CNF:
        raise ValueError("project_cnf needs a CNF model")
    for p in model.per_dim:
        lo = model.eps_floor - p.w0[:, -1]
        np.maximum(p.dw[:, -1], lo, out=p.dw[:, -1])
    return model


def drift_norms(model):
    """Per-dimension ``(||theta||_{2,2}, ||theta||_{2,inf}, ||theta||_{2,1})``."""
    out = []
    for th in model.offsets():
        out.append((norm_pq(th, 2, 2), norm_pq(th, 2, math.inf), norm_pq(th, 2, 1)))
    return out


def init_model(cfg, d, rng=None):
    """Fresh model for ``cfg``; draws from ``rng`` or ``Rng(cfg.seed)``."""
    rng = Rng(cfg.seed) if rng is None else rng
    if cfg.family == UNF:
        return init_unf(d, cfg.m, cfg.eps_a, rng, base=cfg.base)
    return init_cnf(d, cfg.m, cfg.eps_a, cfg.sigma_wb, rng, tau=cfg.tau,
                    eps_floor=cfg.eps_floor, base=cfg.base)


def _points(data):
    return np.asarray(getattr(data, "points", data), dtype=np.float64)


def train(model, data, cfg, rng=None, callback=None):
    """Run ``cfg.T`` steps of mini-batch SGD (projected for CNF).

    Each step draws ``cfg.batch`` indices uniformly with replacement.
    Checkpoints are taken every ``cfg.checkpoint_every`` steps and at the
    final step; each records the mean batch loss since the previous one.
    Raises :class:`NumericAbort` when the loss or a parameter overflows; the
    exception carries the checkpoints so far and the last good model.
    """
    X = _points(data)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ValueError("data dimension does not match model")
    if model.family == UNF:
        _check_ball(X)
    rng = Rng(cfg.seed).spawn(1) if rng is None else rng
    n = X.shape[0]
    checkpoints = []
    running, count = 0.0, 0
    for t in range(1, cfg.T + 1):
        idx = rng.integers(0, n, size=cfg.batch)
        try:
            loss, grads = batch_loss_and_grad(model, X[idx], cfg.Q,
                                              reduction=cfg.reduction)
        except NonPositiveJacobian as exc:
            raise NumericAbort(t, str(exc), checkpoints, model.copy()) from exc
        if not math.isfinite(loss) or abs(loss) > LOSS_LIMIT:
            raise NumericAbort(t, f"loss {loss!r}", checkpoints, model.copy())
        if cfg.eta != 0:
            before = model.copy()
            sgd_step(model, grads, cfg.eta)
            if model.family == CNF:
                project_cnf(model)
            big = max(float(np.max(np.abs(th))) for th in model.offsets())
            if not math.isfinite(big) or big > PARAM_LIMIT:
                raise NumericAbort(t, f"parameter magnitude {big!r}", checkpoints, before)
        running += loss
        count += 1
        if t % cfg.checkpoint_every == 0 or t == cfg.T:
            checkpoints.append(Checkpoint(t, running / count,
                                          [th.copy() for th in model.offsets()],
                                          drift_norms(model)))
            running, count = 0.0, 0
            if callback is not None:
                callback(checkpoints[-1])
    return model, checkpoints


def checkpoint_columns(d):
    cols = ["step", "loss"]
    for i in range(1, d + 1):
        cols += [f"drift_2_2_dim{i}", f"drift_2_inf_dim{i}", f"drift_2_1_dim{i}"]
    return cols


def write_checkpoints_csv(checkpoints, path, d):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(checkpoint_columns(d))
        for c in checkpoints:
            row = [str(c.step), repr(float(c.loss))]
            for dn in c.drift:
                row += [repr(float(v)) for v in dn]
            w.writerow(row)


def read_checkpoints_csv(path):
    """Rows as dicts ``{"step": int, "loss": float, "drift": [(.., .., ..), ...]}``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = (len(header) - 2) // 3
    out = []
    for r in body:
        vals = [float(v) for v in r[2:]]
        out.append({"step": int(r[0]), "loss": float(r[1]),
                    "drift": [tuple(vals[3 * k:3 * k + 3]) for k in range(d)]})
    return out
