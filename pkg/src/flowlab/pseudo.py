"""Pseudo-networks (first-order linearizations in the offsets) and diagnostics.

For UNF the pseudo-network keeps the ReLU gates of the initial
pre-activations, ``P = sum_r a_r (relu(u0_r) + 1[u0_r > 0] (<dw_r, xbar> + db_r))``,
and the pseudo-derivative is ``elu_plus_one(P)``; the final activation is not
linearized.  For CNF the pseudo-network splits into a frozen part ``P_c`` and a
part ``P_l`` linear in the offsets.
"""
import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from ._kernels import relu_forward_linearized
from .flows import (
    CNF,
    UNF,
    elu_plus_one,
    embed_normalized,
    tanh_prime,
    tanh_second,
    unf_forward_embedded,
)
from .numcore import Rng, norm_pq
from .quadrature import DEFAULT_Q
from .training import batch_loss_and_grad, drift_norms, per_sample_loss

__all__ = [
    "CouplingReport",
    "ConvexityVerdict",
    "PseudoLossEvaluator",
    "unf_pseudo_forward",
    "cnf_pseudo_forward",
    "pseudo_loss",
    "convexity_test",
    "recheck_witness",
    "probe_points",
    "coupling_report",
    "coupling_trace",
    "rescale_offsets",
    "sup_linear_part",
    "write_coupling_csv",
]


def _batch(x, k):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != k:
        raise ValueError(f"shape mismatch: expected prefix length {k}, got {x.shape[1]}")
    return x, single


def _unf_pseudo_embedded(p, xbar):
    xbar = np.ascontiguousarray(xbar)
    return relu_forward_linearized(xbar, np.ascontiguousarray(p.w0.T), p.b0,
                                   np.ascontiguousarray(p.dw.T), p.db, p.outer)


def unf_pseudo_forward(p, x_prefix):
    """Pseudo-network value at one prefix ``(i,)`` or a batch ``(n, i)``."""
    x, single = _batch(x_prefix, p.input_dim - 1)
    out = _unf_pseudo_embedded(p, embed_normalized(x))
    return float(out[0]) if single else out


def cnf_pseudo_forward(tau, p, x_prefix):
    """``(P_c, P_l)``: the frozen part and the part linear in the offsets."""
    x, single = _batch(x_prefix, p.input_dim)
    u0 = x @ p.w0.T + p.b0
    pc = tau * (np.tanh(u0) @ p.outer)
    pl = tau * ((tanh_prime(u0) * (x @ p.dw.T + p.db)) @ p.outer)
    if single:
        return float(pc[0]), float(pl[0])
    return pc, pl


def _cnf_pseudo_partial(tau, p, x):
    u0 = x @ p.w0.T + p.b0
    lin = x @ p.dw.T + p.db
    w = p.w0[:, -1]
    return tau * ((tanh_prime(u0) * (w + p.dw[:, -1]) + tanh_second(u0) * w * lin) @ p.outer)


def pseudo_loss(model, x, Q=DEFAULT_Q):
    """Loss with every network replaced by its pseudo-network (mean over rows).

    The base distribution is the model's.  Returns ``inf`` where a CNF
    pseudo-derivative is not positive.
    """
    return float(np.mean(per_sample_loss(model, x, Q, linearized=True, strict=False)))


class PseudoLossEvaluator:
    """Pseudo-loss of a fixed model as a function of its offsets.

    ``sample_params`` draws offsets i.i.d. ``N(0, offset_scale^2)``;
    ``sample_point`` draws a probe point uniformly from the radius-0.5 ball.
    """

    def __init__(self, model, Q=DEFAULT_Q, offset_scale=1.0, radius=0.5):
        self.model = model.copy()
        self.Q = Q
        self.offset_scale = offset_scale
        self.radius = radius

    def sample_params(self, rng):
        return [rng.normal(0.0, self.offset_scale, th.shape) for th in self.model.offsets()]

    def sample_point(self, rng):
        d = self.model.d
        v = rng.normal(0.0, 1.0, d)
        v /= np.linalg.norm(v)
        return v * self.radius * rng.uniform() ** (1.0 / d)

    def combine(self, lam, th1, th2):
        return [lam * a + (1.0 - lam) * b for a, b in zip(th1, th2)]

    def loss(self, theta, x):
        self.model.set_offsets(theta)
        return pseudo_loss(self.model, x, self.Q)


@dataclass
class ConvexityVerdict:
    trials: int
    max_violation: float
    witness: tuple = field(repr=False, default=None)
    skipped: int = 0
    tol: float = 1e-9

    @property
    def passed(self):
        return self.max_violation <= self.tol


def _segment_violation(evaluator, th1, th2, lam, x):
    mid = evaluator.combine(lam, th1, th2)
    return evaluator.loss(mid, x) - lam * evaluator.loss(th1, x) - (1.0 - lam) * evaluator.loss(th2, x)


def convexity_test(evaluator, n, rng=0, tol=1e-9, stop_above=None):
    """Random segment test of convexity.

    Each trial draws ``theta1, theta2``, ``lam`` in [0, 1] and a probe point
    and measures ``L(lam th1 + (1-lam) th2) - lam L(th1) - (1-lam) L(th2)``.
    Trials with a non-finite loss are skipped and counted.  With
    ``stop_above`` set, the search ends at the first violation above it.
    """
    if n < 1:
        raise ValueError("need at least one trial")
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    worst, witness, skipped, done = -math.inf, None, 0, 0
    for _ in range(n):
        th1 = evaluator.sample_params(rng)
        th2 = evaluator.sample_params(rng)
        lam = float(rng.uniform())
        x = evaluator.sample_point(rng)
        done += 1
        with np.errstate(all="ignore"):
            v = _segment_violation(evaluator, th1, th2, lam, x)
        if not math.isfinite(v):
            skipped += 1
            continue
        if v > worst:
            worst, witness = v, (th1, th2, lam, x)
        if stop_above is not None and worst > stop_above:
            break
    return ConvexityVerdict(done, worst, witness, skipped, tol)


def recheck_witness(evaluator, verdict):
    th1, th2, lam, x = verdict.witness
    return _segment_violation(evaluator, th1, th2, lam, x)


# ---------------------------------------------------------------------------
# coupling
# ---------------------------------------------------------------------------

def probe_points(d, n=256, seed=0, radius=0.5):
    """Quasi-uniform points in the radius-``radius`` ball from a scrambled Sobol stream."""
    sob = qmc.Sobol(d, scramble=True, seed=seed)
    k = max(6, math.ceil(math.log2(2 * n)))
    out = np.empty((0, d))
    while out.shape[0] < n:
        pts = (sob.random_base2(k) - 0.5) * 2.0 * radius
        pts = pts[np.sum(pts * pts, axis=1) <= radius * radius]
        out = np.vstack([out, pts])
        # every later draw doubles the stream so the total stays a power of 2
        k = int(math.log2(sob.num_generated))
    return out[:n]


@dataclass
class CouplingReport:
    step: int
    sup_net_gap: float
    sup_deriv_gap: float
    loss_gap: float
    grad_gap: float
    drift_2_2: float
    drift_2_inf: float
    drift_2_1: float

    COLUMNS = ("step", "sup_net_gap", "sup_deriv_gap", "loss_gap", "grad_gap",
               "drift_2_2", "drift_2_inf", "drift_2_1")

    def row(self):
        return [getattr(self, c) for c in self.COLUMNS]


def _net_and_pseudo(model, X):
    """Per-dimension (network, pseudo-network, derivative, pseudo-derivative) on probes."""
    out = []
    for k, p in enumerate(model.per_dim):
        xi = X[:, :k + 1]
        if model.family == UNF:
            xbar = embed_normalized(xi)
            n = unf_forward_embedded(p, xbar)
            pv = _unf_pseudo_embedded(p, xbar)
            out.append((n, pv, elu_plus_one(n), elu_plus_one(pv)))
        elif model.family == CNF:
            W = p.w0 + p.dw
            u = xi @ W.T + (p.b0 + p.db)
            n = model.tau * (np.tanh(u) @ p.outer)
            dn = model.tau * ((tanh_prime(u) * W[:, -1]) @ p.outer)
            pc, pl = cnf_pseudo_forward(model.tau, p, xi)
            out.append((n, pc + pl, dn, _cnf_pseudo_partial(model.tau, p, xi)))
        else:
            raise ValueError("coupling is defined for UNF and CNF models")
    return out


def coupling_report(model, probes, Q=DEFAULT_Q, step=0):
    """Network/pseudo-network gaps for the model's current offsets.

    Both gradients are taken on the same probe batch so the comparison is
    paired.  The gradient gap is the (2,1) norm summed over dimensions.
    """
    X = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    pairs = _net_and_pseudo(model, X)
    net_gap = max(float(np.max(np.abs(n - pv))) for n, pv, _, _ in pairs)
    der_gap = max(float(np.max(np.abs(dn - dp))) for _, _, dn, dp in pairs)
    lt = per_sample_loss(model, X, Q)
    lp = per_sample_loss(model, X, Q, linearized=True, strict=False)
    loss_gap = float(np.mean(np.abs(lt - lp)))
    _, gt = batch_loss_and_grad(model, X, Q)
    _, gp = batch_loss_and_grad(model, X, Q, linearized=True)
    grad_gap = sum(norm_pq(a - b, 2, 1) for a, b in zip(gt, gp))
    dn = drift_norms(model)
    return CouplingReport(step, net_gap, der_gap, loss_gap, grad_gap,
                          math.sqrt(sum(v[0] ** 2 for v in dn)),
                          max(v[1] for v in dn), sum(v[2] for v in dn))


def coupling_trace(model, checkpoints, probes, Q=DEFAULT_Q, include_init=True):
    """One :class:`CouplingReport` per checkpoint (plus step 0 at zero offsets)."""
    work = model.copy()
    reports = []
    if include_init:
        work.set_offsets([np.zeros_like(th) for th in work.offsets()])
        reports.append(coupling_report(work, probes, Q, 0))
    for c in checkpoints:
        work.set_offsets(c.offsets)
        reports.append(coupling_report(work, probes, Q, c.step))
    return reports


def write_coupling_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CouplingReport.COLUMNS)
        for r in reports:
            w.writerow([str(r.step)] + [repr(float(v)) for v in r.row()[1:]])


# ---------------------------------------------------------------------------
# size of the linear part under a drift budget
# ---------------------------------------------------------------------------

def rescale_offsets(offsets, budget):
    """Scale offsets so their (2,1) norm, summed over dimensions, equals ``budget``."""
    total = sum(norm_pq(th, 2, 1) for th in offsets)
    if total == 0:
        raise ValueError("cannot rescale zero offsets")
    return [th * (budget / total) for th in offsets]


def sup_linear_part(model, probes):
    """Largest ``|P_l|`` over probe points and dimensions of a CNF model."""
    X = np.atleast_2d(probes)
    return max(float(np.max(np.abs(cnf_pseudo_forward(model.tau, p, X[:, :k + 1])[1])))
               for k, p in enumerate(model.per_dim))
