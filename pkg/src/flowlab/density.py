"""Change-of-variables densities, inversion by bisection, sampling and KL.

A *flow* here is anything exposing ``d``, ``base``, ``component(i, X)``
(the value of ``f_i`` on a batch of prefixes ``X[:, :i]``) and
``log_diag(X)`` (``sum_i log df_i/dx_i`` per row).  :class:`ModelFlow` adapts
a trained :class:`~flowlab.flows.FlowModel`; target flows in
:mod:`flowlab.datasets` implement the same surface.

With the exponential base the flow's image of the cube is bounded while the
base is not, so ``log_density`` returns ``-inf`` for points mapped outside the
positive orthant and ``sample`` rejects base draws outside the image.
"""
import math
from dataclasses import dataclass

import numpy as np

from .flows import (
    CNF,
    EXPONENTIAL,
    GAUSSIAN,
    UNF,
    cnf_net_forward,
    cnf_partial_xi,
    cnf_square_forward,
    cnf_square_partial_xi,
    embed_normalized,
    log_elu_plus_one,
    unf_forward_embedded,
)
from .numcore import Rng
from .quadrature import DEFAULT_Q, reconstruct_f

__all__ = [
    "OutsideImage",
    "ModelImageTooSmall",
    "SupportMismatch",
    "KLEstimate",
    "ModelFlow",
    "as_flow",
    "base_log_pdf",
    "sample_base",
    "forward_map",
    "log_density",
    "invert_flow",
    "invert_batch",
    "sample",
    "kl_monte_carlo",
]

DEFAULT_TOL = 1e-10
MAX_BISECTION_ITERS = 60
LOG_2PI = math.log(2.0 * math.pi)


class OutsideImage(ValueError):
    def __init__(self, i, z, interval):
        super().__init__(f"target outside image: z_{i}={z!r} not in [{interval[0]!r}, {interval[1]!r}]")
        self.dim = i
        self.interval = interval


class ModelImageTooSmall(RuntimeError):
    pass


class SupportMismatch(ValueError):
    pass


class ModelFlow:
    """Flow view of a :class:`FlowModel`; UNF coordinates use ``Q`` quadrature nodes."""

    def __init__(self, model, Q=DEFAULT_Q):
        self.model = model
        self.Q = Q
        self.d = model.d
        self.base = model.base

    def component(self, i, X):
        m = self.model
        p = m.per_dim[i - 1]
        X = np.atleast_2d(X)[:, :i]
        if m.family == UNF:
            return reconstruct_f(m, i, X, self.Q)
        if m.family == CNF:
            return cnf_net_forward(m.tau, p, X)
        return cnf_square_forward(m.tau, p, X)

    def log_diag(self, X):
        m = self.model
        X = np.atleast_2d(X)
        out = np.zeros(X.shape[0])
        for k, p in enumerate(m.per_dim):
            xi = X[:, :k + 1]
            if m.family == UNF:
                out += log_elu_plus_one(unf_forward_embedded(p, embed_normalized(xi, clamp=True)))
            elif m.family == CNF:
                out += np.log(cnf_partial_xi(m.tau, p, xi))
            else:
                with np.errstate(divide="ignore", invalid="ignore"):
                    out += np.log(cnf_square_partial_xi(m.tau, p, xi))
        return out


def as_flow(obj, Q=DEFAULT_Q):
    return obj if hasattr(obj, "component") else ModelFlow(obj, Q)


def base_log_pdf(z, base):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if base == EXPONENTIAL:
        out = -np.sum(z, axis=1)
        return np.where(np.all(z >= 0, axis=1), out, -np.inf)
    if base == GAUSSIAN:
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * LOG_2PI
    raise ValueError(f"unknown base distribution {base!r}")


def sample_base(rng, n, d, base):
    if base == EXPONENTIAL:
        return rng.generator.standard_exponential((n, d))
    if base == GAUSSIAN:
        return rng.generator.standard_normal((n, d))
    raise ValueError(f"unknown base distribution {base!r}")


def _single(x):
    return np.asarray(x).ndim == 1


def forward_map(model, x, Q=DEFAULT_Q):
    """``z = f(x)`` for one point or a batch of points."""
    flow = as_flow(model, Q)
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Z = np.column_stack([flow.component(i, X) for i in range(1, flow.d + 1)])
    return Z[0] if _single(x) else Z


def log_density(model, x, Q=DEFAULT_Q):
    """``log p_Z(f(x)) + sum_i log df_i/dx_i``; ``-inf`` outside the base support."""
    flow = as_flow(model, Q)
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Z = np.column_stack([flow.component(i, X) for i in range(1, flow.d + 1)])
    out = base_log_pdf(Z, flow.base) + flow.log_diag(X)
    out = np.where(np.isnan(out), -np.inf, out)
    return float(out[0]) if _single(x) else out


def invert_batch(model, Z, Q=DEFAULT_Q, tol=DEFAULT_TOL, on_step=None):
    """Coordinate-wise bisection on ``[-1, 1]`` for a batch of targets.

    Returns ``(X, feasible)``; rows whose target leaves the attainable interval
    of some coordinate are marked infeasible and hold NaN from that coordinate
    on.  ``on_step(i, f_lo, f_hi, z)`` sees the bracket values at every
    iteration.
    """
    flow = as_flow(model, Q)
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    n, d = Z.shape
    if d != flow.d:
        raise ValueError("dimension mismatch")
    X = np.zeros((n, d))
    ok = np.ones(n, dtype=bool)
    lows = np.empty((n, d))
    highs = np.empty((n, d))
    for i in range(1, d + 1):
        z = Z[:, i - 1]
        P = X[:, :i].copy()
        P[:, -1] = -1.0
        f_lo = flow.component(i, P)
        P[:, -1] = 1.0
        f_hi = flow.component(i, P)
        lows[:, i - 1], highs[:, i - 1] = f_lo, f_hi
        ok &= (z >= f_lo) & (z <= f_hi)
        lo = np.full(n, -1.0)
        hi = np.full(n, 1.0)
        best = np.zeros(n)
        best_res = np.full(n, np.inf)
        idx = np.flatnonzero(ok)
        for _ in range(MAX_BISECTION_ITERS):
            if idx.size == 0:
                break
            if on_step is not None:
                on_step(i, f_lo[idx], f_hi[idx], z[idx])
            mid = 0.5 * (lo[idx] + hi[idx])
            P = X[idx, :i].copy()
            P[:, -1] = mid
            f_mid = flow.component(i, P)
            res = np.abs(f_mid - z[idx])
            better = res < best_res[idx]
            best[idx[better]] = mid[better]
            best_res[idx[better]] = res[better]
            right = f_mid < z[idx]
            lo[idx] = np.where(right, mid, lo[idx])
            f_lo[idx] = np.where(right, f_mid, f_lo[idx])
            hi[idx] = np.where(right, hi[idx], mid)
            f_hi[idx] = np.where(right, f_hi[idx], f_mid)
            done = (best_res[idx] <= tol) & (hi[idx] - lo[idx] <= tol)
            idx = idx[~done]
        X[:, i - 1] = np.where(ok, best, np.nan)
    X[~ok] = np.nan
    invert_batch.last_intervals = (lows, highs)
    return X, ok


def invert_flow(model, z, Q=DEFAULT_Q, tol=DEFAULT_TOL):
    """Solve ``f(x) = z`` for one point; raises :class:`OutsideImage`."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    X, ok = invert_batch(model, z[None, :], Q, tol)
    if not ok[0]:
        lows, highs = invert_batch.last_intervals
        i = int(np.flatnonzero(np.isnan(X[0]))[0]) + 1
        raise OutsideImage(i, float(z[i - 1]), (float(lows[0, i - 1]), float(highs[0, i - 1])))
    return X[0]


def sample(model, n, rng=0, Q=DEFAULT_Q, tol=DEFAULT_TOL, return_stats=False,
           window=256):
    """Draw ``n`` points by inverting base draws; base draws outside the image are redrawn.

    Raises :class:`ModelImageTooSmall` once at least ``window`` draws have been
    made and more than half of them were rejected.
    """
    flow = as_flow(model, Q)
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    out = np.empty((0, flow.d))
    drawn = rejected = 0
    while out.shape[0] < n:
        need = n - out.shape[0]
        k = max(need + need // 4, 64)
        Z = sample_base(rng, k, flow.d, flow.base)
        X, ok = invert_batch(flow, Z, Q, tol)
        drawn += k
        rejected += int(np.count_nonzero(~ok))
        if drawn >= window and rejected > 0.5 * drawn:
            raise ModelImageTooSmall(
                f"model image too small: rejected {rejected} of {drawn} base draws")
        out = np.vstack([out, X[ok][:need]])
    if return_stats:
        return out, {"drawn": drawn, "rejected": rejected}
    return out


@dataclass
class KLEstimate:
    kl: float
    stderr: float
    n_used: int
    n_discarded: int

    @property
    def tv_bound(self):
        """Pinsker bound on total variation, ``sqrt(KL / 2)``."""
        return math.sqrt(max(self.kl, 0.0) / 2.0)


def kl_monte_carlo(p_log_density, q_log_density, samples, max_discard=0.1):
    """Estimate ``KL(p || q)`` from samples of ``p``.

    Samples where ``q`` is ``-inf`` are discarded and counted; more than
    ``max_discard`` of them raises :class:`SupportMismatch`.
    """
    S = np.asarray(samples, dtype=np.float64)
    lp = np.asarray(p_log_density(S), dtype=np.float64)
    lq = np.asarray(q_log_density(S), dtype=np.float64)
    bad = ~np.isfinite(lq) | ~np.isfinite(lp)
    n_bad = int(np.count_nonzero(bad))
    if n_bad > max_discard * len(lp):
        raise SupportMismatch(f"support mismatch: {n_bad} of {len(lp)} samples have zero model density")
    diff = lp[~bad] - lq[~bad]
    se = float(np.std(diff, ddof=1) / math.sqrt(diff.size)) if diff.size > 1 else math.inf
    return KLEstimate(float(np.mean(diff)), se, int(diff.size), n_bad)
