"""Synthetic datasets, rescaled into the radius-0.5 ball.

Rescaling is affine and fixed from the generating mixture, not from the
realized sample: the center is the mean of the component means and the radius
is ``max_k ||mu_k - center|| + 3 * sigma_k * sqrt(d)``.  Points that still
land outside radius 0.5 are redrawn, so no probability mass piles up on the
boundary.
"""
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .flows import EXPONENTIAL, elu_plus_one, embed_normalized, log_elu_plus_one
from .numcore import Rng

__all__ = [
    "Dataset",
    "BALL_RADIUS",
    "GENERATOR_VERSION",
    "gen_mog1d",
    "gen_mob1d",
    "gen_grid2d",
    "gen_mog5d",
    "make_dataset",
    "regenerate",
    "write_dataset",
    "read_dataset",
    "TargetFlow",
    "gen_target_flow",
]

BALL_RADIUS = 0.5
GENERATOR_VERSION = 1
MOB_PARAMS = ((5.0, 30.0), (30.0, 5.0), (30.0, 30.0))


@dataclass
class Dataset:
    name: str
    d: int
    points: np.ndarray
    shift: np.ndarray
    factor: float
    seed: int
    params: dict = field(default_factory=dict)

    def __len__(self):
        return self.points.shape[0]

    def header(self):
        return {
            "name": self.name,
            "d": self.d,
            "n": len(self),
            "scale": {"shift": [float(v) for v in self.shift], "factor": self.factor},
            "seed": self.seed,
            "generator_version": GENERATOR_VERSION,
            "params": self.params,
        }

    def to_raw(self, x):
        """Undo the affine rescale."""
        return np.asarray(x) / self.factor + self.shift

    def split(self, train_frac=0.9, seed=None):
        """Seeded shuffle, then the first ``train_frac`` of rows is the train split."""
        rng = Rng(self.seed if seed is None else seed).spawn(7)
        perm = rng.generator.permutation(len(self))
        k = int(round(train_frac * len(self)))
        return self.points[perm[:k]], self.points[perm[k:]]


def _draw_mixture(rng, n, means, sigmas, center, factor, weights=None):
    """Rejection-sample ``n`` rescaled mixture points inside the ball."""
    means = np.atleast_2d(means)
    K, d = means.shape
    sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (K,))
    out = np.empty((0, d))
    labels_out = np.empty(0, dtype=np.int64)
    while out.shape[0] < n:
        need = n - out.shape[0]
        lab = rng.generator.choice(K, size=need, p=weights)
        raw = means[lab] + sigmas[lab, None] * rng.generator.standard_normal((need, d))
        x = (raw - center) * factor
        keep = np.sum(x * x, axis=1) <= BALL_RADIUS ** 2
        out = np.vstack([out, x[keep]])
        labels_out = np.concatenate([labels_out, lab[keep]])
    return out, labels_out


def _radius(means, sigmas, center):
    means = np.atleast_2d(means)
    d = means.shape[1]
    sig = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (means.shape[0],))
    return float(np.max(np.linalg.norm(means - center, axis=1) + 3.0 * sig * np.sqrt(d)))


def _gaussian_mixture(name, n, rng, means, sigma, seed, params):
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    center = means.mean(axis=0)
    factor = BALL_RADIUS / _radius(means, sigma, center)
    pts, labels = _draw_mixture(rng, n, means, sigma, center, factor)
    ds = Dataset(name, means.shape[1], pts, center, factor, seed, params)
    ds.labels = labels
    return ds


def _seed_of(rng):
    return rng.seed if isinstance(rng, Rng) else int(rng)


def _rng(rng):
    return rng if isinstance(rng, Rng) else Rng(rng)


def gen_mog1d(n, rng=0):
    """Equal mixture of N(-2.5, 1) and N(2.5, 1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed, rng = _seed_of(rng), _rng(rng)
    params = {"means": [-2.5, 2.5], "sigma": 1.0}
    return _gaussian_mixture("mog1d", n, rng, [[-2.5], [2.5]], 1.0, seed, params)


def gen_mob1d(n, rng=0):
    """Equal mixture of Beta(5, 30), Beta(30, 5), Beta(30, 30), mapped to [-0.5, 0.5]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed, rng = _seed_of(rng), _rng(rng)
    lab = rng.generator.choice(3, size=n)
    ab = np.array(MOB_PARAMS)
    raw = rng.generator.beta(ab[lab, 0], ab[lab, 1])
    pts = (raw - 0.5)[:, None]
    ds = Dataset("mob1d", 1, pts, np.array([0.5]), 1.0, seed,
                 {"beta_params": [list(p) for p in MOB_PARAMS]})
    ds.labels = lab
    return ds


def gen_grid2d(n, rng=0, k=5, sigma=0.2):
    """Equal mixture of ``k*k`` isotropic Gaussians centered on the integer grid."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed, rng = _seed_of(rng), _rng(rng)
    ticks = np.arange(k) - (k - 1) / 2.0
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    means = np.column_stack([gx.ravel(), gy.ravel()])
    params = {"k": k, "sigma": sigma, "spacing": 1.0}
    return _gaussian_mixture("grid2d", n, rng, means, sigma, seed, params)


def gen_mog5d(n, rng=0, n_components=10, sigma=0.3):
    """Mixture of 10 isotropic 5-D Gaussians with seed-derived means in [-1, 1]^5."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed, rng = _seed_of(rng), _rng(rng)
    means = rng.spawn(11).uniform(-1.0, 1.0, (n_components, 5))
    params = {"means": means.tolist(), "sigma": sigma}
    return _gaussian_mixture("mog5d", n, rng, means, sigma, seed, params)


GENERATORS = {
    "mog1d": gen_mog1d,
    "mob1d": gen_mob1d,
    "grid2d": gen_grid2d,
    "mog5d": gen_mog5d,
}


def make_dataset(name, n=10_000, seed=0):
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(n, Rng(seed))


def regenerate(header):
    """Rebuild a dataset bit-exactly from its header."""
    if header.get("generator_version") != GENERATOR_VERSION:
        raise ValueError("dataset was written by a different generator version")
    name = header["name"]
    if name not in GENERATORS:
        raise ValueError(f"cannot regenerate dataset {name!r}")
    return make_dataset(name, header["n"], header["seed"])


def write_dataset(ds, path):
    """First line: JSON header.  Then a CSV header row and one row per point."""
    if np.any(np.sum(ds.points ** 2, axis=1) > BALL_RADIUS ** 2):
        raise ValueError("dataset has points outside the radius-0.5 ball")
    buf = io.StringIO()
    buf.write(json.dumps(ds.header(), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i}" for i in range(1, ds.d + 1)])
    for row in ds.points:
        w.writerow([repr(float(v)) for v in row])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_dataset(path):
    with open(path, newline="") as fh:
        header = json.loads(fh.readline())
        rows = list(csv.reader(fh))[1:]
    pts = np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(-1, header["d"])
    sc = header["scale"]
    return Dataset(header["name"], header["d"], pts, np.asarray(sc["shift"], dtype=np.float64),
                   float(sc["factor"]), header["seed"], header.get("params", {}))


# ---------------------------------------------------------------------------
# known-target flows
# ---------------------------------------------------------------------------

PSI = {
    "tanh": np.tanh,
    "sin": np.sin,
    "poly": lambda t: t - t ** 3 / 3.0,
    "zero": np.zeros_like,
}


class TargetFlow:
    """Autoregressive flow with ``df_i/dx_i = elu_plus_one(sum_r alpha_r psi(<w_r, xbar>))``.

    ``f_i`` is the integral from -1 by composite Gauss-Legendre quadrature.
    It is accurate to about 1e-13 until the net first crosses zero; past the
    kink in the second derivative of ``elu_plus_one`` the error is about 1e-4.
    The base is the standard exponential.  Data drawn through the flow is
    restricted to the radius-0.5 ball; ``log_norm`` is the log of the
    acceptance rate of that restriction and is subtracted in
    :meth:`log_density`.
    """

    base = EXPONENTIAL

    def __init__(self, alphas, weights, psi="tanh", panels=4, nodes=16, log_norm=0.0):
        if psi not in PSI:
            raise ValueError(f"unknown psi {psi!r}; choose from {sorted(PSI)}")
        self.alphas = [np.asarray(a, dtype=np.float64) for a in alphas]
        self.weights = [np.atleast_2d(np.asarray(w, dtype=np.float64)) for w in weights]
        for i, (a, w) in enumerate(zip(self.alphas, self.weights), start=1):
            if w.shape != (a.shape[0], i + 1):
                raise ValueError(f"dimension {i}: weights must have shape ({a.shape[0]}, {i + 1})")
            if np.any(np.abs(a) > 1.0) or np.any(np.linalg.norm(w, axis=1) > 1.0 + 1e-12):
                raise ValueError("target requires |alpha| <= 1 and ||w|| <= 1")
        self.d = len(self.alphas)
        self.psi = psi
        self.log_norm = log_norm
        t, wq = np.polynomial.legendre.leggauss(nodes)
        # nodes and weights of the composite rule on [0, 1]
        edges = np.linspace(0.0, 1.0, panels + 1)
        h = np.diff(edges)
        self._u = (edges[:-1, None] + h[:, None] * (t[None, :] + 1.0) / 2.0).ravel()
        self._wu = (h[:, None] * wq[None, :] / 2.0).ravel()

    def net(self, i, X):
        X = np.atleast_2d(X)[:, :i]
        xbar = embed_normalized(X, clamp=True)
        return PSI[self.psi](xbar @ self.weights[i - 1].T) @ self.alphas[i - 1]

    def derivative(self, i, X):
        return elu_plus_one(self.net(i, X))

    def component(self, i, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))[:, :i]
        n = X.shape[0]
        span = X[:, -1] + 1.0
        P = np.repeat(X, self._u.size, axis=0)
        P[:, -1] = (-1.0 + span[:, None] * self._u[None, :]).ravel()
        vals = self.derivative(i, P).reshape(n, self._u.size)
        return span * (vals @ self._wu)

    def log_diag(self, X):
        X = np.atleast_2d(X)
        return sum(log_elu_plus_one(self.net(i, X)) for i in range(1, self.d + 1))

    def log_density(self, X):
        """Log-density of the ball-restricted target; ``-inf`` outside the ball."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = np.column_stack([self.component(i, X) for i in range(1, self.d + 1)])
        out = -np.sum(Z, axis=1) + self.log_diag(X) - self.log_norm
        inside = np.sum(X * X, axis=1) <= BALL_RADIUS ** 2
        return np.where(inside, out, -np.inf)

    def to_dict(self):
        return {"psi": self.psi, "log_norm": self.log_norm,
                "alphas": [a.tolist() for a in self.alphas],
                "weights": [w.tolist() for w in self.weights]}


def _target_params(d, n_terms, angle, spread, rng):
    """Directions tilted from ``e_i`` towards the embedding coordinate.

    Near the origin ``<w, xbar> ~ cos(t) x_i + sin(t)``, so every term is a
    sigmoid-like bump in ``x_i`` that switches on around ``x_i = -tan(t)``.
    """
    alphas, weights = [], []
    for i in range(1, d + 1):
        t = rng.uniform(angle - spread, angle + spread, n_terms)
        w = np.zeros((n_terms, i + 1))
        w[:, i - 1] = np.cos(t)
        w[:, i] = np.sin(t)
        alphas.append(rng.uniform(0.75, 1.0, n_terms))
        weights.append(w)
    return alphas, weights


def gen_target_flow(d, psi="tanh", n=10_000, rng=0, n_terms=24, angle=0.25, spread=0.1,
                    tol=1e-10, alphas=None, weights=None):
    """Data from a known flow, plus the flow itself as ground truth.

    Base draws are pushed through the inverse flow by bisection; draws
    outside the flow's image or outside the radius-0.5 ball are redrawn, and
    the overall acceptance rate sets ``TargetFlow.log_norm``.
    """
    from .density import invert_batch, sample_base

    if n < 1:
        raise ValueError("n must be >= 1")
    seed, rng = _seed_of(rng), _rng(rng)
    if alphas is None or weights is None:
        alphas, weights = _target_params(d, n_terms, angle, spread, rng.spawn(13))
    flow = TargetFlow(alphas, weights, psi)
    draw_rng = rng.spawn(17)
    out = np.empty((0, d))
    drawn = 0
    while out.shape[0] < n:
        k = max(n - out.shape[0], 256)
        X, ok = invert_batch(flow, sample_base(draw_rng, k, d, EXPONENTIAL), tol=tol)
        drawn += k
        ok &= np.sum(np.where(ok[:, None], X, 0.0) ** 2, axis=1) <= BALL_RADIUS ** 2
        out = np.vstack([out, X[ok]])
    accepted = out.shape[0]
    flow.log_norm = float(np.log(accepted / drawn))
    ds = Dataset(f"target-{psi}", d, out[:n], np.zeros(d), 1.0, seed, flow.to_dict())
    return ds, flow
