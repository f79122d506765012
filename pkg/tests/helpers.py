"""Shared builders and oracles for the test suite."""
import numpy as np

from flowlab.flows import CNF, EXPONENTIAL, UNF, FlowModel, FlowParams, embed_normalized, init_cnf, init_unf
from flowlab.numcore import Rng
from flowlab.quadrature import quad_nodes
from flowlab.training import batch_loss_and_grad, per_sample_loss, project_cnf


def zero_unf(d, m=3, base=EXPONENTIAL):
    """UNF model whose networks are identically zero (all outer weights 0)."""
    per = [FlowParams(i, np.zeros(m), np.ones((m, i + 1)) * 0.1, np.zeros(m)) for i in range(1, d + 1)]
    return FlowModel(UNF, d, per, base=base)


def ball_points(rng, n, d, radius=0.5):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius * rng.uniform(size=(n, 1)) ** (1.0 / d)


def unf_kink_distance(model, X, Q):
    """Smallest |pre-activation| over every quadrature node of every point."""
    best = np.inf
    for i, p in enumerate(model.per_dim, start=1):
        for x in X:
            _, nodes = quad_nodes(x[:i], Q)
            u = embed_normalized(nodes, clamp=True) @ p.weight.T + p.bias
            best = min(best, float(np.min(np.abs(u))))
    return best


def random_instance(family, rng, Q=4, batch=2, offset_sd=0.5, margin=1e-3):
    """Model with nonzero offsets and a batch whose pre-activations avoid ReLU kinks."""
    while True:
        d = int(rng.integers(1, 4))
        m = int(rng.integers(2, 17))
        seed = int(rng.integers(2**31))
        if family == UNF:
            model = init_unf(d, m, 0.5, Rng(seed))
        else:
            model = init_cnf(d, m, 0.5, 1.0, Rng(seed), tau=1.0)
        for p in model.per_dim:
            p.dw[...] = rng.normal(0, offset_sd, p.dw.shape)
            p.db[...] = rng.normal(0, offset_sd, p.db.shape)
        if family == CNF:
            project_cnf(model)
        X = ball_points(rng, batch, d)
        if family == CNF or unf_kink_distance(model, X, Q) >= margin:
            return model, X


def fd_gradient(model, X, Q, h=1e-6):
    """Central finite differences of the mean batch loss in every offset."""
    out = []
    for p in model.per_dim:
        g = np.zeros((p.width, p.dw.shape[1] + 1))
        for r in range(p.width):
            for c in range(g.shape[1]):
                arr, idx = (p.dw, (r, c)) if c < p.dw.shape[1] else (p.db, r)
                old = arr[idx]
                arr[idx] = old + h
                up = per_sample_loss(model, X, Q).mean()
                arr[idx] = old - h
                down = per_sample_loss(model, X, Q).mean()
                arr[idx] = old
                g[r, c] = (up - down) / (2 * h)
        out.append(g)
    return out


def gradient_relative_error(model, X, Q):
    _, g = batch_loss_and_grad(model, X, Q)
    fd = fd_gradient(model, X, Q)
    num = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(g, fd)))
    den = np.sqrt(sum(np.sum(b ** 2) for b in fd))
    return num / max(den, 1e-300)


# criterion number -> (passed, detail); printed at the end of the pytest run
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)


def acceptance_lines():
    return [f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
            for k, (ok, detail) in sorted(ACCEPTANCE.items())]
