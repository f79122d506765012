"""Experiment drivers: width and drift sweeps, CNF linearity, drift budgets.

Every sweep cell gets its own random stream derived from the master seed and
the cell key, so cells can run in any order or in parallel and an aborted
cell never shifts another cell's draws.  Records are written in grid order.
"""
import csv
import math
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from xml.sax.saxutils import escape

import numpy as np

from .datasets import make_dataset
from .flows import CNF, UNF, cnf_net_forward, init_cnf
from .numcore import Rng, norm_pq
from .pseudo import rescale_offsets, sup_linear_part
from .quadrature import DEFAULT_Q, reconstruct_f
from .training import (
    NumericAbort,
    TrainConfig,
    batch_loss_and_grad,
    drift_norms,
    init_model,
    mean_loss,
    train,
)

__all__ = [
    "EPS_A_GRID",
    "SweepRecord",
    "LinearityRecord",
    "BudgetRecord",
    "SelectionRecord",
    "cell_rng",
    "run_cell",
    "select_eps_a",
    "width_sweep",
    "drift_sweep",
    "medians_by_width",
    "cnf_linearity_experiment",
    "affine_deviation",
    "budget_experiment",
    "theorem_budget",
    "emit_csv",
    "read_csv",
    "emit_svg",
    "resolve_threads",
]

EPS_A_GRID = (0.15, 0.2, 0.25)


@dataclass
class SweepRecord:
    family: str
    dataset: str
    m: int
    eta: float
    T: int
    seed: int
    eps_a: float
    final_train_loss: float
    final_test_loss: float
    drift_2_2: float
    drift_2_inf: float
    wall_ms: float
    stability_flag: str


@dataclass
class SelectionRecord:
    family: str
    dataset: str
    m: int
    eta: float
    eps_a: float
    score: float
    chosen: bool


@dataclass
class LinearityRecord:
    m: int
    sigma_wb: float
    seed: int
    eta: float
    T: int
    cnf_deviation: float
    unf_deviation: float


@dataclass
class BudgetRecord:
    m: int
    sigma_wb: float
    seed: int
    budget: float
    sup_linear_part: float
    bound: float


RECORD_TYPES = {cls.__name__: cls for cls in (SweepRecord, SelectionRecord, LinearityRecord, BudgetRecord)}


def resolve_threads(threads=None):
    """``threads`` if given, else ``FLOWLAB_THREADS``, else 1."""
    if threads is None:
        threads = os.environ.get("FLOWLAB_THREADS", "1")
    try:
        n = int(threads)
    except (TypeError, ValueError):
        raise ValueError(f"threads must be a positive integer, got {threads!r}") from None
    if n < 1:
        raise ValueError(f"threads must be a positive integer, got {threads!r}")
    return n


def cell_rng(master_seed, *key):
    """Random stream for one cell, a pure function of the seed and the key."""
    tag = zlib.crc32("|".join(repr(k) for k in key).encode())
    return Rng(master_seed).spawn(tag)


def _splits(dataset, n, data_seed):
    return make_dataset(dataset, n, data_seed).split()


def _run_cell(family, dataset, m, eta, T, seed, eps_a, Q, master_seed, n_data, extra):
    train_x, test_x = _splits(dataset, n_data, master_seed)
    cfg = TrainConfig(family=family, eta=eta, T=T, m=m, eps_a=eps_a, Q=Q, seed=seed,
                      checkpoint_every=max(T, 1), **extra)
    rng = cell_rng(master_seed, family, dataset, m, eta, eps_a, seed)
    model = init_model(cfg, train_x.shape[1], rng.spawn(0))
    flag = "ok"
    t0 = time.perf_counter()
    try:
        model, _ = train(model, train_x, cfg, rng.spawn(1))
    except NumericAbort as exc:
        model, flag = exc.model, f"aborted@{exc.step}"
    wall = (time.perf_counter() - t0) * 1e3
    tr = mean_loss(model, train_x, Q)
    te = mean_loss(model, test_x, Q)
    dn = drift_norms(model)
    return SweepRecord(family, dataset, m, eta, T, seed, eps_a, tr, te,
                       math.sqrt(sum(v[0] ** 2 for v in dn)), max(v[1] for v in dn),
                       wall, flag)


def run_cell(family, dataset, m, eta, T, seed, eps_a=0.2, Q=DEFAULT_Q, master_seed=0,
             n_data=10_000, **extra):
    """Train one cell from a fresh init and summarize it as a :class:`SweepRecord`.

    A numeric abort keeps the last good model and sets ``stability_flag``.
    """
    return _run_cell(family, dataset, m, eta, T, seed, eps_a, Q, master_seed, n_data, extra)


def _call(args):
    return _run_cell(*args)


def _map(jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_call, jobs))


def _score(records):
    vals = [r.final_train_loss for r in records if r.stability_flag == "ok"]
    return float(np.median(vals)) if vals else math.inf


def select_eps_a(family, dataset, m, eta, T_select, grid=EPS_A_GRID, seeds=(0,), Q=DEFAULT_Q,
                 master_seed=0, n_data=10_000, threads=1, extra=None):
    """Pick ``eps_a`` from ``grid`` by median train loss after ``T_select`` steps.

    Returns ``(chosen, selection_records)``; ties go to the earlier grid value.
    """
    extra = extra or {}
    jobs = [(family, dataset, m, eta, T_select, s, e, Q, master_seed, n_data, extra)
            for e in grid for s in seeds]
    recs = _map(jobs, threads)
    scores = [_score([r for r in recs if r.eps_a == e]) for e in grid]
    best = grid[int(np.argmin(scores))]
    return best, [SelectionRecord(family, dataset, m, eta, e, sc, e == best)
                  for e, sc in zip(grid, scores)]


def width_sweep(families, datasets, widths, etas, seeds, T, Q=DEFAULT_Q, eps_a=0.2,
                eps_grid=EPS_A_GRID, select_T=None, select_seeds=(0,), master_seed=0,
                n_data=10_000, threads=1, selection_log=None, **extra):
    """Train every (family, dataset, m, eta, seed) cell; one record per cell.

    With ``eps_a="select"`` the outer-weight scale is chosen per
    (family, dataset, m, eta) by :func:`select_eps_a` with a budget of
    ``select_T`` steps (default ``T // 10``), and the choices are appended to
    ``selection_log``.
    """
    families, datasets, widths, etas, seeds = (list(v) for v in (families, datasets, widths, etas, seeds))
    if not (families and datasets and widths and etas and seeds):
        raise ValueError("sweep grid is empty")
    threads = resolve_threads(threads)
    jobs = []
    for fam in families:
        for ds in datasets:
            for m in widths:
                for eta in etas:
                    e = eps_a
                    if eps_a == "select":
                        e, sel = select_eps_a(fam, ds, m, eta, select_T or max(T // 10, 1), eps_grid,
                                              select_seeds, Q, master_seed, n_data, threads, extra)
                        if selection_log is not None:
                            selection_log.extend(sel)
                    jobs += [(fam, ds, m, eta, T, s, e, Q, master_seed, n_data, extra) for s in seeds]
    return _map(jobs, threads)


def drift_sweep(*args, **kwargs):
    """Same grid and records as :func:`width_sweep`; read ``drift_2_2``."""
    return width_sweep(*args, **kwargs)


def medians_by_width(records, family, dataset, key, eta=None):
    """``{m: median of key}`` over seeds for one family and dataset."""
    out = {}
    for r in records:
        if r.family == family and r.dataset == dataset and (eta is None or r.eta == eta):
            out.setdefault(r.m, []).append(getattr(r, key))
    return {m: float(np.median(v)) for m, v in sorted(out.items())}


# ---------------------------------------------------------------------------
# CNF in the small-variance regime
# ---------------------------------------------------------------------------

def affine_deviation(x, y):
    """Sup distance of ``y`` from its least-squares affine fit in ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 1 and x.shape[1] != 1:
        x = x.T
    A = np.column_stack([x, np.ones(x.shape[0])])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(np.max(np.abs(y - A @ coef)))


def theorem_eta(m, tau, eps_a, eps, c_eta=1.0):
    return c_eta * eps / (m * tau * eps_a ** 2 * math.log(m))


def cnf_linearity_experiment(widths=(400, 1600, 6400), dataset="mob1d", seeds=range(5), eps=0.1,
                             c_eta=1.0, C_T=20.0, eps_a=0.2, unf_eta=0.05, n_probes=257, Q=DEFAULT_Q,
                             master_seed=0, n_data=10_000):
    """Train CNF with ``sigma_wb = 1/sqrt(m)``, ``tau = 1/m`` and step rules
    ``eta = c eps / (m tau eps_a^2 log m)``, ``T = C / eps^2``; train a UNF on
    the same data for ``T`` steps at ``unf_eta``.  Both learned maps
    ``f(x)`` are compared with their best affine fits on an even probe grid
    over ``[-0.5, 0.5]``.
    """
    train_x, _ = _splits(dataset, n_data, master_seed)
    probes = np.linspace(-0.5, 0.5, n_probes)[:, None]
    T = int(round(C_T / eps ** 2))
    out = []
    for m in widths:
        tau = 1.0 / m
        eta = theorem_eta(m, tau, eps_a, eps, c_eta)
        for s in seeds:
            rng = cell_rng(master_seed, "linearity", dataset, m, s)
            cfg = TrainConfig(family=CNF, eta=eta, T=T, m=m, eps_a=eps_a, tau=tau,
                              sigma_wb=1.0 / math.sqrt(m), seed=s, checkpoint_every=T)
            cnf = init_model(cfg, 1, rng.spawn(0))
            cnf, _ = train(cnf, train_x, cfg, rng.spawn(1))
            cdev = affine_deviation(probes, cnf_net_forward(cnf.tau, cnf.per_dim[0], probes))
            ucfg = TrainConfig(family=UNF, eta=unf_eta, T=T, m=m, eps_a=eps_a, Q=Q, seed=s,
                               checkpoint_every=T)
            unf = init_model(ucfg, 1, rng.spawn(2))
            unf, _ = train(unf, train_x, ucfg, rng.spawn(3))
            udev = affine_deviation(probes, reconstruct_f(unf, 1, probes, Q))
            out.append(LinearityRecord(m, 1.0 / math.sqrt(m), s, eta, T, cdev, udev))
    return out


# ---------------------------------------------------------------------------
# linear part of the CNF pseudo-network under a drift budget
# ---------------------------------------------------------------------------

def theorem_budget(m, eps_a, sigma_wb, tau, c=1.0):
    """``c / (eps_a sigma_wb tau m^(1/4) log m)``, the allowed (2,1) drift."""
    return c / (eps_a * sigma_wb * tau * m ** 0.25 * math.log(m))


def budget_experiment(widths=(400, 1600, 6400), sigma_wb=1.0, seeds=range(5), eps_a=0.2, c=1.0,
                      dataset="mob1d", n_probes=257, master_seed=0, n_data=10_000, batch=256):
    """Largest ``|P_l|`` on probes after moving the offsets to the drift budget.

    The direction is the negative full-batch loss gradient at initialization
    on ``batch`` training points, i.e. where SGD would go first.
    ``bound`` is ``tau max|a| 2 ||theta||_{2,1}``.
    """
    train_x, _ = _splits(dataset, n_data, master_seed)
    X = train_x[:batch]
    probes = np.linspace(-0.5, 0.5, n_probes)[:, None]
    out = []
    for m in widths:
        tau = 1.0 / m
        budget = theorem_budget(m, eps_a, sigma_wb, tau, c)
        for s in seeds:
            rng = cell_rng(master_seed, "budget", m, sigma_wb, s)
            model = init_cnf(1, m, eps_a, sigma_wb, rng, tau=tau)
            _, grads = batch_loss_and_grad(model, X)
            model.set_offsets(rescale_offsets([-g for g in grads], budget))
            bound = tau * float(np.max(np.abs(model.per_dim[0].outer))) * 2.0 * sum(
                norm_pq(th, 2, 1) for th in model.offsets())
            out.append(BudgetRecord(m, sigma_wb, s, budget, sup_linear_part(model, probes), bound))
    return out


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _columns(cls, include_timing):
    return [f.name for f in fields(cls) if include_timing or f.name != "wall_ms"]


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(records, path, include_timing=False):
    """Write records with a fixed column order.

    The first line names the record type.  ``wall_ms`` is left out unless
    ``include_timing`` is set, so identical runs give identical bytes.
    """
    records = list(records)
    if not records:
        raise ValueError("nothing to write")
    cls = type(records[0])
    cols = _columns(cls, include_timing)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(f"# {cls.__name__}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in records:
                w.writerow([_fmt(getattr(r, c)) for c in cols])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _parse(ftype, text):
    if ftype is bool:
        return text == "1"
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    return text


def read_csv(path):
    """Inverse of :func:`emit_csv`; missing ``wall_ms`` reads back as NaN."""
    try:
        with open(path, newline="") as fh:
            tag = fh.readline().strip()
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    name = tag.lstrip("# ").strip()
    if name not in RECORD_TYPES:
        raise ValueError(f"{path}: unknown record type {name!r}")
    cls = RECORD_TYPES[name]
    header, body = rows[0], rows[1:]
    types = {f.name: f.type for f in fields(cls)}
    out = []
    for row in body:
        vals = dict(zip(header, row))
        kw = {k: (_parse(types[k], vals[k]) if k in vals else math.nan) for k in types}
        out.append(cls(**kw))
    return out


# plot geometry
_W, _H = 640, 420
_L, _R, _TOP, _B = 70, 170, 30, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _series(records, kind):
    """``{label: [(m, y), ...]}`` of medians over seeds."""
    groups = {}
    if kind in ("loss", "drift", "test-loss"):
        key = {"loss": "final_train_loss", "drift": "drift_2_2", "test-loss": "final_test_loss"}[kind]
        for r in records:
            groups.setdefault(f"{r.family} {r.dataset} eta={r.eta:g}", {}).setdefault(r.m, []).append(getattr(r, key))
    elif kind == "linearity":
        for r in records:
            groups.setdefault("CNF", {}).setdefault(r.m, []).append(r.cnf_deviation)
            groups.setdefault("UNF", {}).setdefault(r.m, []).append(r.unf_deviation)
    elif kind == "budget":
        for r in records:
            groups.setdefault(f"sup|P_l| sigma_wb={r.sigma_wb:g}", {}).setdefault(r.m, []).append(r.sup_linear_part)
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    return {lab: sorted((m, float(np.median(v))) for m, v in d.items()) for lab, d in sorted(groups.items())}


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def emit_svg(records, path, kind="loss"):
    """Line plot of per-width medians against a log-scaled width axis.

    ``kind`` is one of ``loss``, ``test-loss``, ``drift`` (sweep records),
    ``linearity`` or ``budget``.
    """
    records = list(records)
    if not records:
        raise ValueError("nothing to plot")
    series = _series(records, kind)
    ms = sorted({m for pts in series.values() for m, _ in pts})
    ys = [y for pts in series.values() for _, y in pts if math.isfinite(y)]
    if not ys:
        raise ValueError("nothing to plot")
    lx0, lx1 = math.log10(ms[0]), math.log10(ms[-1])
    if lx1 == lx0:
        lx0, lx1 = lx0 - 0.5, lx1 + 0.5
    y0, y1 = min(ys), max(ys)
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = _W - _L - _R, _H - _TOP - _B

    def px(m):
        return _L + (math.log10(m) - lx0) / (lx1 - lx0) * pw

    def py(y):
        return _TOP + (y1 - y) / (y1 - y0) * ph

    ylabel = {"loss": "median final train loss", "test-loss": "median final test loss",
              "drift": "median ||theta||_2,2", "linearity": "sup deviation from affine fit",
              "budget": "sup |P_l|"}[kind]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<line x1="{_L}" y1="{_TOP + ph}" x2="{_L + pw}" y2="{_TOP + ph}" stroke="black"/>',
           f'<line x1="{_L}" y1="{_TOP}" x2="{_L}" y2="{_TOP + ph}" stroke="black"/>']
    for m in ms:
        x = px(m)
        out.append(f'<line x1="{x:.2f}" y1="{_TOP + ph}" x2="{x:.2f}" y2="{_TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{_TOP + ph + 16}" text-anchor="middle">{m}</text>')
    for y in _ticks(y0, y1):
        yy = py(y)
        out.append(f'<line x1="{_L - 4}" y1="{yy:.2f}" x2="{_L}" y2="{yy:.2f}" stroke="black"/>')
        out.append(f'<text x="{_L - 6}" y="{yy + 4:.2f}" text-anchor="end">{y:.4g}</text>')
    out.append(f'<text x="{_L + pw / 2:.2f}" y="{_H - 12}" text-anchor="middle">width m (log scale)</text>')
    out.append(f'<text x="14" y="{_TOP + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for k, (label, pts) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = [(m, y) for m, y in pts if math.isfinite(y)]
        coords = " ".join(f"{px(m):.2f},{py(y):.2f}" for m, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for m, y in pts:
            out.append(f'<circle cx="{px(m):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = _TOP + 14 * k + 6
        out.append(f'<line x1="{_L + pw + 10}" y1="{ly}" x2="{_L + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_L + pw + 32}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
