"""Command line entry point, ``flowlab <subcommand>``.

Every subcommand reads its settings from ``--config`` (a JSON object or
``key = value`` lines) plus optional ``key=value`` overrides on the command
line.  Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import datasets, density, harness, pseudo
from .flows import CNF, CNF_SQUARE, GAUSSIAN, UNF, init_cnf, init_unf, load_model, save_model
from .numcore import Rng
from .training import NumericAbort, TrainConfig, init_model, train, write_checkpoints_csv

log = logging.getLogger("flowlab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


def _value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("'\"")


def parse_config_text(text):
    """JSON object, or one ``key = value`` per line (``#`` starts a comment)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be an object")
        return doc
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _value(v)
    return out


def load_config(path, overrides):
    cfg = {}
    if path:
        try:
            with open(path) as fh:
                cfg = parse_config_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _value(v)
    return cfg


class Settings:
    """Typed access to a config dict; unknown keys are an error."""

    def __init__(self, cfg, allowed):
        unknown = sorted(set(cfg) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.cfg = cfg
        self.allowed = allowed

    def get(self, key, kind=None):
        v = self.cfg.get(key, self.allowed[key])
        if kind is None or v is None:
            return v
        try:
            if kind is list:
                return list(v) if isinstance(v, (list, tuple)) else [v]
            if kind is int and isinstance(v, float) and not v.is_integer():
                raise ValueError
            return kind(v)
        except (TypeError, ValueError):
            raise ConfigError(f"config key {key!r}: cannot interpret {v!r} as {kind.__name__}") from None


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _data(s, seed):
    """Points from ``data`` (a dataset file) or a generated ``dataset``."""
    path = s.get("data")
    if path:
        return datasets.read_dataset(path).points
    return datasets.make_dataset(s.get("dataset"), s.get("n", int), seed).points


TRAIN_KEYS = {"family": UNF, "dataset": "mog1d", "data": None, "n": 10_000, "m": 100, "eta": 0.05,
              "T": 1000, "batch": 32, "eps_a": 0.2, "sigma_wb": None, "tau": None, "eps_floor": 1e-3,
              "Q": 64, "base": None, "checkpoint_every": 100}


def _train_config(s, seed):
    try:
        return TrainConfig(family=s.get("family"), eta=s.get("eta", float), T=s.get("T", int),
                           batch=s.get("batch", int), m=s.get("m", int), eps_a=s.get("eps_a", float),
                           sigma_wb=s.get("sigma_wb", float), tau=s.get("tau", float),
                           eps_floor=s.get("eps_floor", float), Q=s.get("Q", int),
                           base=s.get("base"), seed=seed,
                           checkpoint_every=s.get("checkpoint_every", int))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _train(args, s, X):
    cfg = _train_config(s, args.seed)
    rng = Rng(args.seed)
    model = init_model(cfg, X.shape[1], rng.spawn(0))
    init = model.copy()
    try:
        model, cps = train(model, X, cfg, rng.spawn(1))
    except NumericAbort as exc:
        if exc.checkpoints:
            write_checkpoints_csv(exc.checkpoints, _out(args, "checkpoints.csv"), X.shape[1])
        if exc.model is not None:
            save_model(exc.model, _out(args, "model.json"))
        raise
    return cfg, init, model, cps


def cmd_gen_data(args, cfg):
    s = Settings(cfg, {"dataset": "mog1d", "n": 10_000, "d": 2, "psi": "tanh"})
    name = s.get("dataset")
    if name.startswith("target"):
        psi = name.split("-", 1)[1] if "-" in name else s.get("psi")
        ds, flow = datasets.gen_target_flow(s.get("d", int), psi, s.get("n", int), args.seed)
    else:
        try:
            ds = datasets.make_dataset(name, s.get("n", int), args.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    path = _out(args, f"{ds.name}.csv")
    datasets.write_dataset(ds, path)
    print(path)


def cmd_train(args, cfg):
    s = Settings(cfg, TRAIN_KEYS)
    X = _data(s, args.seed)
    _, _, model, cps = _train(args, s, X)
    save_model(model, _out(args, "model.json"))
    write_checkpoints_csv(cps, _out(args, "checkpoints.csv"), X.shape[1])
    print(json.dumps({"final_loss": cps[-1].loss if cps else None, "steps": cps[-1].step if cps else 0}))


SWEEP_KEYS = {"families": [UNF, CNF], "datasets": ["mog1d", "mob1d"], "widths": [100, 400, 1600, 6400],
              "etas": [0.0125, 0.025, 0.05, 0.1], "seeds": [0, 1, 2, 3, 4], "T": 20_000, "Q": 64, "eps_a": "select",
              "select_T": None, "n": 10_000}


def _sweep(args, cfg, kind):
    s = Settings(cfg, SWEEP_KEYS)
    eps_a = s.get("eps_a")
    if eps_a != "select":
        try:
            eps_a = float(eps_a)
        except (TypeError, ValueError):
            raise ConfigError("eps_a must be a number or 'select'") from None
    sel = []
    try:
        recs = harness.width_sweep(
            s.get("families", list), s.get("datasets", list), [int(m) for m in s.get("widths", list)],
            [float(e) for e in s.get("etas", list)], [int(v) for v in s.get("seeds", list)],
            s.get("T", int), Q=s.get("Q", int), eps_a=eps_a, select_T=s.get("select_T", int),
            master_seed=args.seed, n_data=s.get("n", int), threads=args.threads, selection_log=sel)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    harness.emit_csv(recs, _out(args, f"{kind}.csv"))
    if sel:
        harness.emit_csv(sel, _out(args, "eps_selection.csv"))
    plots = ("loss", "test-loss", "drift") if kind == "sweep" else ("drift",)
    for p in plots:
        harness.emit_svg(recs, _out(args, f"{kind}-{p}.svg"), p)
    for fam in s.get("families", list):
        for ds in s.get("datasets", list):
            key = "final_train_loss" if kind == "sweep" else "drift_2_2"
            print(fam, ds, key, json.dumps(harness.medians_by_width(recs, fam, ds, key)))
    if any(r.stability_flag != "ok" for r in recs):
        log.warning("%d cells aborted", sum(r.stability_flag != "ok" for r in recs))


def cmd_sweep(args, cfg):
    _sweep(args, cfg, "sweep")


def cmd_drift(args, cfg):
    _sweep(args, cfg, "drift")


def cmd_coupling(args, cfg):
    s = Settings(cfg, {**TRAIN_KEYS, "probes": 256})
    X = _data(s, args.seed)
    cfg_t, init, model, cps = _train(args, s, X)
    probes = pseudo.probe_points(X.shape[1], s.get("probes", int), args.seed)
    reports = pseudo.coupling_trace(init, cps, probes, cfg_t.Q)
    path = _out(args, "coupling.csv")
    pseudo.write_coupling_csv(reports, path)
    print(path)


def cmd_convexity(args, cfg):
    s = Settings(cfg, {"family": UNF, "d": 1, "m": 16, "eps_a": 0.2, "sigma_wb": 1.0, "tau": 1.0,
                       "trials": 1000, "Q": 64, "offset_scale": 1.0, "tol": 1e-9})
    fam, rng = s.get("family"), Rng(args.seed)
    if fam == UNF:
        model = init_unf(s.get("d", int), s.get("m", int), s.get("eps_a", float), rng.spawn(0))
        stop = None
    elif fam == CNF_SQUARE:
        model = init_cnf(s.get("d", int), s.get("m", int), s.get("eps_a", float), s.get("sigma_wb", float),
                         rng.spawn(0), tau=s.get("tau", float), base=GAUSSIAN, square=True)
        stop = 1e-3
    else:
        raise ConfigError(f"convexity test is for {UNF} or {CNF_SQUARE}, not {fam!r}")
    ev = pseudo.PseudoLossEvaluator(model, s.get("Q", int), s.get("offset_scale", float))
    v = pseudo.convexity_test(ev, s.get("trials", int), rng.spawn(1), s.get("tol", float), stop)
    print(json.dumps({"family": fam, "trials": v.trials, "max_violation": v.max_violation,
                      "skipped": v.skipped, "convex_within_tol": v.passed}))


def cmd_linearity(args, cfg):
    s = Settings(cfg, {"widths": [400, 1600, 6400], "dataset": "mob1d", "seeds": [0, 1, 2, 3, 4],
                       "eps": 0.1, "c_eta": 1.0, "C_T": 20.0, "eps_a": 0.2, "unf_eta": 0.05})
    recs = harness.cnf_linearity_experiment(
        [int(m) for m in s.get("widths", list)], s.get("dataset"), [int(v) for v in s.get("seeds", list)],
        s.get("eps", float), s.get("c_eta", float), s.get("C_T", float), s.get("eps_a", float),
        s.get("unf_eta", float), master_seed=args.seed)
    harness.emit_csv(recs, _out(args, "linearity.csv"))
    harness.emit_svg(recs, _out(args, "linearity.svg"), "linearity")
    for key in ("cnf_deviation", "unf_deviation"):
        by_m = {}
        for r in recs:
            by_m.setdefault(r.m, []).append(getattr(r, key))
        print(key, json.dumps({m: float(np.median(v)) for m, v in sorted(by_m.items())}))


def _model(s):
    path = s.get("model")
    if not path:
        raise ConfigError("config key 'model' (path to model JSON) is required")
    try:
        return load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc.strerror}") from None


def cmd_sample(args, cfg):
    s = Settings(cfg, {"model": None, "n": 1000, "Q": 64, "tol": 1e-10})
    model = _model(s)
    X = density.sample(model, s.get("n", int), Rng(args.seed), s.get("Q", int), s.get("tol", float))
    path = _out(args, "samples.csv")
    _write_rows(path, [f"x{i}" for i in range(1, model.d + 1)], X)
    print(path)


def cmd_density(args, cfg):
    s = Settings(cfg, {"model": None, "data": None, "Q": 64})
    model = _model(s)
    if not s.get("data"):
        raise ConfigError("config key 'data' (dataset file) is required")
    X = datasets.read_dataset(s.get("data")).points
    lp = density.log_density(model, X, s.get("Q", int))
    path = _out(args, "log_density.csv")
    _write_rows(path, [f"x{i}" for i in range(1, model.d + 1)] + ["log_density"], np.column_stack([X, lp]))
    print(json.dumps({"mean_log_density": float(np.mean(lp[np.isfinite(lp)])) if np.isfinite(lp).any() else None,
                      "n_zero_density": int(np.count_nonzero(~np.isfinite(lp)))}))


def cmd_kl(args, cfg):
    s = Settings(cfg, {"model": None, "d": 2, "psi": "tanh", "n": 2000, "target_seed": 0, "Q": 64})
    model = _model(s)
    ds, flow = datasets.gen_target_flow(s.get("d", int), s.get("psi"), s.get("n", int),
                                        s.get("target_seed", int))
    if model.d != flow.d:
        raise ConfigError(f"model has d={model.d} but the target has d={flow.d}")
    est = density.kl_monte_carlo(flow.log_density, lambda x: density.log_density(model, x, s.get("Q", int)),
                                 ds.points)
    print(json.dumps({"kl": est.kl, "stderr": est.stderr, "n_used": est.n_used,
                      "n_discarded": est.n_discarded, "tv_bound": est.tv_bound}))


def cmd_plot(args, cfg):
    s = Settings(cfg, {"input": None, "kind": "loss", "output": None})
    src = s.get("input")
    if not src:
        raise ConfigError("config key 'input' (records CSV) is required")
    recs = harness.read_csv(src)
    out = s.get("output") or _out(args, os.path.splitext(os.path.basename(src))[0] + f"-{s.get('kind')}.svg")
    try:
        harness.emit_svg(recs, out, s.get("kind"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(out)


def _write_rows(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) for v in r) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "drift": cmd_drift,
    "coupling": cmd_coupling,
    "convexity": cmd_convexity,
    "linearity": cmd_linearity,
    "sample": cmd_sample,
    "density": cmd_density,
    "kl": cmd_kl,
    "plot": cmd_plot,
}


def build_parser():
    p = argparse.ArgumentParser(prog="flowlab", description="Overparameterized normalizing flow experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON or key = value file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=".")
        sp.add_argument("--threads", default=None,
                        help="worker processes (default: $FLOWLAB_THREADS or 1)")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        try:
            args.threads = harness.resolve_threads(args.threads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg = load_config(args.config, args.overrides)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericAbort, density.ModelImageTooSmall, density.SupportMismatch) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
