"""Command line: configuration, experiment orchestration, manifests and CSV/JSON output.

    movact simulate | stability-check | static-feedback | switching | rhc | run <experiment>

Outputs go below $MOVACT_OUTPUT (default ./runs), one directory per run named
after the hash of its configuration, so identical configurations reproduce
identical files.
"""
import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, ConvergenceError, GeometryError, MovactError, OptimizerError,
                     PipelineError, PreconditionError, StabilizationError)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("movact")

OUTPUT_ENV = "MOVACT_OUTPUT"

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 1, 2, 3, 4

# Defaults used for the published experiments.
PAPER_PROFILE = {
    "nu": 0.1, "h": 0.0025, "dt": 1e-3, "n_modes": 32, "r": 0.04,
    "T": 1.25, "delta": 0.5, "K": 500.0, "varsigma": 1.0, "epsilon": 0.0, "mu_my": 1e-5,
    "t_final": 5.0, "c0": 0.5, "max_iter": 2000, "tol": 1e-4, "seed": 0,
}

EXPERIMENTS = {
    "example1": {"kind": "rhc", "reaction": "-3-2|sin(t+x)|", "convection": "|cos(t+x)|",
                 "y0": "sin(pi*x)", "betas": [0.1, 0.5], "mode": "moving", "M": 1},
    "example2": {"kind": "rhc", "reaction": -5.0, "convection": 0.0, "y0": "sin(2*pi*x)",
                 "betas": [0.01], "mode": "moving", "M": 1},
    "switching-demo": {"kind": "switching", "reaction": "-3-2|sin(t+x)|", "convection": "|cos(t+x)|",
                       "n_modes": 32, "M": 3, "theta": 0.5, "mode": "EMPIRICAL", "k_max": 3,
                       "n_probes": 3, "safety": 2.0},
    "stability-check": {"kind": "stability", "reaction": -5.0, "center": 0.5, "n_modes": 64},
}

PROFILES = {"paper": PAPER_PROFILE}

ALLOWED_KEYS = set(PAPER_PROFILE) | {k for e in EXPERIMENTS.values() for k in e} | {
    "beta", "y0_coeffs", "workers", "eigen", "count", "horizon", "n_starts", "n_probe", "eta_scale"}


# ------------------------------------------------------------ config

def load_config(path):
    """TOML or JSON mapping; a [profile] key selects a built-in base."""
    p = Path(path)
    text = p.read_bytes()
    try:
        data = tomllib.loads(text.decode()) if p.suffix.lower() == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    return data


def parse_override(item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip().replace("-", "_")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key, val


def build_config(base, *layers):
    cfg = copy.deepcopy(base)
    for layer in layers:
        for k, v in (layer or {}).items():
            if v is None:
                continue
            if k not in ALLOWED_KEYS:
                raise ConfigError(f"unknown configuration key {k!r}")
            cfg[k] = v
    return cfg


_SIN_RE = re.compile(r"^\s*sin\(\s*(\d*)\s*\*?\s*pi\s*\*?\s*x\s*\)\s*$")


def initial_state(spec):
    """Callable for 'sin(k*pi*x)' strings (k optional)."""
    m = _SIN_RE.match(str(spec))
    if not m:
        raise ConfigError(f"unsupported initial state {spec!r}; use 'sin(k*pi*x)'")
    k = int(m.group(1) or 1)
    return lambda x: np.sin(k * np.pi * np.asarray(x, dtype=float))


def _coeffs(cfg):
    from .model import CoefficientField
    return CoefficientField.from_spec(cfg.get("reaction", 0.0), cfg.get("convection", 0.0),
                                      base_dir=cfg.get("_base_dir"))


def _rhc_config(cfg, beta):
    from .rhc import RhcConfig
    keys = ("T", "delta", "K", "varsigma", "epsilon", "mu_my", "r", "h", "dt", "tol", "max_iter",
            "eta_scale")
    kw = {k: cfg[k] for k in keys if k in cfg}
    return RhcConfig(beta=float(beta), **kw).validate()


# ------------------------------------------------------------ manifest

def content_hash(obj):
    blob = json.dumps(obj, sort_keys=True, default=str, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class RunManifest:
    name: str
    config: dict
    seed: int
    hash: str
    outputs: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    wall: float = 0.0
    status: str = "ok"
    version: str = __version__

    @classmethod
    def create(cls, name, config):
        clean = {k: v for k, v in config.items() if not k.startswith("_")}
        h = content_hash({"name": name, "config": clean, "version": __version__})
        return cls(name, clean, int(config.get("seed", 0)), h)

    def to_dict(self):
        return {"name": self.name, "hash": self.hash, "seed": self.seed, "version": self.version,
                "config": self.config, "outputs": self.outputs, "stats": self.stats,
                "wall_seconds": self.wall, "status": self.status}

    def write(self, directory):
        path = Path(directory) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))
        return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    return str(o)


def output_root(arg=None):
    return Path(arg or os.environ.get(OUTPUT_ENV) or "runs")


def run_dir(root, manifest):
    d = Path(root) / f"{manifest.name}-{manifest.hash[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))
    return str(path)


def write_csv(path, cols):
    from .simulate import write_columns_csv
    write_columns_csv(path, cols)
    return str(path)


# ------------------------------------------------------------ decay fit

def read_csv_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path} is empty")
    head = rows[0]
    cols = {h: [] for h in head}
    for r in rows[1:]:
        for h, v in zip(head, r):
            cols[h].append(float(v) if v != "" else math.nan)
    return {k: np.array(v) for k, v in cols.items()}


def fit_decay(source, column="l2_norm", t_min=None, t_max=None):
    """Least-squares fit of log ||y|| against t: returns (C, rate) with ||y|| ~ C exp(-rate t).

    `source` is a CSV path or a (t, values) pair.
    """
    from .simulate import fit_exponential
    if isinstance(source, (str, os.PathLike)):
        cols = read_csv_columns(source)
        t, v = cols["t"], cols[column]
    else:
        t, v = (np.asarray(a, dtype=float) for a in source)
    sel = np.ones(len(t), dtype=bool)
    if t_min is not None:
        sel &= t >= t_min
    if t_max is not None:
        sel &= t <= t_max
    t, v = t[sel], v[sel]
    if len(t) < 10:
        raise PreconditionError("need at least 10 samples to fit a decay rate")
    if np.any(~(v > 0)):
        raise PreconditionError("norm samples must be positive")
    return fit_exponential(t, v)


# ------------------------------------------------------------ tasks

def task_simulate(cfg, out):
    """Uncontrolled FEM trajectory."""
    from .model import FemGrid
    from .simulate import FemSystem, simulate_free
    grid = FemGrid(h=cfg["h"])
    system = FemSystem(grid, cfg["nu"], _coeffs(cfg))
    y0 = initial_state(cfg.get("y0", "sin(pi*x)"))(grid.x_interior)
    traj = simulate_free(system, y0, cfg["t_final"], cfg["dt"])
    C, rate = fit_decay((traj.t, traj.l2_norm))
    files = {"trajectory": write_csv(out / "trajectory.csv", traj.columns())}
    summary = {"fit_C": C, "fit_rate": rate, "final_l2": float(traj.l2_norm[-1])}
    files["summary"] = write_json(out / "summary.json", summary)
    return files, summary


def task_stability(cfg, out):
    from .model import ActuatorWindow
    from .stabilizability import EigenAnalysis, actuator_functional, static_stabilizability_verdict
    reaction = cfg.get("reaction", 0.0)
    act = ActuatorWindow(float(cfg.get("center", 0.5)), float(cfg["r"]))
    act.check()
    if isinstance(reaction, (int, float)) and cfg.get("eigen", "auto") != "fem":
        an = EigenAnalysis.closed_form(cfg["nu"], float(reaction), int(cfg.get("n_modes", 64)))
    else:
        from .model import FemGrid
        coeffs = _coeffs(cfg)
        if coeffs.convection is not None:
            raise ConfigError("the stability check covers reaction-diffusion without convection")
        grid = FemGrid(h=cfg["h"])
        an = EigenAnalysis.fem(grid, cfg["nu"], lambda x: coeffs.reaction(0.0, x),
                               count=int(cfg.get("count", 40)))
    verdict = static_stabilizability_verdict(an, actuator_functional(an, act))
    summary = verdict.to_dict(an)
    summary["representation"] = an.representation
    summary["j0"] = an.j0
    files = {"verdict": write_json(out / "verdict.json", summary)}
    return files, summary


def task_static_feedback(cfg, out):
    from .model import SpectralModel
    from .static_feedback import (ActuatorBank, build_projector, closed_loop_feedback,
                                  default_lambda, estimate_constants, random_states, GridOps,
                                  run_closed_loop)
    coeffs = _coeffs(cfg)
    model = SpectralModel(cfg["nu"], int(cfg["n_modes"]))
    bank = ActuatorBank(int(cfg["M"]), cfg["r"])
    proj = build_projector(model, bank)
    lam = default_lambda(coeffs)
    consts = estimate_constants(model, proj, lam, coeffs, float(cfg["theta"]), dt=cfg["dt"],
                                seed=int(cfg.get("seed", 0)))
    law = closed_loop_feedback(model, proj, lam, coeffs)
    y0 = random_states(model, 1, np.random.default_rng(int(cfg.get("seed", 0))))[0]
    horizon = float(cfg.get("horizon", 3 * consts.T))
    steps = int(round(horizon / cfg["dt"]))
    grid = GridOps(law.system, horizon + 2 * cfg["dt"], cfg["dt"])
    t, ops = grid.window(0.0, steps)
    ys, vs = run_closed_loop(law, y0, t, ops)
    cols = {"t": t, "l2_norm": model.norm_h(ys), "v_norm": model.norm_v(ys)}
    for i in range(vs.shape[1]):
        cols[f"u{i + 1}"] = vs[:, i]
    files = {"constants": write_json(out / "constants.json", consts.to_dict()),
             "trajectory": write_csv(out / "trajectory.csv", cols)}
    return files, {"constants": consts.to_dict()}


def task_switching(cfg, out):
    from .static_feedback import random_states
    from .switching import (THEORETICAL, choose_parameters, concatenate_intervals,
                            prepare_pipeline, theoretical_N)
    coeffs = _coeffs(cfg)
    mode = str(cfg.get("mode", "EMPIRICAL")).upper()
    ctx = prepare_pipeline(cfg["nu"], int(cfg["n_modes"]), int(cfg["M"]), cfg["r"],
                           float(cfg["theta"]), coeffs, dt=cfg["dt"], seed=int(cfg.get("seed", 0)))
    files = {"constants": write_json(out / "constants.json", ctx.constants.to_dict())}
    summary = {"constants": ctx.constants.to_dict(), "mode": mode}
    if mode == THEORETICAL:
        n_hat = theoretical_N(ctx.constants, ctx.smoothed, ctx.model, ctx.bank.M)
        summary["N_theoretical"] = n_hat
        if n_hat > 2 ** 16:
            summary["note"] = "closed-form N is too large to simulate; use EMPIRICAL mode"
            files["summary"] = write_json(out / "summary.json", summary)
            return files, summary
    choice = choose_parameters(ctx, mode, n_probes=int(cfg.get("n_probes", 3)),
                               seed=int(cfg.get("seed", 0)) + 1, safety=float(cfg.get("safety", 2.0)),
                               intervals=int(cfg.get("k_max", 3)))
    y0 = random_states(ctx.model, 1, np.random.default_rng(int(cfg.get("seed", 0)) + 1000))[0]
    run = concatenate_intervals(ctx, y0, int(cfg.get("k_max", 3)), choice.N, choice.epsilon, choice.xi)
    rows = run.sample()
    files["schedule"] = write_json(out / "schedule.json",
                                   [mc.schedule.to_dict() for mc in run.pieces])
    files["moving_control"] = write_csv(out / "moving_control.csv",
                                        {"t": rows[:, 0], "u": rows[:, 1], "c": rows[:, 2]})
    files["trajectory"] = write_csv(out / "trajectory.csv",
                                    {"t": run.t, "l2_norm": ctx.model.norm_h(run.states),
                                     "v_norm": ctx.model.norm_v(run.states)})
    report = {"choice": choice.to_dict(), "v_norms": run.v_norms,
              "intervals": [r.to_dict() for r in run.reports],
              "bound": [float(run.v_norms[0] * ((1 + ctx.constants.theta) / 2) ** k)
                        for k in range(len(run.v_norms))]}
    files["report"] = write_json(out / "stage_report.json", report)
    summary.update(report)
    return files, summary


def _rhc_single(cfg, beta, out, tag):
    from .model import FemGrid
    from .rhc import receding_horizon, static_bank_rhc, uncontrolled
    from .static_feedback import ActuatorBank
    coeffs = _coeffs(cfg)
    rc = _rhc_config(cfg, beta)
    grid = FemGrid(h=rc.h)
    y0 = initial_state(cfg["y0"])(grid.x_interior)
    mode = cfg.get("mode", "moving")
    if mode == "moving":
        run = receding_horizon((y0, float(cfg.get("c0", 0.5))), rc, cfg["nu"], coeffs, cfg["t_final"])
    elif mode == "static":
        run = static_bank_rhc((y0,), rc, cfg["nu"], coeffs, ActuatorBank(int(cfg.get("M", 1)), rc.r),
                              cfg["t_final"])
    elif mode == "uncontrolled":
        t, ys, l2 = uncontrolled(rc, cfg["nu"], coeffs, y0, cfg["t_final"])
        cols = {"t": t, "l2_norm": l2}
        C, rate = fit_decay((t, l2))
        files = {"trajectory": write_csv(out / f"{tag}.csv", cols)}
        return files, {"fit_C": C, "fit_rate": rate, "final_l2": float(l2[-1])}, True
    else:
        raise ConfigError(f"unknown rhc mode {mode!r}")
    files = {"trajectory": write_csv(out / f"{tag}.csv", run.columns())}
    C, rate = fit_decay((run.t, run.l2_norm))
    summary = {"beta": beta, "mode": mode, "fit_C": C, "fit_rate": rate,
               "final_l2": float(run.l2_norm[-1]), "initial_l2": float(run.l2_norm[0]),
               "max_abs_u": float(np.max(np.abs(run.u))) if run.u.size else 0.0,
               "failed": run.failed, "message": run.message, "solver": run.stats,
               "wall_seconds": run.wall}
    files["summary"] = write_json(out / f"{tag}.json", summary)
    return files, summary, not run.failed


def _rhc_worker(args):
    cfg, beta, out, tag = args
    logging.basicConfig(level=cfg.get("_log_level", "WARNING"))
    return tag, _rhc_single(cfg, beta, Path(out), tag)


def task_rhc(cfg, out):
    betas = cfg.get("betas") or [cfg.get("beta", 0.1)]
    if "beta" in cfg and cfg["beta"] is not None:
        betas = [cfg["beta"]]
    jobs = [(cfg, float(b), str(out), f"{cfg.get('mode', 'moving')}_beta{b:g}") for b in betas]
    workers = int(cfg.get("workers", 1))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_rhc_worker, jobs))
    else:
        results = [_rhc_worker(j) for j in jobs]
    files, summary, ok = {}, {}, True
    for tag, (f, s, good) in results:
        files.update({f"{tag}_{k}": v for k, v in f.items()})
        summary[tag] = s
        ok = ok and good
    if not ok:
        summary["failed"] = True
    return files, summary


TASKS = {"simulate": task_simulate, "stability": task_stability,
         "static-feedback": task_static_feedback, "switching": task_switching, "rhc": task_rhc}


def execute(name, kind, cfg, root=None):
    """Run one task into its own hashed directory; returns the manifest."""
    manifest = RunManifest.create(name, cfg)
    out = run_dir(output_root(root), manifest)
    t0 = time.perf_counter()
    files, summary = TASKS[kind](cfg, out)
    manifest.wall = time.perf_counter() - t0
    manifest.outputs = files
    manifest.stats = summary
    if isinstance(summary, dict) and summary.get("failed"):
        manifest.status = "failed"
    manifest.write(out)
    return manifest, out


def run_experiment(name, overrides=None, profile="paper", root=None, config=None):
    """Run a named experiment with the profile defaults, a config mapping and overrides."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    exp = dict(EXPERIMENTS[name])
    kind = exp.pop("kind")
    cfg = build_config({**PROFILES[profile], **exp}, config, overrides)
    if kind == "rhc":
        _rhc_config(cfg, cfg.get("beta") or cfg["betas"][0])
    return execute(name, kind, cfg, root)


# ------------------------------------------------------------ argparse

def _common(p):
    p.add_argument("--config", help="TOML or JSON configuration file")
    p.add_argument("--profile", default="paper", choices=sorted(PROFILES))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration value (repeatable)")
    p.add_argument("--out", help="output root (default $MOVACT_OUTPUT or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true", help="print the summary as JSON")


def _model_args(p):
    p.add_argument("--nu", type=float)
    p.add_argument("--reaction", help="number, preset name or table path")
    p.add_argument("--convection")
    p.add_argument("--h", type=float)
    p.add_argument("--dt", type=float)


def make_parser():
    ap = argparse.ArgumentParser(prog="movact", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="uncontrolled FEM simulation")
    _common(p)
    _model_args(p)
    p.add_argument("--y0")
    p.add_argument("--t-final", type=float)

    p = sub.add_parser("stability-check", help="can a single static actuator stabilize?")
    _common(p)
    _model_args(p)
    p.add_argument("--center", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--n-modes", type=int)
    p.add_argument("--eigen", choices=["auto", "fem"])

    p = sub.add_parser("static-feedback", help="feedback constants of the static bank")
    _common(p)
    _model_args(p)
    p.add_argument("--M", type=int)
    p.add_argument("--r", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--n-modes", type=int)

    p = sub.add_parser("switching", help="moving control from the static feedback")
    _common(p)
    _model_args(p)
    p.add_argument("--theta", type=float)
    p.add_argument("--mode", choices=["EMPIRICAL", "THEORETICAL", "empirical", "theoretical"])
    p.add_argument("--k-max", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--r", type=float)
    p.add_argument("--n-modes", type=int)

    p = sub.add_parser("rhc", help="receding horizon control")
    _common(p)
    p.add_argument("--example", choices=["1", "2"], default="1")
    p.add_argument("--beta", type=float)
    p.add_argument("--mode", choices=["moving", "static", "uncontrolled"])
    p.add_argument("--M", type=int)
    p.add_argument("--t-final", type=float)
    p.add_argument("--h", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("run", help="run a named experiment")
    _common(p)
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--beta", type=float)
    p.add_argument("--mode")
    p.add_argument("--M", type=int)
    p.add_argument("--t-final", type=float)
    p.add_argument("--h", type=float)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("fit-decay", help="fit C exp(-rate t) to a CSV trajectory")
    p.add_argument("csv")
    p.add_argument("--column", default="l2_norm")
    p.add_argument("--json", action="store_true")
    return ap


_FLAG_KEYS = {"nu": "nu", "reaction": "reaction", "convection": "convection", "h": "h", "dt": "dt",
              "y0": "y0", "t_final": "t_final", "center": "center", "r": "r", "n_modes": "n_modes",
              "M": "M", "theta": "theta", "mode": "mode", "k_max": "k_max", "beta": "beta",
              "workers": "workers", "seed": "seed", "eigen": "eigen"}


def _flag_layer(args):
    layer = {}
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            layer[key] = _number_or_text(v) if key in ("reaction", "convection") else v
    return layer


def _number_or_text(v):
    try:
        return float(v)
    except (TypeError, ValueError):
        return v


def _config_layer(args):
    if not getattr(args, "config", None):
        return {}, None
    data = load_config(args.config)
    prof = data.pop("profile", None)
    data["_base_dir"] = str(Path(args.config).parent)
    return data, prof


def dispatch(args):
    if args.command == "fit-decay":
        C, rate = fit_decay(args.csv, args.column)
        return {"C": C, "rate": rate}, None
    overrides = dict(parse_override(s) for s in args.set)
    file_layer, prof = _config_layer(args)
    profile = prof or args.profile
    base_dir = file_layer.pop("_base_dir", None)
    flags = _flag_layer(args)
    if args.command == "run":
        manifest, out = run_experiment(args.experiment, {**flags, **overrides}, profile, args.out,
                                       file_layer)
        return manifest.stats, out
    kind = {"simulate": "simulate", "stability-check": "stability", "static-feedback": "static-feedback",
            "switching": "switching", "rhc": "rhc"}[args.command]
    base = dict(PROFILES[profile])
    if kind == "rhc":
        exp = dict(EXPERIMENTS["example1" if args.example == "1" else "example2"])
        exp.pop("kind")
        base.update(exp)
    elif kind == "switching":
        exp = dict(EXPERIMENTS["switching-demo"])
        exp.pop("kind")
        base.update(exp)
    elif kind == "stability":
        exp = dict(EXPERIMENTS["stability-check"])
        exp.pop("kind")
        base.update(exp)
    elif kind == "static-feedback":
        base.update({"reaction": "-3-2|sin(t+x)|", "convection": "|cos(t+x)|", "M": 3, "theta": 0.5})
    else:
        base.update({"reaction": -5.0, "convection": 0.0, "y0": "sin(2*pi*x)", "h": 0.005})
    cfg = build_config(base, file_layer, flags, overrides)
    if base_dir:
        cfg["_base_dir"] = base_dir
    if kind == "rhc":
        _rhc_config(cfg, cfg.get("beta") or cfg["betas"][0])
    manifest, out = execute(args.command, kind, cfg, args.out)
    return manifest.stats, out


def main(argv=None):
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary, out = dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, GeometryError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (StabilizationError, ConvergenceError, OptimizerError, PipelineError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MovactError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if getattr(args, "json", False):
        print(json.dumps(summary, indent=2, default=_jsonable))
    else:
        _print_summary(args.command, summary, out)
    if isinstance(summary, dict) and summary.get("failed"):
        return EXIT_NUMERICAL
    return EXIT_OK


def _print_summary(command, summary, out):
    if command == "stability-check" or summary.get("verdict"):
        print(f"verdict: {summary['verdict']}")
        if summary.get("eigenvalue") is not None:
            print(f"eigenvalue: {summary['eigenvalue']:.10g} (index {summary['index']})")
        if summary.get("witness_coeffs"):
            print("witness coefficients: " + " ".join(f"{c:.6g}" for c in summary["witness_coeffs"]))
        print(f"reason: {summary['reason']}")
    else:
        for k, v in summary.items():
            if isinstance(v, dict):
                short = {kk: vv for kk, vv in v.items() if not isinstance(vv, (list, dict))}
                print(f"{k}: {json.dumps(short, default=_jsonable)}")
            elif not isinstance(v, list):
                print(f"{k}: {v}")
    if out is not None:
        print(f"output: {out}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
