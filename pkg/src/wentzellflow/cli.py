"""Scenario runner: JSON config in, CSV/JSON artifacts out.

A run config selects a grid, a flux model, sources, a horizon and a mode;
``run`` executes it and writes ``manifest.json`` (config echo, versions,
diagnostics summary, pass flags), a ``metrics.jsonl`` stream with pinned
float formatting, and per-slice field CSVs.  Exit codes: 0 success,
2 config error, 3 solver nonconvergence, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy

from . import __version__
from . import discretization as disc
from . import expressions as ex
from . import flow_driver as fd
from .flux_models import make_model
from .step_solver import StepConfig, StepNonConverged

__all__ = ["RunConfig", "ConfigError", "parse_config", "serialize_config",
           "run", "main", "PRESETS"]

MODES = ("flow", "convergence", "contraction", "asymptotics", "obstacle", "tv")


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


@dataclass
class RunConfig:
    mode: str = "flow"
    grid: dict = field(default_factory=lambda: {"kind": "interval", "n": 32})
    model: dict = field(default_factory=lambda: {"id": "quadratic"})
    sources: dict = field(default_factory=dict)
    T: float = 1.0
    n: int | None = None
    h: float | None = None
    step: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    out_dir: str = "out"
    save_every: int = 1
    seed: int = 0

    @property
    def n_steps(self):
        if self.n is not None:
            return int(self.n)
        return int(round(self.T / self.h))


PRESETS = {
    "quadratic-1d": {
        "grid": {"kind": "interval", "n": 32},
        "model": {"id": "quadratic"},
        "sources": {"y0": "cos(2*pi*x)"},
        "T": 0.5, "n": 50,
    },
    "quadratic-2d": {
        "grid": {"kind": "rectangle", "nx": 8, "ny": 8},
        "model": {"id": "quadratic"},
        "sources": {"y0": "cos(pi*x)*cos(pi*y)"},
        "T": 0.25, "n": 25,
    },
    "plaplacian-1d": {
        "grid": {"kind": "interval", "n": 32},
        "model": {"id": "plaplacian", "p": 4.0},
        "sources": {"y0": "sin(pi*x)"},
        "T": 0.5, "n": 50,
    },
    "fractured-1d": {
        "grid": {"kind": "interval", "n": 32},
        "model": {"id": "fractured", "p": 4.0, "alpha": 1.0, "thresholds": 0.5},
        "sources": {"y0": "cos(pi*x)"},
        "T": 0.5, "n": 50,
        "step": {"lam_min": 1e-8},
    },
    "loggrowth-1d": {
        "grid": {"kind": "interval", "n": 32},
        "model": {"id": "loggrowth", "a": 1.0},
        "sources": {"y0": "cos(2*pi*x)"},
        "T": 0.5, "n": 50,
    },
    "tv-1d": {
        "grid": {"kind": "interval", "n": 32},
        "model": {"id": "tv", "rho": 1.0},
        "sources": {"y0": {"profile": "step", "split": 0.5}},
        "T": 0.2, "n": 40,
    },
    "constant-1d": {
        "grid": {"kind": "interval", "n": 8},
        "model": {"id": "quadratic"},
        "sources": {"y0": "1"},
        "T": 0.2, "n": 10,
    },
}

_TOP_KEYS = {"mode", "preset", "grid", "model", "sources", "T", "n", "h",
             "step", "options", "out_dir", "save_every", "seed"}
_GRID_KEYS = {"kind", "n", "length", "nx", "ny", "lx", "ly"}
_SOURCE_KEYS = {"f", "g", "y0"}
_STEP_KEYS = {"tol", "lam0", "lam_decay", "lam_min", "max_iter", "optimizer",
              "use_viscosity", "certificate_tol", "pd_gap", "pd_max_iter"}
_OPTION_KEYS = {"refinements", "perturbation", "T_long", "n_long", "tol"}


def _reject_unknown(d, allowed, where):
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} at {where}")


def _deep_merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(path_or_text):
    """Parse and validate a JSON run config from a path or literal text."""
    text = path_or_text
    if isinstance(path_or_text, str) and os.path.exists(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"PARSE error at line {exc.lineno}, column "
                          f"{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(raw)


def config_from_dict(raw):
    raw = dict(raw)
    _reject_unknown(raw, _TOP_KEYS, "top level")
    preset = raw.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; "
                              f"known: {sorted(PRESETS)}")
        raw = _deep_merge(PRESETS[preset], raw)
    _reject_unknown(raw.get("grid", {}), _GRID_KEYS, "grid")
    _reject_unknown(raw.get("sources", {}), _SOURCE_KEYS, "sources")
    _reject_unknown(raw.get("step", {}), _STEP_KEYS, "step")
    _reject_unknown(raw.get("options", {}), _OPTION_KEYS, "options")
    if "id" not in raw.get("model", {"id": "quadratic"}):
        raise ConfigError("model needs an 'id' key")
    cfg = RunConfig(
        mode=raw.get("mode", "flow"),
        grid=dict(raw.get("grid", {"kind": "interval", "n": 32})),
        model=dict(raw.get("model", {"id": "quadratic"})),
        sources=dict(raw.get("sources", {})),
        T=float(raw.get("T", 1.0)),
        n=raw.get("n"),
        h=raw.get("h"),
        step=dict(raw.get("step", {})),
        options=dict(raw.get("options", {})),
        out_dir=str(raw.get("out_dir", "out")),
        save_every=int(raw.get("save_every", 1)),
        seed=int(raw.get("seed", 0)),
    )
    _validate(cfg)
    return cfg


def _validate(cfg):
    problems = []
    if cfg.mode not in MODES:
        problems.append(f"unknown mode {cfg.mode!r}; known: {MODES}")
    if (cfg.n is None) == (cfg.h is None):
        problems.append("exactly one of 'n' or 'h' must be given")
    if cfg.h is not None and not 0 < cfg.h <= cfg.T:
        problems.append("'h' must lie in (0, T]")
    if cfg.n is not None and cfg.n < 1:
        problems.append("'n' must be a positive integer")
    if not cfg.T > 0:
        problems.append("'T' must be positive")
    if cfg.save_every < 1:
        problems.append("'save_every' must be >= 1")
    if cfg.mode == "tv" and cfg.model.get("id") != "tv":
        problems.append("mode 'tv' requires the 'tv' model")
    if problems:
        raise ConfigError("VALIDATION errors: " + "; ".join(problems))


def serialize_config(cfg):
    """Config as a plain dict; parse(serialize(cfg)) round-trips."""
    out = asdict(cfg)
    return out


def _build(cfg):
    grid = disc.build_grid(cfg.grid)
    params = {k: v for k, v in cfg.model.items() if k != "id"}
    model = make_model(cfg.model["id"], dimension=grid.dimension, **params)
    y0_fn = ex.make_initial(cfg.sources.get("y0"), grid.dimension, cfg.seed)
    f = ex.make_source(cfg.sources.get("f"), grid.dimension, cfg.seed)
    g = ex.make_source(cfg.sources.get("g"), grid.dimension, cfg.seed)
    problem = fd.ProblemData(grid, y0_fn(grid.nodes), f, g, cfg.T, model)
    step_cfg = StepConfig(**cfg.step)
    return grid, model, problem, step_cfg


def _jsonable(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


class _Metrics:
    """JSON-lines writer with pinned float formatting (17 significant
    digits, '.' decimal separator) for byte-reproducible streams."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def write(self, **row):
        packed = {k: self._fmt(v) for k, v in sorted(row.items())}
        self.fh.write(json.dumps(packed, sort_keys=True) + "\n")

    @staticmethod
    def _fmt(v):
        if isinstance(v, (float, np.floating)):
            return float(f"{float(v):.17g}")
        if isinstance(v, (np.integer,)):
            return int(v)
        return v

    def close(self):
        self.fh.close()


def _flow_metrics(metrics, traj, grid, energies=None):
    for i in range(traj.n_steps + 1):
        row = {
            "step": i,
            "t": float(traj.times[i]),
            "norm_domain": disc.norm_domain(grid, traj.fields[i]),
            "norm_boundary": disc.norm_boundary(grid, disc.trace(grid, traj.fields[i])),
        }
        if i > 0:
            row["residual"] = float(traj.step_residuals[i - 1])
            row["certificate"] = float(traj.step_certificates[i - 1])
        if energies is not None:
            row["energy"] = float(energies[i])
        metrics.write(**row)


def run(cfg, verbose=False):
    """Execute a run config; returns the process exit code.

    With ``verbose`` the per-step solver iteration logs are appended to the
    metrics stream as additional JSON lines.
    """
    try:
        grid, model, problem, step_cfg = _build(cfg)
    except (ConfigError, ValueError, ex.ExpressionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics = _Metrics(os.path.join(cfg.out_dir, "metrics.jsonl"))
    manifest = {
        "config": _jsonable(serialize_config(cfg)),
        "versions": {
            "wentzellflow": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "mode": cfg.mode,
        "checks": {},
        "results": {},
    }
    code = 0
    try:
        if cfg.mode in ("flow", "obstacle", "tv"):
            code = _run_flow_mode(cfg, grid, model, problem, step_cfg,
                                  metrics, manifest, verbose)
        elif cfg.mode == "convergence":
            code = _run_convergence(cfg, problem, step_cfg, metrics, manifest)
        elif cfg.mode == "contraction":
            code = _run_contraction(cfg, grid, problem, step_cfg, metrics,
                                    manifest)
        elif cfg.mode == "asymptotics":
            code = _run_asymptotics(cfg, problem, step_cfg, metrics, manifest)
    except StepNonConverged as exc:
        manifest["failure"] = {"kind": "NONCONVERGED", "message": str(exc),
                               "residual": _jsonable(exc.residual)}
        code = 3
    except (fd.IncompatibleData, fd.Inapplicable) as exc:
        manifest["failure"] = {"kind": type(exc).__name__, "message": str(exc)}
        code = 4
    finally:
        metrics.close()
    manifest["exit_code"] = code
    manifest["pass"] = code == 0
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        json.dump(_jsonable(manifest), fh, indent=1, sort_keys=True)
    return code


def _run_flow_mode(cfg, grid, model, problem, step_cfg, metrics, manifest,
                   verbose=False):
    traj = fd.run_flow(problem, cfg.n_steps, step_cfg,
                       obstacle=cfg.mode == "obstacle")
    if verbose:
        for i, stages in enumerate(traj.step_logs, start=1):
            for stage in stages:
                metrics.write(event="stage", step=i,
                              **{k: v for k, v in stage.items() if v is not None})
    rep = fd.stability_report(traj)
    checks = {"gronwall": rep.gronwall_pass}
    energies = rep.energies
    if problem.autonomous:
        er = fd.energy_trace(traj)
        checks["energy_monotone"] = er.monotone_pass
        checks["energy_dissipation"] = er.dissipation_pass
        manifest["results"]["energy_initial"] = float(er.energies[0])
        manifest["results"]["energy_final"] = float(er.energies[-1])
    if cfg.mode == "obstacle":
        checks["nonnegative"] = bool(traj.fields.min() >= -1e-12)
        checks["complementarity"] = bool(np.max(traj.step_residuals) <= 1e-6)
    _flow_metrics(metrics, traj, grid, energies)
    fd.export_trajectory(traj, os.path.join(cfg.out_dir, "fields"),
                         cfg.save_every)
    manifest["results"]["diagnostics"] = rep.to_dict()
    manifest["checks"].update(checks)
    return 0 if all(checks.values()) else 4


def _run_convergence(cfg, problem, step_cfg, metrics, manifest):
    refinements = int(cfg.options.get("refinements", 3))
    base = cfg.n_steps
    ns = [base * 2 ** k for k in range(refinements + 1)]
    table = fd.convergence_study(problem, ns, step_cfg)
    for row in table.rows():
        metrics.write(**row)
    manifest["results"]["convergence"] = {
        "ns": table.ns, "r": table.r,
        "distances": _jsonable(table.distances),
        "orders": _jsonable(table.orders),
    }
    if problem.model.kind == "quadratic":
        ok = bool(table.orders and min(table.orders) >= 0.8)
        manifest["checks"]["order_at_least_0.8"] = ok
    else:
        diffs = table.distances
        ok = all(b < a for a, b in zip(diffs[:-1], diffs[1:]))
        manifest["checks"]["distances_decreasing"] = ok
    return 0 if ok else 4


def _run_contraction(cfg, grid, problem, step_cfg, metrics, manifest):
    pert = cfg.options.get("perturbation", {})
    y0_fn = ex.make_initial(pert.get("y0", cfg.sources.get("y0")),
                            grid.dimension, cfg.seed + 1)
    f = (ex.make_source(pert["f"], grid.dimension, cfg.seed + 1)
         if "f" in pert else problem.f)
    g = (ex.make_source(pert["g"], grid.dimension, cfg.seed + 1)
         if "g" in pert else problem.g)
    perturbed = fd.ProblemData(grid, y0_fn(grid.nodes), f, g, problem.T,
                               problem.model)
    rep = fd.contraction_check(problem, perturbed, cfg.n_steps, step_cfg)
    for m in range(rep.distances.size):
        metrics.write(step=m, distance_sq=float(rep.distances[m]),
                      data_sq=float(rep.data_terms[m]))
    manifest["results"]["contraction"] = {
        "c_empirical": rep.c_empirical,
        "pure_initial": rep.pure_initial,
    }
    manifest["checks"]["nonexpansive"] = rep.nonexpansive_pass
    return 0 if rep.nonexpansive_pass else 4


def _run_asymptotics(cfg, problem, step_cfg, metrics, manifest):
    t_long = float(cfg.options.get("T_long", 50.0 * problem.T))
    n_long = int(cfg.options.get("n_long", cfg.n_steps * 10))
    tol = float(cfg.options.get("tol", 1e-6))
    rep = fd.asymptotics_check(problem, t_long, n_long, step_cfg, tol)
    for m, d in enumerate(rep.distances):
        metrics.write(step=m, distance=float(d))
    manifest["results"]["asymptotics"] = {
        "final_distance": rep.final_distance,
        "eventually_decreasing": rep.eventually_decreasing,
    }
    manifest["checks"]["converges_to_equilibrium"] = rep.passed
    return 0 if rep.passed else 4


def _apply_overrides(raw, overrides):
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, val = item.split("=", 1)
        try:
            val = json.loads(val)
        except json.JSONDecodeError:
            pass  # keep the raw string
        target = raw
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot override through non-object {part!r}")
        target[parts[-1]] = val
    return raw


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="wentzellflow",
        description="Variational time stepping for parabolic flows with "
                    "dynamic boundary flux")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="execute a JSON run config")
    runp.add_argument("config", help="path to a JSON config (or '-' for stdin)")
    runp.add_argument("--override", action="append", default=[],
                      metavar="KEY=VALUE", help="dotted-path config override")
    runp.add_argument("--out", default=None, help="output directory")
    runp.add_argument("--verbose", action="store_true",
                      help="echo progress to stderr")
    args = parser.parse_args(argv)

    if args.config == "-":
        text = sys.stdin.read()
    else:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
    try:
        raw = json.loads(text)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        raw = _apply_overrides(raw, args.override)
        if args.out:
            raw["out_dir"] = args.out
        cfg = config_from_dict(raw)
    except (ConfigError, json.JSONDecodeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.verbose:
        print(f"running mode={cfg.mode} model={cfg.model.get('id')} "
              f"n={cfg.n_steps} out={cfg.out_dir}", file=sys.stderr)
    code = run(cfg, verbose=args.verbose)
    if args.verbose:
        print(f"exit code {code}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
