"""Command-line interface: ``mlocp {fit,solve,complexity,reference}``.

Every subcommand reads one JSON configuration. Command-line flags override
its entries; ``MLOCP_OUT`` overrides the output directory and
``MLOCP_THREADS`` the thread-count hint. Each run writes
``run_config.json`` with the fully resolved configuration next to its
outputs.

Exit status: 0 on success, 1 on configuration or I/O errors, 2 when a
solver fails to converge.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import batch
from .bench import (DEFAULT_MEMORY_GUARD, METHODS, default_eps_grid, reference_cache_path,
                    reference_control, run_complexity, write_report)
from .calibrate import fit_mc_constant, fit_spatial_rate, fit_surplus_rate
from .errors import BudgetError, ConfigurationError, ConvergenceError
from .io import atomic_write_text, format_float, write_field
from .multilevel import LEVEL_CAP, mc_plan, mlmc_plan, multilevel_control, single_level_control
from .ocp import DEFAULT_TOL, BENCHMARK_BOUNDS, OcpSpec

log = logging.getLogger("mlocp")

CONSTANT_KEYS = ("C1", "alpha", "C2", "C3", "beta", "eta")


@dataclass
class RunConfig:
    """Resolved run configuration; field names are the JSON keys."""

    dim: int = 1
    nu: float = 1e-2
    target: str = "benchmark"
    bounds: object = None          # null, [a, b] or "benchmark"
    projection: str = "pointwise"
    h_base: float = 0.25
    seed: int = 0
    tol: float = DEFAULT_TOL
    gauss_n: int = 8
    constants: object = None       # {C1, alpha, C2, C3, beta[, eta]} or a path to a JSON file
    method: str = "mlmc"
    methods: list = field(default_factory=lambda: list(METHODS))
    eps: float = 0.25
    eps_list: list | None = None
    replicates: int = 5
    ref_level: int | None = None
    memory_guard: int = DEFAULT_MEMORY_GUARD
    level_cap: int = LEVEL_CAP
    wall_time: bool = True
    fit_levels: list = field(default_factory=lambda: list(range(0, 6)))
    mc_level: int = 4
    mc_ks: list = field(default_factory=lambda: list(range(2, 11)))
    mc_repetitions: int = 20
    surplus_levels: list = field(default_factory=lambda: list(range(1, 6)))
    surplus_repetitions: int = 10
    n_base: int = 4
    out: str = "."
    cache_dir: str | None = None
    threads: int = 1

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("the configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigurationError(f"methods must be a nonempty subset of {METHODS}")
        for name in ("replicates", "gauss_n", "mc_repetitions", "surplus_repetitions", "n_base",
                     "threads"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.eps_list is not None and (not self.eps_list
                                          or any(not e > 0 for e in self.eps_list)):
            raise ConfigurationError("eps_list must hold positive tolerances")
        if not self.eps > 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps!r}")
        self.spec()  # problem fields

    def spec(self):
        bounds = self.bounds
        if bounds == "benchmark":
            bounds = BENCHMARK_BOUNDS.get(self.dim)
        elif bounds is not None:
            if not (isinstance(bounds, (list, tuple)) and len(bounds) == 2):
                raise ConfigurationError(f"bounds must be null, 'benchmark' or [a, b], got {bounds!r}")
            bounds = tuple(float(b) for b in bounds)
        return OcpSpec(dim=self.dim, nu=float(self.nu), target=self.target, bounds=bounds,
                       h_base=float(self.h_base), projection=self.projection)

    def out_dir(self):
        return Path(self.out)

    def cache(self):
        return Path(self.cache_dir) if self.cache_dir else self.out_dir() / "cache"

    def resolved_constants(self):
        c = self.constants
        if c is None:
            path = self.out_dir() / "constants.json"
            if not path.exists():
                raise ConfigurationError("no constants given and no constants.json in the output "
                                         "directory; run 'fit' first")
            c = str(path)
        if isinstance(c, str):
            try:
                c = json.loads(Path(c).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigurationError(f"cannot read constants from {c}: {exc}") from exc
        if not isinstance(c, dict):
            raise ConfigurationError("constants must be an object or a path")
        unknown = sorted(set(c) - set(CONSTANT_KEYS))
        if unknown:
            raise ConfigurationError(f"unknown constants: {', '.join(unknown)}")
        return {k: float(v) for k, v in c.items()}


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed JSON in {path}: line {exc.lineno} column "
                                 f"{exc.colno}: {exc.msg}") from exc
    return RunConfig.from_dict(data)


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_config(cfg, extra=None):
    payload = {"config": asdict(cfg)}
    if extra:
        payload.update(extra)
    atomic_write_text(cfg.out_dir() / "run_config.json", _dump(payload))


# ------------------------------------------------------------ subcommands


def cmd_fit(cfg):
    spec = cfg.spec()
    alpha = fit_spatial_rate(spec, cfg.fit_levels, gauss_n=cfg.gauss_n, tol=cfg.tol)
    mc = fit_mc_constant(spec, cfg.mc_level, cfg.mc_ks, cfg.mc_repetitions, cfg.seed,
                         cfg.gauss_n, cfg.tol)
    surplus = fit_surplus_rate(spec, cfg.surplus_levels, cfg.surplus_repetitions, cfg.n_base,
                               cfg.seed, cfg.gauss_n, cfg.tol)
    rows = [("alpha", alpha, "C1", alpha["alpha"], alpha["C1"]),
            ("mc", mc, "C2", mc["eta"], mc["C2"]),
            ("surplus", surplus, "C3", surplus["beta"], surplus["C3"])]
    lines = ["quantity,slope,intercept,residual,warning,rate,constant_name,constant"]
    for name, fit, cname, rate, const in rows:
        lines.append(",".join([name, format_float(fit.slope), format_float(fit.intercept),
                               format_float(fit.residual), str(fit.warning).lower(),
                               format_float(rate), cname, format_float(const)]))
    out = cfg.out_dir()
    atomic_write_text(out / "rates.csv", "\n".join(lines) + "\n")
    constants = {"C1": alpha["C1"], "alpha": alpha["alpha"], "C2": mc["C2"], "eta": 0.5,
                 "C3": surplus["C3"], "beta": surplus["beta"]}
    atomic_write_text(out / "constants.json", _dump(constants))
    _write_config(cfg, {"constants": constants})
    for name, fit, cname, rate, const in rows:
        print(f"{name}: slope {fit.slope:.4f}  {cname} = {const:.4g}")
    return 0


def _solve_plan(cfg, spec, constants):
    c = constants
    eta = c.get("eta", 0.5)
    need = ("C1", "alpha", "C2") if cfg.method == "mc" else ("C1", "alpha", "C3", "beta")
    missing = [k for k in need if k not in c]
    if missing:
        raise ConfigurationError(f"missing constants: {', '.join(missing)}")
    if cfg.method == "mc":
        return mc_plan(cfg.eps, c["C1"], c["alpha"], c["C2"], spec.dim, eta, spec.h_base,
                       cfg.level_cap)
    return mlmc_plan(cfg.eps, c["C1"], c["alpha"], c["C3"], c["beta"], spec.dim, eta,
                     spec.h_base, cfg.level_cap)


def cmd_solve(cfg):
    spec = cfg.spec()
    constants = cfg.resolved_constants()
    plan = _solve_plan(cfg, spec, constants)
    if plan.method == "mc":
        res = single_level_control(spec, plan.level, plan.samples[0], cfg.seed, tol=cfg.tol)
    else:
        res = multilevel_control(spec, plan, cfg.seed, tol=cfg.tol)
    out = cfg.out_dir()
    write_field(out / "control.mloc", res.control.nodal)
    if spec.pointwise:
        write_field(out / "preimage.mloc", res.control.preimage)
    summary = {"method": plan.method, "eps": plan.eps, "level": plan.level,
               "samples": list(plan.samples), "work": plan.work}
    _write_config(cfg, {"constants": constants, "summary": summary})
    samples = ";".join(str(n) for n in plan.samples)
    print(f"{plan.method} eps={format_float(plan.eps)} level={plan.level} samples={samples} "
          f"work={plan.work} time_s={res.time_s:.3f}")
    return 0


def cmd_complexity(cfg):
    spec = cfg.spec()
    constants = cfg.resolved_constants()
    eps_list = cfg.eps_list or default_eps_grid(constants["C1"], constants["alpha"])
    rows = run_complexity(spec, eps_list, cfg.methods, cfg.replicates, constants, cfg.seed,
                          cfg.ref_level, cfg.gauss_n, cfg.memory_guard, cfg.level_cap,
                          cfg.cache(), cfg.tol, cfg.wall_time)
    path = write_report(rows, cfg.out_dir() / "complexity.csv")
    _write_config(cfg, {"constants": constants, "eps_list": list(eps_list)})
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_reference(cfg):
    spec = cfg.spec()
    if cfg.ref_level is None:
        raise ConfigurationError("reference needs ref_level in the configuration")
    cache = cfg.cache()
    reference_control(spec, cfg.ref_level, cfg.gauss_n, cache, cfg.tol)
    path = reference_cache_path(spec, cfg.ref_level, cfg.gauss_n, cache)
    if path is None:
        raise ConfigurationError("this problem has no cache key")
    _write_config(cfg, {"reference": path.name})
    print(f"reference cached at {path}")
    return 0


COMMANDS = {"fit": cmd_fit, "solve": cmd_solve, "complexity": cmd_complexity,
            "reference": cmd_reference}


def build_parser():
    parser = argparse.ArgumentParser(prog="mlocp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-level progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--eps", type=float)
        p.add_argument("--eps-list", help="comma-separated tolerances")
        p.add_argument("--seed", type=int)
        p.add_argument("--replicates", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int)
    return parser


def _apply_overrides(cfg, args):
    if args.method is not None:
        cfg.method = args.method
        cfg.methods = [args.method]
    if args.eps is not None:
        cfg.eps = args.eps
    if args.eps_list is not None:
        try:
            cfg.eps_list = [float(e) for e in args.eps_list.split(",") if e.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"bad --eps-list: {exc}") from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replicates is not None:
        cfg.replicates = args.replicates
    if os.environ.get("MLOCP_OUT"):
        cfg.out = os.environ["MLOCP_OUT"]
    if args.out is not None:
        cfg.out = args.out
    if os.environ.get("MLOCP_THREADS") and args.threads is None:
        args.threads = int(os.environ["MLOCP_THREADS"])
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def run(argv=None):
    """Parse ``argv``, run the subcommand and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        batch.set_threads(cfg.threads)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg)
    except (ConfigurationError, BudgetError) as exc:
        print(f"mlocp: error: {exc}", file=sys.stderr)
        return 1
    except ConvergenceError as exc:
        print(f"mlocp: solver failure: {exc} (residual {exc.residual:.3e}, {exc.context})",
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mlocp: I/O error: {exc}", file=sys.stderr)
        return 1
    except (TypeError, ValueError) as exc:
        print(f"mlocp: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
