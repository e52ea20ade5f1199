"""Reference solutions and the Monte Carlo vs multilevel complexity sweep."""
from __future__ import annotations

import csv
import io as _io
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetError, ConfigurationError, FormatError
from .fem import build_mesh
from .io import atomic_write_text, format_float, read_field, write_field
from .multilevel import (LEVEL_CAP, dof_count, mc_plan, mlmc_plan, multilevel_control,
                         select_level, single_level_control)
from .ocp import DEFAULT_TOL, control_distance, solve_sao
from .stochastic import gauss_tensor_rule

log = logging.getLogger(__name__)

CSV_HEADER = ("method", "eps", "level", "samples", "error", "work", "time_s", "seed",
              "replicate")
METHODS = ("mc", "mlmc")
# dofs x samples of the largest single solve; about 400 MB of retained states
DEFAULT_MEMORY_GUARD = 50_000_000


# ---------------------------------------------------------------- reference


def reference_cache_path(spec, ref_level, gauss_n, cache_dir):
    digest = spec.digest()
    if digest is None or cache_dir is None:
        return None
    return Path(cache_dir) / f"reference-{digest}-l{ref_level}-g{gauss_n}.mloc"


def reference_control(spec, ref_level, gauss_n=8, cache_dir=None, tol=DEFAULT_TOL):
    """Gauss-rule optimal control on mesh ``ref_level``.

    With ``cache_dir`` the preimage of the control (the P1 field the box
    projection is applied to) is stored there and reused; an unreadable or
    mismatching cache file is recomputed with a warning. Specs with a
    callable target have no stable key and are never cached.
    """
    mesh = build_mesh(spec.dim, ref_level, spec.h_base)
    path = reference_cache_path(spec, ref_level, gauss_n, cache_dir)
    if path is not None and path.exists():
        try:
            pre = read_field(path)
            if pre.mesh is not mesh:
                raise FormatError(f"cached mesh {pre.mesh} is not {mesh}")
            return spec.control(pre)
        except (FormatError, OSError) as exc:
            warnings.warn(f"discarding reference cache {path}: {exc}", stacklevel=2)
    sol = solve_sao(mesh, gauss_tensor_rule(gauss_n), spec, tol=tol)
    control = sol.function
    if path is not None:
        write_field(path, control.preimage)
    return control


# --------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class ComplexityRow:
    """One (method, eps, replicate) run.

    Infeasible plans keep their level, samples and modeled work but have
    ``error`` and ``time_s`` set to NaN.
    """

    method: str
    eps: float
    level: int
    samples: tuple
    error: float
    work: int
    time_s: float
    seed: int
    replicate: int

    @property
    def feasible(self):
        return not math.isnan(self.error)

    def sort_key(self):
        return (self.method, -self.eps, self.replicate)

    def csv_fields(self):
        return [self.method, format_float(self.eps), str(self.level),
                ";".join(str(n) for n in self.samples), format_float(self.error),
                str(self.work), format_float(self.time_s), str(self.seed), str(self.replicate)]


def default_eps_grid(C1, alpha, max_level=4):
    """Halvings of ``eps_0 = 2 C1`` (level 0) down to the first eps needing ``max_level``.

    With ``alpha`` near 2 every second halving adds a level, so the grid has
    about ``2 max_level + 1`` points.
    """
    grid = [2.0 * C1]
    while select_level(grid[-1], C1, alpha, cap=10**6) < max_level:
        grid.append(grid[-1] / 2)
    return grid


def _plan(method, eps, constants, spec, level_cap):
    c = constants
    eta = c.get("eta", 0.5)
    if method == "mc":
        return mc_plan(eps, c["C1"], c["alpha"], c["C2"], spec.dim, eta, spec.h_base, level_cap)
    return mlmc_plan(eps, c["C1"], c["alpha"], c["C3"], c["beta"], spec.dim, eta, spec.h_base,
                     level_cap)


def retained_values(plan):
    """Largest ``dofs x samples`` held by one sample-average solve of the plan."""
    levels = range(plan.level + 1) if plan.method == "mlmc" else [plan.level]
    return max(dof_count(plan.dim, l, plan.h_base) * n for l, n in zip(levels, plan.samples))


def check_constants(constants, methods):
    need = {"C1", "alpha"}
    if "mc" in methods:
        need |= {"C2"}
    if "mlmc" in methods:
        need |= {"C3", "beta"}
    missing = sorted(need - set(constants))
    if missing:
        raise ConfigurationError(f"missing constants: {', '.join(missing)}")
    for k, v in constants.items():
        if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
            raise ConfigurationError(f"constant {k} must be a positive number, got {v!r}")


def run_complexity(spec, eps_list, methods, replicates, constants, seed=0, ref_level=None,
                   gauss_n=8, memory_guard=DEFAULT_MEMORY_GUARD, level_cap=LEVEL_CAP,
                   cache_dir=None, tol=DEFAULT_TOL, wall_time=True, reference=None):
    """Run every (method, eps, replicate) plan and measure its error.

    The reference control defaults to the Gauss-rule solve two levels above
    the finest feasible plan. Plans above ``level_cap`` or whose largest
    solve retains more than ``memory_guard`` values are recorded as
    infeasible and not run. ``wall_time=False`` writes 0 for the time so
    reports are byte-reproducible.
    """
    methods = [m for m in METHODS if m in set(methods)]
    if not methods or not eps_list or replicates < 1:
        raise ConfigurationError("need >= 1 method, eps and replicate")
    check_constants(constants, methods)
    plans = {}
    for method in methods:
        for eps in eps_list:
            try:
                plan = _plan(method, float(eps), constants, spec, level_cap)
            except BudgetError as exc:
                log.warning("%s eps=%g infeasible: %s", method, eps, exc)
                plan = None
            plans[(method, float(eps))] = plan
    feasible = {k: p for k, p in plans.items()
                if p is not None and retained_values(p) <= memory_guard}
    if reference is None:
        if not feasible:
            raise ConfigurationError("no feasible plan in the sweep")
        finest = max(p.level for p in feasible.values())
        ref_level = finest + 2 if ref_level is None else ref_level
        if ref_level < finest + 2:
            raise ConfigurationError(f"reference level {ref_level} must be >= {finest + 2}")
        reference = reference_control(spec, ref_level, gauss_n, cache_dir, tol)

    rows = []
    for (method, eps), plan in plans.items():
        for rep in range(replicates):
            if plan is None:
                rows.append(ComplexityRow(method, eps, -1, (), float("nan"), -1, float("nan"),
                                          seed, rep))
                continue
            if (method, eps) not in feasible:
                rows.append(ComplexityRow(method, eps, plan.level, plan.samples, float("nan"),
                                          plan.work, float("nan"), seed, rep))
                continue
            if method == "mc":
                res = single_level_control(spec, plan.level, plan.samples[0], seed, rep, tol=tol)
            else:
                res = multilevel_control(spec, plan, seed, rep, tol=tol)
            if res.work != plan.work:
                raise AssertionError("executed work differs from the model")
            err = control_distance(res.control, reference)
            rows.append(ComplexityRow(method, eps, plan.level, plan.samples, err, plan.work,
                                      res.time_s if wall_time else 0.0, seed, rep))
            log.info("%s eps=%g rep=%d L=%d error=%.3e work=%d", method, eps, rep, plan.level,
                     err, plan.work)
    rows.sort(key=ComplexityRow.sort_key)
    return rows


def render_report(rows):
    if not rows:
        raise ConfigurationError("a report needs at least one row")
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in sorted(rows, key=ComplexityRow.sort_key):
        w.writerow(row.csv_fields())
    return buf.getvalue()


def write_report(rows, path):
    """Write the rows as CSV (sorted by method, eps descending, replicate)."""
    text = render_report(rows)
    try:
        atomic_write_text(path, text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return Path(path)


def read_report(path):
    """Parse a report back into rows (the inverse of ``write_report``)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise FormatError(f"unexpected header {header}")
        rows = []
        for f in reader:
            samples = tuple(int(s) for s in f[3].split(";")) if f[3] else ()
            rows.append(ComplexityRow(f[0], float(f[1]), int(f[2]), samples, float(f[4]),
                                      int(f[5]), float(f[6]), int(f[7]), int(f[8])))
    return rows


# ------------------------------------------------------------- summaries


def rms_by_eps(rows, method):
    """``{eps: RMS error}`` over the feasible replicates of ``method``."""
    out = {}
    for eps in sorted({r.eps for r in rows if r.method == method}, reverse=True):
        errs = [r.error for r in rows if r.method == method and r.eps == eps and r.feasible]
        if errs:
            out[eps] = float(np.sqrt(np.mean(np.square(errs))))
    return out


def work_slope(rows, method):
    """Least-squares slope of log2(work) against log2(1/eps)."""
    pts = sorted({(r.eps, r.work) for r in rows if r.method == method and r.work > 0})
    if len(pts) < 2:
        raise ConfigurationError(f"need >= 2 tolerances for a {method} work slope")
    x = np.log2([1.0 / e for e, _ in pts])
    y = np.log2([w for _, w in pts])
    return float(np.polyfit(x, y, 1)[0])


def mean_time(rows, method, eps):
    t = [r.time_s for r in rows if r.method == method and r.eps == eps and r.feasible]
    return float(np.mean(t)) if t else float("nan")

