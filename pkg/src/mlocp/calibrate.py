"""Empirical rates and constants of the discretization errors.

All fits are ordinary least squares of log2-error against a log2-scale
discretization parameter:

* spatial bias  ``||u_{l,inf} - u_ref|| ~ C1 h_l^alpha``, with ``h_l = 2^-l``;
* Monte Carlo   ``RMS ||u_{l,N} - u_{l,inf}|| ~ C2 N^-eta``;
* surplus       ``RMS D_l ~ C3_p h_l^beta N_l^-eta`` with ``N_l = n_base 4^l``,
  where ``D_l`` compares the exact-expectation surplus of adjoint means
  with its Monte Carlo estimate.

"Averaged over repetitions" is taken as the root-mean-square over
replicates. The reference expectation ("inf") is a tensor Gauss rule.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigurationError
from .fem import build_mesh, l2_norm, prolong
from .ocp import DEFAULT_TOL, control_distance, control_norm_of, solve_sao
from .stochastic import (STREAM_CALIBRATE_MC, STREAM_CALIBRATE_SURPLUS, STREAM_MIXED,
                         StreamKey, gauss_tensor_rule, monte_carlo_rule)

log = logging.getLogger(__name__)

RESIDUAL_WARNING = 0.5
GAUSS_N = 8


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(x, y)`` in log2 units.

    ``residual`` is the RMS deviation of the points from the line;
    ``warning`` is set when it exceeds ``RESIDUAL_WARNING``. ``values``
    carries the derived constants (e.g. ``alpha`` and ``C1``).
    """

    name: str
    x: tuple
    y: tuple
    slope: float
    intercept: float
    residual: float
    warning: bool
    values: dict = field(default_factory=dict)

    @classmethod
    def from_points(cls, name, x, y, **values):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if len(x) < 3 or len(x) != len(y):
            raise ConfigurationError(f"{name}: a rate fit needs >= 3 matching points")
        if not np.all(np.isfinite(y)):
            raise ConfigurationError(f"{name}: non-finite errors {y}")
        slope, intercept = _line(x, y)
        res = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
        warn = res > RESIDUAL_WARNING
        if warn:
            warnings.warn(f"{name}: poor log-log fit (residual {res:.3f})", stacklevel=3)
        return cls(name, tuple(x.tolist()), tuple(y.tolist()), slope, intercept, res, warn,
                   dict(values))

    def refit(self):
        return _line(np.asarray(self.x), np.asarray(self.y))

    def __getitem__(self, key):
        return self.values[key]


def _line(x, y):
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def _rms(values):
    return float(np.sqrt(np.mean(np.square(values))))


@lru_cache(maxsize=48)
def gauss_solution(spec, level, gauss_n=GAUSS_N, tol=DEFAULT_TOL):
    """Sample-average optimum with the tensor Gauss rule on mesh ``level``."""
    mesh = build_mesh(spec.dim, level, spec.h_base)
    return solve_sao(mesh, gauss_tensor_rule(gauss_n), spec, tol=tol)


def _solve(spec, level, rule, tol, warm=None):
    return solve_sao(build_mesh(spec.dim, level, spec.h_base), rule, spec, warm, tol)


# ------------------------------------------------------------------- fits


def fit_spatial_rate(spec, levels, reference_level=None, gauss_n=GAUSS_N, tol=DEFAULT_TOL):
    """Fit ``alpha`` and ``C1`` from the control error on a sequence of meshes.

    Every solve uses the same Gauss rule; the reference is that rule on
    mesh ``reference_level`` (default: two levels above the finest).
    """
    levels = list(levels)
    ref_level = max(levels) + 2 if reference_level is None else reference_level
    if ref_level < max(levels) + 2:
        raise ConfigurationError("reference mesh must be >= 2 levels above the fitted ones")
    ref = gauss_solution(spec, ref_level, gauss_n, tol).function
    errors = [control_distance(gauss_solution(spec, l, gauss_n, tol).function, ref)
              for l in levels]
    log.info("spatial errors %s", errors)
    x = [-float(l) for l in levels]  # log2 of the relative mesh size
    fit = RateFit.from_points("alpha", x, np.log2(errors))
    return RateFit.from_points("alpha", x, np.log2(errors), alpha=fit.slope,
                               C1=2.0 ** fit.intercept, errors=errors, levels=levels,
                               reference_level=ref_level)


def fit_mc_constant(spec, level, ks=range(2, 11), repetitions=20, seed=0, gauss_n=GAUSS_N,
                    tol=DEFAULT_TOL):
    """Fit the Monte Carlo rate and ``C2`` on the fixed mesh ``level``.

    Errors are measured against the Gauss-rule optimum on the same mesh, so
    only the sampling error enters.
    """
    ks = list(ks)
    ref = gauss_solution(spec, level, gauss_n, tol)
    rms = []
    for k in ks:
        errs = []
        for rep in range(repetitions):
            rule = monte_carlo_rule(2**k, StreamKey(seed, k, rep, STREAM_CALIBRATE_MC))
            sol = _solve(spec, level, rule, tol, ref.function)
            errs.append(control_distance(sol.function, ref.function))
        rms.append(_rms(errs))
    fit = RateFit.from_points("C2", ks, np.log2(rms))
    return RateFit.from_points("C2", ks, np.log2(rms), eta=-fit.slope, C2=2.0 ** fit.intercept,
                               errors=rms, level=level, repetitions=repetitions)


def surplus_samples(level, n_base=4):
    return n_base * 4**level


def fit_surplus_rate(spec, levels, repetitions=10, n_base=4, seed=0, gauss_n=GAUSS_N,
                     tol=DEFAULT_TOL, eta=0.5, gauss_collapse=False):
    """Fit the decay of ``D_l`` and derive ``beta`` and ``C3``.

    ``D_l = || E[p_l - p_{l-1}] - Q_l[p_l(u_{l,l}) - p_{l-1}(u_{l-1,l})] ||``,
    the expectation taken with the Gauss rule at the Gauss optima and
    ``Q_l`` a Monte Carlo rule with ``n_base 4^l`` nodes at the Monte Carlo
    optima. With ``N_l`` proportional to ``4^l`` the slope is
    ``-(beta + 2 eta)``. ``C3`` is in control units (divided by ``nu``),
    as used by the sample allocation; ``C3_adjoint`` is the raw constant.

    ``gauss_collapse`` replaces the Monte Carlo rule by the Gauss rule, in
    which case ``D_l`` only measures solver error.
    """
    levels = list(levels)
    if min(levels) < 1:
        raise ConfigurationError("surplus levels start at 1")
    rms = []
    for l in levels:
        fine_mesh = build_mesh(spec.dim, l, spec.h_base)
        exact = (gauss_solution(spec, l, gauss_n, tol).adjoint_mean
                 - prolong(gauss_solution(spec, l - 1, gauss_n, tol).adjoint_mean, fine_mesh))
        reps = 1 if gauss_collapse else repetitions
        vals = []
        for rep in range(reps):
            if gauss_collapse:
                rule = gauss_tensor_rule(gauss_n)
            else:
                rule = monte_carlo_rule(surplus_samples(l, n_base),
                                        StreamKey(seed, l, rep, STREAM_CALIBRATE_SURPLUS))
            coarse = _solve(spec, l - 1, rule, tol)
            fine = _solve(spec, l, rule, tol, coarse.function)
            est = fine.adjoint_mean - prolong(coarse.adjoint_mean, fine_mesh)
            vals.append(l2_norm(exact - est))
        rms.append(_rms(vals))
    log.info("surplus D_l %s", rms)
    if gauss_collapse:
        return rms
    fit = RateFit.from_points("beta", levels, np.log2(rms))
    c3_adjoint = 2.0 ** fit.intercept * n_base**eta
    return RateFit.from_points("beta", levels, np.log2(rms), beta=-fit.slope - 2 * eta,
                               rate=fit.slope, C3_adjoint=c3_adjoint, C3=c3_adjoint / spec.nu,
                               errors=rms, n_base=n_base, repetitions=repetitions)


@dataclass
class MixedDecayTable:
    """RMS ``||u* - u_{l,inf} - u_{inf,k} + u_{l,k}||`` over replicates."""

    levels: list
    ks: list
    rms: dict  # (l, k) -> value
    reference_level: int

    def spatial_fit(self, k):
        lv = [l for l in self.levels if self.rms[(l, k)] > 0]
        return RateFit.from_points(f"mixed_k{k}", [-float(l) for l in lv],
                                   np.log2([self.rms[(l, k)] for l in lv]))


def mixed_decay_probe(spec, levels, ks, repetitions=10, reference_level=None, seed=0,
                      gauss_n=GAUSS_N, tol=DEFAULT_TOL):
    """Tabulate the mixed difference of controls on an (l, k) grid.

    ``u*`` is the Gauss optimum on the reference mesh, ``u_{l,inf}`` the
    Gauss optimum on mesh ``l``, ``u_{inf,k}`` the optimum for a Monte Carlo
    rule with ``2^k`` nodes on the reference mesh and ``u_{l,k}`` the one
    for the same rule on mesh ``l``.
    """
    levels, ks = list(levels), list(ks)
    ref_level = max(levels) + 2 if reference_level is None else reference_level
    star = gauss_solution(spec, ref_level, gauss_n, tol).function
    rms = {}
    for k in ks:
        per = {l: [] for l in levels}
        for rep in range(repetitions):
            rule = monte_carlo_rule(2**k, StreamKey(seed, k, rep, STREAM_MIXED))
            u_inf_k = _solve(spec, ref_level, rule, tol, star).function
            for l in levels:
                u_l_inf = gauss_solution(spec, l, gauss_n, tol).function
                u_l_k = _solve(spec, l, rule, tol, u_l_inf).function
                per[l].append(control_norm_of([(1.0, star), (-1.0, u_l_inf),
                                               (-1.0, u_inf_k), (1.0, u_l_k)]))
        for l in levels:
            rms[(l, k)] = _rms(per[l])
    return MixedDecayTable(levels, ks, rms, ref_level)
