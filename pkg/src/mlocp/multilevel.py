"""Multilevel combination of sample-average optimal controls.

The multilevel Monte Carlo control of level ``L`` is

    u_L = P( (1/nu) sum_{l=0}^{L} Q_l[ p_l(u_{l,l}) - p_{l-1}(u_{l-1,l}) ] ),

where ``Q_l`` is a Monte Carlo rule with ``N_l`` nodes, ``u_{m,l}`` is the
optimal control on mesh ``m`` for the rule ``Q_l`` and ``p_{-1} = 0``. Every
level solves two sample-average problems (on meshes ``l-1`` and ``l``) with
the same nodes; the surplus means are prolonged to mesh ``L`` and summed.

Level and sample counts follow the a-priori complexity model with relative
mesh size ``h_l = 2^-l`` and ``dim V_l = 2^(d l)``.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetError, ConfigurationError, ConvergenceError
from .fem import NodalField, build_mesh, prolong
from .ocp import DEFAULT_TOL, SampleAverageProblem, solve_sao
from .stochastic import STREAM_MC, STREAM_MLMC, StreamKey, monte_carlo_rule

log = logging.getLogger(__name__)

LEVEL_CAP = 12


def _ceil(x):
    # absorb round-off so that exact integers are not bumped up by one
    return int(math.ceil(x - 1e-12 * max(1.0, abs(x))))


def select_level(eps, C1, alpha, cap=LEVEL_CAP):
    """Finest level ``L = ceil(log2(2 C1 / eps) / alpha)``.

    A tolerance already met on level 0 gives ``L = 0`` with a warning.
    Raises BudgetError above ``cap``.
    """
    if not (eps > 0 and C1 > 0 and alpha > 0):
        raise ConfigurationError("eps, C1 and alpha must be positive")
    L = _ceil(math.log2(2.0 * C1 / eps) / alpha)
    if L < 0:
        warnings.warn(f"eps={eps} is met on the coarsest level; using L=0", stacklevel=2)
        L = 0
    if L > cap:
        raise BudgetError(f"eps={eps} needs level {L}, above the cap {cap}")
    return L


def single_level_budget(eps, C2, eta=0.5):
    """Monte Carlo sample count ``N = ceil((2 C2 / eps)^(1/eta))``."""
    if not (eps > 0 and C2 > 0 and eta > 0):
        raise ConfigurationError("eps, C2 and eta must be positive")
    return max(1, _ceil((2.0 * C2 / eps) ** (1.0 / eta)))


def allocate_samples(eps, L, C3, beta, dim, eta=0.5):
    """Per-level sample counts minimizing work under the variance budget.

    Solves ``min sum_l dimV_l N_l`` subject to
    ``L C3^2 sum_l h_l^(2 beta) N_l^(-2 eta) <= eps^2 / 2`` and rounds up.
    ``L = 0`` uses the factor of ``L = 1`` so the single level still gets
    a variance budget.
    """
    if not (eps > 0 and C3 > 0 and beta > 0 and eta > 0) or L < 0:
        raise ConfigurationError("eps, C3, beta, eta must be positive and L >= 0")
    lv = np.arange(L + 1)
    h = 2.0 ** -lv
    dimv = 2.0 ** (dim * lv)
    p = 2.0 * eta + 1.0
    total = np.sum(h ** (2 * beta / p) * dimv ** (2 * eta / p))
    scale = (math.sqrt(2.0 * max(L, 1) * C3**2) / eps) ** (1.0 / eta)
    raw = scale * h ** (2 * beta / p) * dimv ** (-1.0 / p) * total ** (1.0 / (2 * eta))
    return [max(1, _ceil(x)) for x in raw]


def dof_count(dim, level, h_base=0.25):
    cells = int(round(1.0 / h_base)) * 2**level
    return (cells - 1) ** dim


@dataclass(frozen=True)
class LevelPlan:
    """Finest level and sample counts chosen for a tolerance.

    For ``method == "mc"`` ``samples`` has the single entry ``N``, used on
    level ``level``; for ``"mlmc"`` it lists ``N_0 .. N_L``.
    """

    method: str
    eps: float
    level: int
    samples: tuple
    dim: int
    h_base: float = 0.25
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("mc", "mlmc"):
            raise ConfigurationError(f"unknown method {self.method!r}")
        samples = tuple(int(n) for n in self.samples)
        expected = 1 if self.method == "mc" else self.level + 1
        if len(samples) != expected or min(samples) < 1:
            raise ConfigurationError(f"invalid sample counts {samples} for {self.method} "
                                     f"level {self.level}")
        object.__setattr__(self, "samples", samples)

    @property
    def work(self):
        return work_model(self)

    def variance_budget(self):
        """``L C3^2 sum_l h_l^(2 beta) N_l^(-2 eta)`` (MLMC plans)."""
        c = self.constants
        L = max(self.level, 1)
        h = 2.0 ** -np.arange(self.level + 1)
        N = np.asarray(self.samples, dtype=float)
        return L * c["C3"] ** 2 * float(np.sum(h ** (2 * c["beta"]) * N ** (-2 * c["eta"])))


def work_model(plan):
    """Modeled work with actual interior dof counts.

    Single level: ``dimV_L (2N + 1)``; multilevel: ``sum_l dimV_l (2 N_l + 1)``.
    """
    if plan.method == "mc":
        return dof_count(plan.dim, plan.level, plan.h_base) * (2 * plan.samples[0] + 1)
    return sum(dof_count(plan.dim, l, plan.h_base) * (2 * n + 1)
               for l, n in enumerate(plan.samples))


def mc_plan(eps, C1, alpha, C2, dim, eta=0.5, h_base=0.25, cap=LEVEL_CAP):
    L = select_level(eps, C1, alpha, cap)
    N = single_level_budget(eps, C2, eta)
    return LevelPlan("mc", eps, L, (N,), dim, h_base,
                     {"C1": C1, "alpha": alpha, "C2": C2, "eta": eta})


def mlmc_plan(eps, C1, alpha, C3, beta, dim, eta=0.5, h_base=0.25, cap=LEVEL_CAP):
    L = select_level(eps, C1, alpha, cap)
    N = allocate_samples(eps, L, C3, beta, dim, eta)
    return LevelPlan("mlmc", eps, L, tuple(N), dim, h_base,
                     {"C1": C1, "alpha": alpha, "C3": C3, "beta": beta, "eta": eta})


# ---------------------------------------------------------------- execution


@dataclass
class LevelRecord:
    level: int
    samples: int
    fine: object                 # SaoSolution on mesh ``level``
    coarse: object | None        # SaoSolution on mesh ``level - 1``


@dataclass
class MultilevelResult:
    """Combined control and per-level diagnostics."""

    control: object              # Control on the finest mesh
    combination: NodalField      # sum of prolonged surplus means
    surpluses: list              # NodalFields on the finest mesh, one per level
    levels: list                 # LevelRecord per level
    work: int
    time_s: float

    @property
    def mesh(self):
        return self.combination.mesh


@dataclass
class SingleLevelResult:
    solution: object
    work: int
    time_s: float

    @property
    def control(self):
        return self.solution.function


def _solve_tagged(mesh, rule, spec, warm, tol, level):
    try:
        return solve_sao(mesh, rule, spec, warm_start=warm, tol=tol,
                         problem=SampleAverageProblem(mesh, rule, spec))
    except ConvergenceError as exc:
        exc.context.setdefault("level", level)
        raise


def multilevel_control(spec, plan, seed, replicate=0, rules=None, coarse_rules=None,
                       tol=DEFAULT_TOL):
    """Run the multilevel estimator described by ``plan``.

    ``rules`` optionally replaces the Monte Carlo rule of every level (it
    must have ``plan.level + 1`` entries). ``coarse_rules`` gives a distinct
    rule for the mesh ``l-1`` solve of level ``l`` (entry 0 is ignored); by
    default both solves of a level share its rule.
    """
    if plan.method != "mlmc":
        raise ConfigurationError("multilevel_control needs an mlmc plan")
    L = plan.level
    if rules is None:
        rules = [monte_carlo_rule(n, StreamKey(seed, l, replicate, STREAM_MLMC))
                 for l, n in enumerate(plan.samples)]
    if len(rules) != L + 1:
        raise ConfigurationError(f"need {L + 1} rules, got {len(rules)}")
    meshes = [build_mesh(spec.dim, l, spec.h_base) for l in range(L + 1)]
    finest = meshes[-1]
    start = time.perf_counter()
    surpluses, records = [], []
    warm = None  # latest solution on mesh l-1
    for l, rule in enumerate(rules):
        coarse = None
        if l == 0:
            fine = _solve_tagged(meshes[0], rule, spec, None, tol, 0)
            diff = fine.adjoint_mean
        else:
            crule = rule if coarse_rules is None else coarse_rules[l]
            coarse = _solve_tagged(meshes[l - 1], crule, spec, warm, tol, l)
            fine = _solve_tagged(meshes[l], rule, spec, coarse.function, tol, l)
            diff = fine.adjoint_mean - prolong(coarse.adjoint_mean, meshes[l])
        surpluses.append(diff if diff.mesh is finest else prolong(diff, finest))
        records.append(LevelRecord(l, len(rule), fine, coarse))
        warm = fine.function
        log.info("level %d: %d samples, %d dofs, outer iterations %s", l, len(rule),
                 meshes[l].n_dofs, fine.iterations)
    acc = np.zeros(finest.n_dofs)
    for s in surpluses:  # fixed level order
        acc += s.values
    combination = NodalField(finest, acc)
    control = spec.control(NodalField(finest, acc / spec.nu))
    elapsed = time.perf_counter() - start
    work = sum(dof_count(spec.dim, l, spec.h_base) * (2 * len(r) + 1) for l, r in enumerate(rules))
    return MultilevelResult(control, combination, surpluses, records, work, elapsed)


def single_level_control(spec, L, N, seed, replicate=0, rule=None, tol=DEFAULT_TOL,
                         stream=STREAM_MC):
    """Sample-average solve on mesh ``L`` with an ``N``-node Monte Carlo rule."""
    if rule is None:
        rule = monte_carlo_rule(N, StreamKey(seed, L, replicate, stream))
    mesh = build_mesh(spec.dim, L, spec.h_base)
    start = time.perf_counter()
    sol = _solve_tagged(mesh, rule, spec, None, tol, L)
    elapsed = time.perf_counter() - start
    return SingleLevelResult(sol, mesh.n_dofs * (2 * len(rule) + 1), elapsed)
