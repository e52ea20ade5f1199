"""
Linear-quadratic optimal control with a random elliptic state equation.

For a mesh and a quadrature rule with nodes ``xi_j`` and weights ``w_j``
the sample-average problem is

    min_u  1/2 sum_j w_j ||y_j - y_d||^2 + nu/2 ||u||^2,   A(xi_j) y_j = b(u),

with distributed control and observation, ``b(u)_i = int u phi_i``. The
adjoint of sample ``j`` is ``A(xi_j) p_j = M (y_d - y_j)`` and the
optimality condition reads ``u = P(Q[p(u)] / nu)`` with ``P`` the
projection onto the box.

Writing ``q(u) = Q[p(u)] = r - K b(u)`` with

    r   = sum_j w_j A_j^{-1} M y_d,
    K b = sum_j w_j A_j^{-1} M A_j^{-1} b,

the unconstrained problem is ``(nu I + G) u = r`` with ``G = K M``. ``G``
is self-adjoint and nonnegative in the mass-matrix inner product and is
solved by CG in that inner product.

With box bounds the control is never given its own finite element space.
It is ``u = P(w)`` for the P1 function ``w = q/nu``. Two projections are
available:

* ``"pointwise"`` clamps the P1 function ``w`` pointwise. This is the
  variational discretization: ``u`` is not piecewise linear and kinks
  along the level lines ``w = a``, ``w = b``. Solved by semismooth Newton
  in ``w``.
* ``"nodal"`` clamps the nodal coefficients, so ``u`` stays in the P1 space.
  Solved by a primal-dual active-set iteration in ``u``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from .batch import SampleSolver
from .clamp import ClampedMoments, combination_norm
from .errors import ConfigurationError, ConvergenceError
from .fem import (NodalField, assemble_mass, assemble_stiffness, interpolate, l2_distance,
                  prolong, solve_spd)

BENCHMARK_BOUNDS = {1: (-1.0, 3.0), 2: (-5.0, 20.0)}
PROJECTIONS = ("pointwise", "nodal")

DEFAULT_TOL = 1e-8
INNER_TOL = 1e-10


def _benchmark_target(dim):
    if dim == 1:
        return lambda x: np.exp(2 * x) * np.sin(2 * np.pi * x)
    return lambda x, y: np.exp(2 * x + 2 * y) * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)


TARGETS = {
    "benchmark": _benchmark_target,
    "zero": lambda dim: (lambda *x: np.zeros_like(x[0])),
    "one": lambda dim: (lambda *x: np.ones_like(x[0])),
}


@dataclass(frozen=True)
class OcpSpec:
    """Problem instance.

    ``target`` is one of ``"benchmark"``, ``"zero"``, ``"one"`` or a callable
    ``f(x)`` / ``f(x, y)``. ``bounds`` is ``None`` (unconstrained) or
    ``(a, b)`` with ``a <= b``. ``projection`` selects how the box is
    applied (see the module docstring); it has no effect without bounds.
    """

    dim: int = 1
    nu: float = 1e-2
    target: object = "benchmark"
    bounds: tuple | None = None
    h_base: float = 0.25
    projection: str = "pointwise"

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {self.dim}")
        if not self.nu > 0:
            raise ConfigurationError(f"nu must be positive, got {self.nu}")
        if isinstance(self.target, str) and self.target not in TARGETS:
            raise ConfigurationError(f"unknown target {self.target!r}")
        if not (isinstance(self.target, str) or callable(self.target)):
            raise ConfigurationError("target must be a name or a callable")
        if self.projection not in PROJECTIONS:
            raise ConfigurationError(f"projection must be one of {PROJECTIONS}")
        if self.bounds is not None:
            a, b = map(float, self.bounds)
            if not a <= b:
                raise ConfigurationError(f"bounds need a <= b, got {self.bounds}")
            object.__setattr__(self, "bounds", (a, b))

    @classmethod
    def benchmark(cls, dim, constrained=False, **kw):
        return cls(dim=dim, bounds=BENCHMARK_BOUNDS[dim] if constrained else None, **kw)

    @property
    def constrained(self):
        return self.bounds is not None

    @property
    def pointwise(self):
        return self.bounds is not None and self.projection == "pointwise"

    def target_function(self):
        if callable(self.target):
            return self.target
        return TARGETS[self.target](self.dim)

    def target_field(self, mesh):
        return interpolate(mesh, self.target_function())

    def project(self, v):
        """Clamp coefficient values to the bounds (identity when unconstrained)."""
        if self.bounds is None:
            return v
        return np.clip(v, *self.bounds)

    def control(self, preimage):
        """The control ``P(preimage)`` for a P1 field ``preimage``."""
        return Control(preimage, self.bounds, self.pointwise)

    def digest(self):
        """Stable hash of the instance, or None for callable targets."""
        if callable(self.target):
            return None
        payload = {"dim": self.dim, "nu": repr(float(self.nu)), "target": self.target,
                   "bounds": None if self.bounds is None else [repr(b) for b in self.bounds],
                   "h_base": repr(float(self.h_base))}
        if self.bounds is not None:
            payload["projection"] = self.projection
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ controls


@dataclass(frozen=True, eq=False)
class Control:
    """A control ``u = P(preimage)``.

    ``P`` is the identity without bounds, a clamp of the nodal coefficients
    when ``pointwise`` is false, and the pointwise clamp of the P1 function
    otherwise.
    """

    preimage: NodalField
    bounds: tuple | None = None
    pointwise: bool = False

    @property
    def mesh(self):
        return self.preimage.mesh

    @property
    def nodal(self):
        """Nodal values ``u(x_i)``; the control itself unless ``pointwise``."""
        v = self.preimage.values
        return NodalField(self.mesh, v if self.bounds is None else np.clip(v, *self.bounds))

    def term(self, coefficient=1.0):
        if self.pointwise:
            return (coefficient, self.preimage, self.bounds)
        return (coefficient, self.nodal, None)

    def moments(self):
        return ClampedMoments(self.preimage, self.bounds) if self.pointwise else None

    def load(self):
        """Right-hand side ``int u phi_i`` of the state equation."""
        if self.pointwise:
            return self.moments().load
        return assemble_mass(self.mesh) @ self.nodal.values

    def sq_norm(self):
        if self.pointwise:
            return self.moments().sq_norm
        v = self.nodal.values
        return float(v @ (assemble_mass(self.mesh) @ v))

    def prolong(self, target):
        return Control(prolong(self.preimage, target), self.bounds, self.pointwise)


def as_control(u):
    """Wrap a NodalField as a P1 control; Controls pass through."""
    if isinstance(u, Control):
        return u
    return Control(u)


def control_norm_of(terms):
    """L2 norm of ``sum_i c_i u_i`` for ``terms = [(c_i, u_i)]`` of controls or fields."""
    parts = [as_control(u).term(c) for c, u in terms]
    if any(bnd is not None for _, _, bnd in parts):
        return combination_norm(parts)
    fine = max((f.mesh for _, f, _ in parts), key=lambda m: m.level)
    acc = np.zeros(fine.n_dofs)
    for c, f, _ in parts:
        acc += c * (f if f.mesh is fine else prolong(f, fine)).values
    return float(np.sqrt(max(acc @ (assemble_mass(fine) @ acc), 0.0)))


def control_distance(u, v):
    """``||u - v||_{L2}`` for controls (or NodalFields) on nested meshes."""
    u, v = as_control(u), as_control(v)
    if not (u.pointwise or v.pointwise):
        return l2_distance(u.nodal, v.nodal)
    return control_norm_of([(1.0, u), (-1.0, v)])


def control_norm(u):
    return control_norm_of([(1.0, u)])


# ------------------------------------------------- single-sample solves


def _load_of(mesh, u):
    if u.mesh is not mesh:
        raise ConfigurationError("control lives on a different mesh")
    if isinstance(u, Control):
        return u.load()
    return assemble_mass(mesh) @ u.values


def solve_state(mesh, xi, u, rel_tol=INNER_TOL):
    """State ``y`` with ``A(xi) y = b(u)`` (``b(u) = M u`` for P1 controls)."""
    A = assemble_stiffness(mesh, xi)
    return NodalField(mesh, solve_spd(A, _load_of(mesh, u), rel_tol))


def solve_adjoint(mesh, xi, y, spec, rel_tol=INNER_TOL):
    """Adjoint ``p`` with ``A(xi) p = M (y_d - y)``."""
    if y.mesh is not mesh:
        raise ConfigurationError("state lives on a different mesh")
    A = assemble_stiffness(mesh, xi)
    rhs = assemble_mass(mesh) @ (spec.target_field(mesh).values - y.values)
    return NodalField(mesh, solve_spd(A, rhs, rel_tol))


def adjoint_mean(mesh, rule, u, spec, rel_tol=INNER_TOL):
    """``Q[p(u)]`` by one state and one adjoint solve per rule node."""
    acc = np.zeros(mesh.n_dofs)
    for j, (w, xi) in enumerate(zip(rule.weights, rule.nodes)):
        try:
            p = solve_adjoint(mesh, xi, solve_state(mesh, xi, u, rel_tol), spec, rel_tol)
        except ConvergenceError as exc:
            exc.context["node"] = j
            raise
        acc += w * p.values
    return NodalField(mesh, acc)


# ---------------------------------------------------- reduced operator


class SampleAverageProblem:
    """Reduced operators of the sample-average problem on (mesh, rule)."""

    def __init__(self, mesh, rule, spec):
        if spec.dim != mesh.dim:
            raise ConfigurationError("spec and mesh dimensions differ")
        self.mesh, self.rule, self.spec = mesh, rule, spec
        self.M = assemble_mass(mesh)
        self.yd = spec.target_field(mesh).values
        self.solver = SampleSolver(mesh, rule.nodes)
        self.weights = rule.weights
        self.n_applies = 0
        self._r = None

    def mean(self, X):
        # rows are accumulated in node order
        return np.sum(self.weights[:, None] * X, axis=0)

    def inner(self, a, b):
        return float(a @ (self.M @ b))

    def norm(self, a):
        return float(np.sqrt(max(self.inner(a, a), 0.0)))

    def states(self, load):
        return self.solver.solve(load)

    def adjoints(self, load):
        Y = self.states(load)
        return self.solver.solve((self.M @ (self.yd[None, :] - Y).T).T)

    def adjoint_mean_load(self, load):
        """``Q[p]`` for the state right-hand side ``load``."""
        self.n_applies += 1
        return self.mean(self.adjoints(load))

    def adjoint_mean(self, u):
        return self.adjoint_mean_load(self.M @ u)

    @property
    def r(self):
        if self._r is None:
            self._r = self.mean(self.solver.solve(self.M @ self.yd))
        return self._r

    def apply_K(self, load):
        self.n_applies += 1
        Y = self.states(load)
        return self.mean(self.solver.solve((self.M @ Y.T).T))

    def apply_G(self, u):
        return self.apply_K(self.M @ u)

    def objective_load(self, load, sq_norm):
        Y = self.states(load) - self.yd[None, :]
        misfit = np.einsum("ji,ji->j", Y, (self.M @ Y.T).T)
        return 0.5 * float(self.weights @ misfit) + 0.5 * self.spec.nu * sq_norm

    def objective(self, u):
        u = as_control(u)
        return self.objective_load(u.load(), u.sq_norm())


@dataclass
class SaoSolution:
    """Minimizer of the sample-average problem and its diagnostics.

    ``control`` holds the nodal values of the optimal control; ``function``
    is the control itself (they differ only for pointwise projection).
    ``residual`` bounds ``||u - P(Q[p(u)]/nu)||_{L2}``.
    """

    control: NodalField
    adjoint_mean: NodalField
    rule: object
    iterations: int
    residual: float
    relative_residual: float
    applications: int
    active: np.ndarray | None = None
    history: list = field(default_factory=list)
    inner_iterations: int = 0
    function: Control | None = None

    def __post_init__(self):
        if self.function is None:
            self.function = Control(self.control)

    @property
    def mesh(self):
        return self.control.mesh


def _relative_residual(prob, u, q):
    spec = prob.spec
    scale = prob.norm(prob.r) / spec.nu
    res = prob.norm(u - spec.project(q / spec.nu))
    return res, (res / scale if scale > 0 else res)


def _cg(prob, x, tol, maxiter):
    """CG on (nu I + G) x = r in the mass inner product, from ``x``."""
    nu = prob.spec.nu
    b_norm = prob.norm(prob.r)
    res = prob.adjoint_mean(x) - nu * x
    p = res.copy()
    rr = prob.inner(res, res)
    it = 0
    while np.sqrt(rr) > tol * b_norm:
        if it >= maxiter:
            raise ConvergenceError(f"reduced CG did not converge in {maxiter} iterations",
                                   residual=np.sqrt(rr) / b_norm)
        Kp = nu * p + prob.apply_G(p)
        alpha = rr / prob.inner(p, Kp)
        x = x + alpha * p
        res = res - alpha * Kp
        rr_new = prob.inner(res, res)
        p = res + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return x, it


def _zero_solution(prob, rule):
    mesh, spec = prob.mesh, prob.spec
    x = np.zeros(mesh.n_dofs)
    q = prob.adjoint_mean(x)
    zero = NodalField(mesh, x)
    return SaoSolution(zero, NodalField(mesh, q), rule, 0, 0.0, 0.0, prob.n_applies,
                       function=spec.control(zero))


def solve_sao_unconstrained(mesh, rule, spec, warm_start=None, tol=DEFAULT_TOL, maxiter=500,
                            problem=None):
    """Solve the unconstrained sample-average problem.

    Stops when ``||nu u - Q[p(u)]||_M <= tol ||r||_M``. The returned adjoint
    mean is recomputed from the final control.
    """
    if spec.bounds is not None:
        raise ConfigurationError("spec has box bounds; use solve_sao_box")
    prob = problem or SampleAverageProblem(mesh, rule, spec)
    if prob.norm(prob.r) == 0.0:
        return _zero_solution(prob, rule)
    x = np.zeros(mesh.n_dofs) if warm_start is None else _on_mesh(warm_start, mesh)
    total = 0
    for _ in range(5):
        x, it = _cg(prob, x, tol, maxiter - total)
        total += it
        q = prob.adjoint_mean(x)
        res, rel = _relative_residual(prob, x, q)
        # recursive CG residual may drift from the true one; restart if so
        if prob.norm(spec.nu * x - q) <= tol * prob.norm(prob.r):
            break
    else:
        raise ConvergenceError("reduced CG restarts exhausted", residual=rel)
    return SaoSolution(NodalField(mesh, x), NodalField(mesh, q), rule, total, res, rel,
                       prob.n_applies)


def _on_mesh(u, mesh, preimage=False):
    """Coefficients of a warm start on ``mesh``.

    For a Control, ``preimage`` selects its P1 preimage instead of its nodal
    values.
    """
    if isinstance(u, Control):
        u = u.preimage if preimage else u.nodal
    if u.mesh is not mesh:
        u = prolong(u, mesh)
    return u.values.copy()


def _classify(q, spec):
    a, b = spec.bounds
    s = q / spec.nu
    state = np.zeros(len(q), dtype=np.int8)
    state[s >= b] = 1
    state[s <= a] = -1
    return state


def _inner_atol(prob, tol, fraction):
    # Euclidean target for inner residuals so that the mass-norm residual meets tol
    row_max = float(np.abs(prob.M).sum(axis=1).max())
    return fraction * tol * max(prob.norm(prob.r), 1e-300) / np.sqrt(row_max)


def _solve_box_nodal(prob, rule, warm_start, tol, max_outer):
    """Primal-dual active set on the nodal coefficients of ``u``."""
    mesh, spec = prob.mesh, prob.spec
    nu, (a, b) = spec.nu, spec.bounds
    n = mesh.n_dofs
    u = np.zeros(n) if warm_start is None else np.clip(_on_mesh(warm_start, mesh), a, b)
    q = prob.adjoint_mean(u)
    state = _classify(q, spec)
    inner_atol = _inner_atol(prob, tol, 0.05)
    history = [state.copy()]
    inner_total = 0
    rel = float("nan")
    for it in range(1, max_outer + 1):
        u = np.where(state > 0, b, np.where(state < 0, a, u))
        free = np.flatnonzero(state == 0)
        if len(free):
            fixed = np.where(state == 0, 0.0, u)
            rhs = prob.r[free] - prob.apply_G(fixed)[free]

            def matvec(z, free=free):
                v = np.zeros(n)
                v[free] = np.ravel(z)
                return nu * v[free] + prob.apply_G(v)[free]

            op = LinearOperator((len(free), len(free)), matvec=matvec, dtype=float)
            counter = [0]
            z, info = gmres(op, rhs, x0=u[free], rtol=1e-14, atol=inner_atol,
                            restart=min(len(free), 60), maxiter=20,
                            callback=lambda _: counter.__setitem__(0, counter[0] + 1),
                            callback_type="pr_norm")
            inner_total += counter[0]
            if info > 0:
                raise ConvergenceError("GMRES on the inactive set did not converge",
                                       residual=float("nan"), iteration=it)
            u[free] = z
        q = prob.adjoint_mean(u)
        new_state = _classify(q, spec)
        res, rel = _relative_residual(prob, u, q)
        history.append(new_state.copy())
        if np.array_equal(new_state, state) and rel <= tol:
            # preimage that clamps exactly to u
            pre = np.where(new_state != 0, q / nu, u)
            control = spec.control(NodalField(mesh, pre))
            return SaoSolution(control.nodal, NodalField(mesh, q), rule, it, res, rel,
                               prob.n_applies, active=new_state, history=history,
                               inner_iterations=inner_total, function=control)
        state = new_state
    raise ConvergenceError(f"active set did not settle in {max_outer} iterations",
                           residual=rel, previous=history[-2], last=history[-1])


def _solve_box_pointwise(prob, rule, warm_start, tol, max_outer):
    """Semismooth Newton for ``F(w) = nu w - Q[p(P(w))] = 0``.

    The generalized derivative is ``nu I + K M_I(w)`` where ``M_I`` is the
    mass matrix restricted to ``{a < w < b}``; each Newton system is solved
    by GMRES. A simple backtracking on ``||F||_M`` guards the first steps.
    """
    mesh, spec = prob.mesh, prob.spec
    nu, bounds = spec.nu, spec.bounds
    n = mesh.n_dofs
    r_norm = prob.norm(prob.r)
    w = np.zeros(n) if warm_start is None else _on_mesh(warm_start, mesh, preimage=True)
    inner_atol = _inner_atol(prob, tol, 0.05)

    def evaluate(w):
        cm = ClampedMoments(NodalField(mesh, w), bounds)
        q = prob.r - prob.apply_K(cm.load)
        F = nu * w - q
        return cm, q, F, prob.norm(F)

    cm, q, F, f_norm = evaluate(w)
    history = [_classify(nu * w, spec)]
    inner_total = 0
    for it in range(1, max_outer + 2):
        if f_norm <= tol * r_norm:
            control = spec.control(NodalField(mesh, w))
            res = f_norm / nu
            return SaoSolution(control.nodal, NodalField(mesh, q), rule, it - 1, res,
                               res / (r_norm / nu), prob.n_applies, active=history[-1],
                               history=history, inner_iterations=inner_total,
                               function=control)
        if it > max_outer:
            break
        J = cm.jacobian

        def matvec(z, J=J):
            z = np.ravel(z)
            return nu * z + prob.apply_K(J @ z)

        op = LinearOperator((n, n), matvec=matvec, dtype=float)
        counter = [0]
        step, info = gmres(op, -F, rtol=1e-14, atol=inner_atol, restart=min(n, 60), maxiter=20,
                           callback=lambda _: counter.__setitem__(0, counter[0] + 1),
                           callback_type="pr_norm")
        inner_total += counter[0]
        if info > 0:
            raise ConvergenceError("GMRES for the Newton step did not converge",
                                   residual=f_norm / r_norm, iteration=it)
        t = 1.0
        for _ in range(30):
            trial = evaluate(w + t * step)
            if trial[3] < f_norm or t < 1e-6:
                break
            t *= 0.5
        w = w + t * step
        cm, q, F, f_norm = trial
        history.append(_classify(nu * w, spec))
    raise ConvergenceError(f"semismooth Newton did not converge in {max_outer} iterations",
                           residual=f_norm / r_norm, previous=history[-2], last=history[-1])


def solve_sao_box(mesh, rule, spec, warm_start=None, tol=DEFAULT_TOL, max_outer=50,
                  problem=None):
    """Solve the box-constrained sample-average problem.

    With nodal projection: primal-dual active set. Nodes with
    ``Q[p]/nu <= a`` (resp. ``>= b``) are fixed at the bound and the
    remaining rows of ``(nu I + G) u = r`` are solved by GMRES (the inactive
    block of ``G`` is not symmetric). Converged when two consecutive active
    sets coincide and the relative optimality residual is below ``tol``.

    With pointwise projection: semismooth Newton on the preimage ``w``,
    converged when ``||nu w - Q[p(P(w))]||_M <= tol ||r||_M``.
    """
    if spec.bounds is None:
        raise ConfigurationError("spec has no box bounds; use solve_sao_unconstrained")
    prob = problem or SampleAverageProblem(mesh, rule, spec)
    if prob.norm(prob.r) == 0.0 and spec.bounds[0] <= 0.0 <= spec.bounds[1]:
        return _zero_solution(prob, rule)
    if spec.pointwise:
        return _solve_box_pointwise(prob, rule, warm_start, tol, max_outer)
    return _solve_box_nodal(prob, rule, warm_start, tol, max_outer)


def solve_sao(mesh, rule, spec, warm_start=None, tol=DEFAULT_TOL, problem=None):
    """Dispatch to the constrained or unconstrained solver."""
    if spec.bounds is None:
        return solve_sao_unconstrained(mesh, rule, spec, warm_start, tol, problem=problem)
    return solve_sao_box(mesh, rule, spec, warm_start, tol, problem=problem)


def optimality_residual(mesh, rule, u, spec):
    """``||u - P(Q[p(u)]/nu)||_{L2}`` with the per-node reference solves.

    ``u`` is a NodalField (a P1 control) or a Control.
    """
    q = adjoint_mean(mesh, rule, u, spec)
    target = spec.control(NodalField(mesh, q.values / spec.nu))
    if not spec.pointwise:
        target = Control(target.nodal)
    return control_distance(as_control(u), target)


def objective(mesh, rule, u, spec):
    """Sample-average cost ``1/2 Q[||y - y_d||^2] + nu/2 ||u||^2``."""
    return SampleAverageProblem(mesh, rule, spec).objective(u)
