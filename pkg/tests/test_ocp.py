import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_reduced, dense_unconstrained, pointwise_fixed_point, projected_gradient

from mlocp.errors import ConfigurationError
from mlocp.fem import NodalField, assemble_mass, assemble_stiffness, build_mesh, l2_norm, zeros
from mlocp.fem import solve_spd
from mlocp.ocp import (Control, OcpSpec, SampleAverageProblem, adjoint_mean, control_distance,
                       objective, optimality_residual, solve_adjoint, solve_sao,
                       solve_sao_box, solve_sao_unconstrained, solve_state)
from mlocp.stochastic import StreamKey, custom_rule, gauss_tensor_rule, monte_carlo_rule

TINY = build_mesh(1, 1)           # h = 1/8, 7 dofs
TINY_RULE = monte_carlo_rule(3, StreamKey(2024))
UNC = OcpSpec.benchmark(1)
BOX = OcpSpec.benchmark(1, constrained=True)
BOX_NODAL = OcpSpec.benchmark(1, constrained=True, projection="nodal")


def _field(mesh, values):
    return NodalField(mesh, np.asarray(values, dtype=float))


# ------------------------------------------------------------- spec


def test_spec_defaults_and_validation():
    assert UNC.nu == 1e-2 and UNC.bounds is None
    assert BOX.bounds == (-1.0, 3.0)
    assert OcpSpec.benchmark(2, constrained=True).bounds == (-5.0, 20.0)
    for bad in [dict(nu=0.0), dict(bounds=(3, -1)), dict(dim=3), dict(target="nope"),
                dict(projection="other")]:
        with pytest.raises(ConfigurationError):
            OcpSpec(**bad)


def test_spec_digest_is_stable_and_discriminating():
    assert UNC.digest() == OcpSpec.benchmark(1).digest()
    assert len({UNC.digest(), BOX.digest(), BOX_NODAL.digest(), OcpSpec.benchmark(2).digest()}) == 4
    assert OcpSpec(target=lambda x: x).digest() is None


def test_benchmark_targets():
    mesh = build_mesh(1, 2)
    x = mesh.dof_coords[:, 0]
    np.testing.assert_allclose(UNC.target_field(mesh).values, np.exp(2 * x) * np.sin(2 * np.pi * x))
    m2 = build_mesh(2, 0)
    x, y = m2.dof_coords.T
    expected = np.exp(2 * x + 2 * y) * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
    np.testing.assert_allclose(OcpSpec.benchmark(2).target_field(m2).values, expected)


# ---------------------------------------------------- state and adjoint


def test_state_of_zero_control():
    assert np.all(solve_state(TINY, np.zeros(3), zeros(TINY)).values == 0)


def test_state_of_unit_control_approaches_parabola():
    # the P1 field with interior values 1 differs from 1 only next to the boundary
    errs = []
    for level in (2, 3, 4):
        mesh = build_mesh(1, level)
        y = solve_state(mesh, np.zeros(3), _field(mesh, np.ones(mesh.n_dofs)))
        x = mesh.dof_coords[:, 0]
        errs.append(np.max(np.abs(y.values - x * (1 - x) / 2)))
    assert errs[-1] < 1e-3 and errs[0] / errs[-1] > 3.5


def test_state_and_adjoint_nodally_exact_for_exact_load():
    mesh = build_mesh(1, 3)
    A = assemble_stiffness(mesh, np.zeros(3))
    x = mesh.dof_coords[:, 0]
    y = solve_spd(A, np.full(mesh.n_dofs, mesh.h), rel_tol=1e-13)
    np.testing.assert_allclose(y, x * (1 - x) / 2, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_state_linearity(seed):
    rng = np.random.default_rng(seed)
    xi = rng.uniform(-1, 1, 3)
    u1, u2 = (_field(TINY, rng.standard_normal(7)) for _ in range(2))
    lhs = solve_state(TINY, xi, u1 + u2).values
    rhs = solve_state(TINY, xi, u1).values + solve_state(TINY, xi, u2).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_adjoint_vanishes_at_target():
    mesh = build_mesh(1, 2)
    y = UNC.target_field(mesh)
    assert np.all(solve_adjoint(mesh, np.array([0.2, -0.5, 0.9]), y, UNC).values == 0)


def test_adjoint_with_unit_target_matches_state_of_unit_control():
    mesh = build_mesh(1, 3)
    spec = OcpSpec(target="one")
    p = solve_adjoint(mesh, np.zeros(3), zeros(mesh), spec)
    y = solve_state(mesh, np.zeros(3), _field(mesh, np.ones(mesh.n_dofs)))
    np.testing.assert_allclose(p.values, y.values, atol=1e-12)


def test_adjoint_affine_in_state():
    rng = np.random.default_rng(3)
    xi = rng.uniform(-1, 1, 3)
    y1, y2 = (_field(TINY, rng.standard_normal(7)) for _ in range(2))
    dp = solve_adjoint(TINY, xi, y1, UNC).values - solve_adjoint(TINY, xi, y2, UNC).values
    A = assemble_stiffness(TINY, xi)
    M = assemble_mass(TINY)
    np.testing.assert_allclose(A @ dp, -M @ (y1.values - y2.values), atol=1e-9)


def test_adjoint_mean_single_node_is_deterministic_adjoint():
    rule = gauss_tensor_rule(1)
    q = adjoint_mean(TINY, rule, zeros(TINY), UNC)
    p = solve_adjoint(TINY, np.zeros(3), zeros(TINY), UNC)
    np.testing.assert_allclose(q.values, p.values, rtol=1e-14)


def test_adjoint_mean_zero_target_zero_control():
    q = adjoint_mean(TINY, TINY_RULE, zeros(TINY), OcpSpec(target="zero"))
    assert np.all(q.values == 0)


def test_adjoint_mean_duplicate_nodes():
    xi = np.array([0.3, -0.1, 0.7])
    u = _field(TINY, np.linspace(0, 1, 7))
    single = adjoint_mean(TINY, custom_rule([xi], [1.0]), u, UNC)
    double = adjoint_mean(TINY, custom_rule([xi, xi], [0.5, 0.5]), u, UNC)
    np.testing.assert_allclose(double.values, single.values, rtol=1e-13)


def test_batched_operators_match_reference_path():
    prob = SampleAverageProblem(TINY, TINY_RULE, UNC)
    u = np.linspace(-1, 2, 7)
    ref = adjoint_mean(TINY, TINY_RULE, _field(TINY, u), UNC).values
    np.testing.assert_allclose(prob.adjoint_mean(u), ref, atol=1e-12)


# ----------------------------------------------------- reduced operator


def test_reduced_operator_self_adjoint_and_positive():
    prob = SampleAverageProblem(TINY, TINY_RULE, UNC)
    rng = np.random.default_rng(5)
    for _ in range(20):
        v, w = rng.standard_normal(7), rng.standard_normal(7)
        a, b = prob.inner(prob.apply_G(v), w), prob.inner(v, prob.apply_G(w))
        assert abs(a - b) <= 1e-9 * max(abs(a), abs(b))
        assert prob.inner(prob.apply_G(v), v) >= 0


def test_reduced_operator_matches_dense():
    G, r, _ = dense_reduced(TINY, TINY_RULE, UNC)
    prob = SampleAverageProblem(TINY, TINY_RULE, UNC)
    np.testing.assert_allclose(prob.r, r, atol=1e-12)
    for k in range(7):
        np.testing.assert_allclose(prob.apply_G(np.eye(7)[k]), G[:, k], atol=1e-12)


# ------------------------------------------------------ unconstrained


def test_unconstrained_zero_target():
    sol = solve_sao_unconstrained(TINY, TINY_RULE, OcpSpec(target="zero"))
    assert np.all(sol.control.values == 0)


def test_unconstrained_matches_dense_oracle():
    # the stopping rule is relative to ||r||; an absolute 1e-8 match needs a tighter tol
    sol = solve_sao_unconstrained(TINY, TINY_RULE, UNC, tol=1e-10)
    ref = dense_unconstrained(TINY, TINY_RULE, UNC)
    assert l2_norm(sol.control - _field(TINY, ref)) <= 1e-8
    assert sol.relative_residual <= 1e-10
    default = solve_sao_unconstrained(TINY, TINY_RULE, UNC)
    assert default.relative_residual <= 1e-8
    assert l2_norm(default.control - _field(TINY, ref)) <= 1e-8 * l2_norm(default.control)


@pytest.mark.parametrize("level,nodes", [(0, 1), (1, 4), (2, 2), (3, 4)])
def test_unconstrained_matches_dense_on_small_instances(level, nodes):
    mesh = build_mesh(1, level)  # up to 31 dofs
    rule = monte_carlo_rule(nodes, StreamKey(level, nodes))
    sol = solve_sao_unconstrained(mesh, rule, UNC, tol=1e-11)
    ref = dense_unconstrained(mesh, rule, UNC)
    assert l2_norm(sol.control - _field(mesh, ref)) <= 1e-8


def test_regularization_shrinks_control():
    small = dense_unconstrained(TINY, TINY_RULE, UNC)
    large = dense_unconstrained(TINY, TINY_RULE, OcpSpec.benchmark(1, nu=0.1))
    sol = solve_sao_unconstrained(TINY, TINY_RULE, OcpSpec.benchmark(1, nu=0.1))
    M = assemble_mass(TINY)
    assert np.sqrt(large @ M @ large) < np.sqrt(small @ M @ small)
    assert np.isclose(l2_norm(sol.control), np.sqrt(large @ M @ large), rtol=1e-7)


def test_unconstrained_rejects_bounds():
    with pytest.raises(ConfigurationError):
        solve_sao_unconstrained(TINY, TINY_RULE, BOX)
    with pytest.raises(ConfigurationError):
        solve_sao_box(TINY, TINY_RULE, UNC)


def test_warm_start_consistency():
    mesh = build_mesh(1, 3)
    rule = monte_carlo_rule(16, StreamKey(9))
    for spec in (UNC, BOX, BOX_NODAL):
        cold = solve_sao(mesh, rule, spec)
        coarse = solve_sao(build_mesh(1, 2), rule, spec)
        warm = solve_sao(mesh, rule, spec, warm_start=coarse.function)
        scale = l2_norm(cold.control)
        assert control_distance(cold.function, warm.function) <= 10 * 1e-8 * scale
        assert warm.applications <= cold.applications


def test_objective_descent():
    for spec in (UNC, BOX, BOX_NODAL):
        sol = solve_sao(TINY, TINY_RULE, spec)
        assert objective(TINY, TINY_RULE, sol.function, spec) <= objective(
            TINY, TINY_RULE, zeros(TINY), spec)


# ----------------------------------------------------------------- box


@pytest.mark.parametrize("projection", ["pointwise", "nodal"])
def test_wide_bounds_match_unconstrained(projection):
    spec = OcpSpec(dim=1, bounds=(-1e6, 1e6), projection=projection)
    box = solve_sao_box(TINY, TINY_RULE, spec, tol=1e-10)
    free = solve_sao_unconstrained(TINY, TINY_RULE, UNC, tol=1e-10)
    assert control_distance(box.function, free.function) <= 1e-8


@pytest.mark.parametrize("projection", ["pointwise", "nodal"])
def test_degenerate_box_gives_zero(projection):
    spec = OcpSpec(dim=1, bounds=(0.0, 0.0), projection=projection)
    sol = solve_sao_box(TINY, TINY_RULE, spec)
    assert np.all(sol.control.values == 0)
    assert control_distance(sol.function, zeros(TINY)) == 0


def test_benchmark_bounds_are_active_on_tiny_instance():
    free = dense_unconstrained(TINY, TINY_RULE, UNC)
    assert free.max() > 3 or free.min() < -1


def test_nodal_box_matches_projected_gradient():
    sol = solve_sao_box(TINY, TINY_RULE, BOX_NODAL)
    ref = projected_gradient(TINY, TINY_RULE, BOX_NODAL)
    assert l2_norm(sol.control - _field(TINY, ref)) <= 1e-6


def test_pointwise_box_matches_fixed_point_oracle():
    sol = solve_sao_box(TINY, TINY_RULE, BOX)
    ref = pointwise_fixed_point(TINY, TINY_RULE, BOX)
    ref_control = BOX.control(_field(TINY, ref))
    assert control_distance(sol.function, ref_control) <= 1e-6


@pytest.mark.parametrize("spec", [BOX, BOX_NODAL], ids=["pointwise", "nodal"])
def test_box_feasibility_and_complementarity(spec):
    sol = solve_sao_box(TINY, TINY_RULE, spec)
    a, b = spec.bounds
    u = sol.control.values
    assert np.all(u >= a) and np.all(u <= b)
    q = sol.adjoint_mean.values
    free = (u > a) & (u < b)
    assert free.any()
    assert np.max(np.abs(spec.nu * u[free] - q[free])) <= 1e-8


def test_nodal_box_reports_active_sets():
    sol = solve_sao_box(TINY, TINY_RULE, BOX_NODAL)
    assert sol.active is not None and np.any(sol.active != 0)
    u = sol.control.values
    np.testing.assert_array_equal(u[sol.active > 0], 3.0)
    np.testing.assert_array_equal(u[sol.active < 0], -1.0)


def test_pointwise_control_is_not_nodal_clamp_of_p1():
    # the two projections give different optimal controls on a coarse mesh
    pw = solve_sao_box(TINY, TINY_RULE, BOX)
    nd = solve_sao_box(TINY, TINY_RULE, BOX_NODAL)
    assert control_distance(pw.function, nd.function) > 1e-6
    assert isinstance(pw.function, Control) and pw.function.pointwise


# -------------------------------------------------- optimality residual


@pytest.mark.parametrize("spec", [UNC, BOX, BOX_NODAL], ids=["free", "pointwise", "nodal"])
def test_solver_output_has_small_residual(spec):
    sol = solve_sao(TINY, TINY_RULE, spec)
    prob = SampleAverageProblem(TINY, TINY_RULE, spec)
    scale = prob.norm(prob.r) / spec.nu
    assert optimality_residual(TINY, TINY_RULE, sol.function, spec) <= 1e-8 * scale * 1.01


def test_residual_zero_problem():
    spec = OcpSpec(target="zero")
    assert optimality_residual(TINY, TINY_RULE, zeros(TINY), spec) == 0


def test_residual_linear_in_perturbation():
    sol = solve_sao_unconstrained(TINY, TINY_RULE, UNC, tol=1e-12)
    d = _field(TINY, np.random.default_rng(8).standard_normal(7))
    res = [optimality_residual(TINY, TINY_RULE, sol.control + d * delta, UNC)
           for delta in (1e-4, 2e-4, 4e-4)]
    np.testing.assert_allclose(np.array(res[1:]) / res[:-1], 2.0, rtol=1e-3)
