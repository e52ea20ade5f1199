"""Dense, slow reference implementations used by the tests.

Nothing here reuses the package's solvers: reduced operators are built
column by column with dense linear algebra, box problems are solved by
plain projected-gradient or damped fixed-point loops, and clamped loads
are integrated by brute-force midpoint sums.
"""
import numpy as np

from mlocp.fem import assemble_mass, assemble_stiffness, build_mesh, interpolate, solve_spd


def dense_reduced(mesh, rule, spec):
    """Return ``(G, r, M)`` with ``G = sum_j w_j A_j^-1 M A_j^-1 M`` as a dense matrix."""
    M = assemble_mass(mesh).toarray()
    yd = spec.target_field(mesh).values
    n = mesh.n_dofs
    G = np.zeros((n, n))
    r = np.zeros(n)
    for w, xi in zip(rule.weights, rule.nodes):
        Ainv = np.linalg.inv(assemble_stiffness(mesh, xi).toarray())
        G += w * Ainv @ M @ Ainv @ M
        r += w * Ainv @ M @ yd
    return G, r, M


def dense_unconstrained(mesh, rule, spec):
    G, r, _ = dense_reduced(mesh, rule, spec)
    return np.linalg.solve(spec.nu * np.eye(mesh.n_dofs) + G, r)


def projected_gradient(mesh, rule, spec, iterations=100_000):
    """Nodal box problem ``u = clamp(q(u)/nu)`` by projected gradient steps."""
    G, r, _ = dense_reduced(mesh, rule, spec)
    nu, (a, b) = spec.nu, spec.bounds
    H = nu * np.eye(mesh.n_dofs) + G
    step = 1.0 / (nu + np.abs(np.linalg.eigvals(G)).max())
    u = np.zeros(mesh.n_dofs)
    for _ in range(iterations):
        nxt = np.clip(u - step * (H @ u - r), a, b)
        if np.max(np.abs(nxt - u)) < 1e-16:
            return nxt
        u = nxt
    return u


def brute_clamped_load(mesh, w_full, bounds, points=4000):
    """``int clamp(w) phi_i`` on a 1D mesh by composite midpoint sums."""
    assert mesh.dim == 1
    x = mesh.coords[:, 0]
    load = np.zeros(len(x))
    t = (np.arange(points) + 0.5) / points
    for i0, i1 in mesh.elements:
        h = x[i1] - x[i0]
        vals = np.clip(w_full[i0] * (1 - t) + w_full[i1] * t, *bounds)
        load[i0] += h * np.mean(vals * (1 - t))
        load[i1] += h * np.mean(vals * t)
    return load[mesh.interior]


def pointwise_fixed_point(mesh, rule, spec, iterations=100_000, stall=1e-15):
    """Pointwise-clamped box problem by damped fixed-point iteration on the preimage.

    Iterates ``w <- w - t (nu w - r + K load(clamp(w)))`` where ``K`` is the
    dense load-to-adjoint-mean map; stops when the update stalls.
    """
    G, r, M = dense_reduced(mesh, rule, spec)
    K = G @ np.linalg.inv(M)
    nu = spec.nu
    step = 1.0 / (nu + np.abs(np.linalg.eigvals(G)).max())
    w = np.zeros(mesh.n_dofs)
    full = np.zeros(len(mesh.coords))
    for _ in range(iterations):
        full[mesh.interior] = w
        F = nu * w - r + K @ brute_clamped_load(mesh, full, spec.bounds)
        nxt = w - step * F
        if np.max(np.abs(nxt - w)) < stall:
            return nxt
        w = nxt
    return w


def brute_l2_norm_1d(mesh, f, points=4000):
    """L2 norm of a vectorized function ``f(x)`` by midpoint sums per element."""
    x = mesh.coords[:, 0]
    t = (np.arange(points) + 0.5) / points
    total = 0.0
    for i0, i1 in mesh.elements:
        xs = x[i0] + (x[i1] - x[i0]) * t
        total += (x[i1] - x[i0]) * np.mean(f(xs) ** 2)
    return float(np.sqrt(total))


def l2_error_p1(mesh, values, exact):
    """Exact-enough L2 error of a P1 field against a smooth function (degree-4 rule)."""
    full = np.zeros(len(mesh.coords))
    full[mesh.interior] = values
    P = mesh.coords[mesh.elements]
    if mesh.dim == 1:
        g, w = np.polynomial.legendre.leggauss(5)
        t = (g + 1) / 2
        lam = np.column_stack([1 - t, t])
        w = w / 2
        meas = P[:, 1, 0] - P[:, 0, 0]
    else:
        # Dunavant degree-4 rule (6 points)
        a, b = 0.445948490915965, 0.091576213509771
        lam = np.array([[a, a, 1 - 2 * a], [a, 1 - 2 * a, a], [1 - 2 * a, a, a],
                        [b, b, 1 - 2 * b], [b, 1 - 2 * b, b], [1 - 2 * b, b, b]])
        w = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)
        e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
        meas = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    pts = np.einsum("qv,evd->eqd", lam, P)
    uh = np.einsum("qv,ev->eq", lam, full[mesh.elements])
    err = uh - exact(*np.moveaxis(pts, -1, 0))
    return float(np.sqrt(np.sum(meas[:, None] * w[None, :] * err**2)))


def manufactured_slope(dim, levels=(1, 2, 3, 4)):
    if dim == 1:
        exact = lambda x: np.sin(np.pi * x)
        force = lambda x: np.pi**2 * np.sin(np.pi * x)
    else:
        exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
        force = lambda x, y: 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)
    errs, hs = [], []
    for level in levels:
        mesh = build_mesh(dim, level)
        A = assemble_stiffness(mesh, np.zeros(3))
        rhs = assemble_mass(mesh) @ interpolate(mesh, force).values
        y = solve_spd(A, rhs, rel_tol=1e-12)
        errs.append(l2_error_p1(mesh, y, exact))
        hs.append(mesh.h)
    return float(np.polyfit(np.log2(hs), np.log2(errs), 1)[0]), errs
