"""
Dyadic P1 finite elements on the unit interval and the unit square.

Meshes are uniform: level ``l`` has ``cells = base_cells * 2**l`` cells per
direction. In 2D every grid square is split along its lower-left to
upper-right diagonal, which keeps the hierarchy nested under dyadic
refinement. Only interior (homogeneous Dirichlet) dofs are stored.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, ConvergenceError
from .stochastic import SIGMA2, psi_functions


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform triangulation of (0,1)^d.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    level : int
        Refinement level relative to the base mesh.
    base_cells : int
        Cells per direction on level 0, i.e. ``1/h_base``.
    coords : ndarray, shape (n_nodes, dim)
        All node coordinates, boundary included.
    elements : ndarray, shape (n_elements, dim + 1)
        Vertex indices into ``coords``.
    interior : ndarray, shape (n_dofs,)
        Node indices of the interior dofs, in dof order.
    """

    dim: int
    level: int
    base_cells: int
    coords: np.ndarray
    elements: np.ndarray
    interior: np.ndarray

    @property
    def cells(self):
        return self.base_cells * 2**self.level

    @property
    def h(self):
        return 1.0 / self.cells

    @property
    def h_base(self):
        return 1.0 / self.base_cells

    @property
    def n_dofs(self):
        return len(self.interior)

    @property
    def parent_level(self):
        return self.level - 1 if self.level > 0 else None

    @property
    def dof_coords(self):
        return self.coords[self.interior]

    def same_hierarchy(self, other):
        return self.dim == other.dim and self.base_cells == other.base_cells

    def __repr__(self):
        return f"Mesh(dim={self.dim}, level={self.level}, h=1/{self.cells}, n_dofs={self.n_dofs})"


def base_cells_from_h(h_base):
    """Validate ``h_base`` and return ``1/h_base`` as an int."""
    if h_base <= 0:
        raise ConfigurationError(f"h_base must be positive, got {h_base}")
    inv = 1.0 / h_base
    n = int(round(inv))
    if abs(inv - n) > 1e-9 * n or n < 4 or n & (n - 1):
        raise ConfigurationError(f"1/h_base must be a power of two >= 4, got {inv}")
    return n


def build_mesh(dim, level, h_base=0.25):
    """Uniform mesh of size ``h_base * 2**-level`` on (0,1)^dim."""
    if dim not in (1, 2):
        raise ConfigurationError(f"dimension must be 1 or 2, got {dim}")
    if int(level) != level or level < 0:
        raise ConfigurationError(f"level must be a nonnegative integer, got {level}")
    return _build_mesh(int(dim), int(level), base_cells_from_h(h_base))


@lru_cache(maxsize=64)
def _build_mesh(dim, level, base_cells):
    n = base_cells * 2**level
    t = np.arange(n + 1) / n
    if dim == 1:
        coords = t[:, None]
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        interior = np.arange(1, n)
    else:
        X, Y = np.meshgrid(t, t, indexing="xy")
        coords = np.column_stack([X.ravel(), Y.ravel()])
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
        v00 = (j * (n + 1) + i).ravel()
        v10, v01 = v00 + 1, v00 + n + 1
        v11 = v01 + 1
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        elements = np.empty((2 * n * n, 3), dtype=np.int64)
        elements[0::2], elements[1::2] = lower, upper
        ii, jj = np.meshgrid(np.arange(1, n), np.arange(1, n), indexing="xy")
        interior = (jj * (n + 1) + ii).ravel()
    for a in (coords, elements, interior):
        a.setflags(write=False)
    return Mesh(dim, level, base_cells, coords, elements, interior)


@dataclass(frozen=True, eq=False)
class NodalField:
    """P1 function on ``mesh`` given by its interior nodal values."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.mesh.n_dofs,):
            raise ConfigurationError(
                f"field has shape {values.shape}, mesh has {self.mesh.n_dofs} dofs")
        object.__setattr__(self, "values", values)

    def _check(self, other):
        if other.mesh is not self.mesh:
            raise ConfigurationError("fields live on different meshes; prolong first")

    def __add__(self, other):
        self._check(other)
        return NodalField(self.mesh, self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return NodalField(self.mesh, self.values - other.values)

    def __mul__(self, c):
        return NodalField(self.mesh, c * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return NodalField(self.mesh, -self.values)


def zeros(mesh):
    return NodalField(mesh, np.zeros(mesh.n_dofs))


def interpolate(mesh, f):
    """Nodal interpolant of ``f(x)`` (1D) or ``f(x, y)`` (2D)."""
    xy = mesh.dof_coords
    return NodalField(mesh, np.broadcast_to(f(*xy.T), (mesh.n_dofs,)).astype(float))


# ---------------------------------------------------------------- assembly


@dataclass(frozen=True, eq=False)
class _Pattern:
    indptr: np.ndarray
    indices: np.ndarray
    stiff: sp.csr_matrix  # (nnz, n_elements): CSR data as a function of kappa per element
    mass_data: np.ndarray
    barycenters: np.ndarray


def _local_matrices(mesh):
    """Element stiffness (kappa = 1) and mass matrices, shape (n_el, k, k)."""
    P = mesh.coords[mesh.elements]
    if mesh.dim == 1:
        h = (P[:, 1, 0] - P[:, 0, 0])[:, None, None]
        K = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
        Mloc = np.array([[2.0, 1.0], [1.0, 2.0]]) * h / 6.0
        return K, Mloc
    x, y = P[..., 0], P[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * np.abs(b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    K = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area[:, None, None])
    Mloc = (np.ones((3, 3)) + np.eye(3)) * (area / 12.0)[:, None, None]
    return K, Mloc


@lru_cache(maxsize=64)
def _pattern(mesh):
    n_el, k = mesh.elements.shape
    dof_of = np.full(len(mesh.coords), -1)
    dof_of[mesh.interior] = np.arange(mesh.n_dofs)
    K, Mloc = _local_matrices(mesh)
    rows = np.repeat(dof_of[mesh.elements], k, axis=1).ravel()
    cols = np.tile(dof_of[mesh.elements], (1, k)).ravel()
    elem = np.repeat(np.arange(n_el), k * k)
    keep = (rows >= 0) & (cols >= 0)
    rows, cols, elem = rows[keep], cols[keep], elem[keep]
    kvals, mvals = K.reshape(-1)[keep], Mloc.reshape(-1)[keep]

    n = mesh.n_dofs
    keys, pos = np.unique(rows * n + cols, return_inverse=True)
    urows, indices = np.divmod(keys, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, urows + 1, 1)
    indptr = np.cumsum(indptr)
    stiff = sp.csr_matrix((kvals, (pos, elem)), shape=(len(keys), n_el))
    stiff.sum_duplicates()
    stiff.sort_indices()
    mass = sp.csr_matrix((mvals, (pos, elem)), shape=(len(keys), n_el))
    mass.sum_duplicates()
    mass.sort_indices()
    mass_data = mass @ np.ones(n_el)
    bary = mesh.coords[mesh.elements].mean(axis=1)
    return _Pattern(indptr, indices.astype(np.int64), stiff, mass_data, bary)


def _symmetrize(A):
    A = (A + A.T).tocsr()
    A.data *= 0.5
    A.sort_indices()
    return A


def element_kappa(mesh, xis):
    """Coefficient at element barycenters, shape (n_elements, n_samples)."""
    xis = np.atleast_2d(np.asarray(xis, dtype=float))
    Psi = psi_functions(_pattern(mesh).barycenters, mesh.dim)
    return np.exp(SIGMA2 * (Psi @ xis.T))


def stiffness_data(mesh, xis):
    """CSR data arrays of the stiffness matrices for several samples.

    Returns an array of shape (n_samples, nnz) sharing the sparsity pattern
    ``_pattern(mesh)``.
    """
    pat = _pattern(mesh)
    return np.ascontiguousarray((pat.stiff @ element_kappa(mesh, xis)).T)


def assemble_stiffness(mesh, xi):
    """Stiffness matrix of the kappa(., xi)-weighted Dirichlet form on interior dofs.

    The coefficient is evaluated once per element at its barycenter.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (3,):
        raise ConfigurationError(f"sample vector must have 3 components, got {xi.shape}")
    pat = _pattern(mesh)
    data = stiffness_data(mesh, xi)[0]
    A = sp.csr_matrix((data, pat.indices, pat.indptr), shape=(mesh.n_dofs,) * 2)
    return _symmetrize(A)


def assemble_mass(mesh):
    """Consistent P1 mass matrix on interior dofs."""
    return _mass(mesh)


@lru_cache(maxsize=64)
def _mass(mesh):
    pat = _pattern(mesh)
    M = sp.csr_matrix((pat.mass_data, pat.indices, pat.indptr), shape=(mesh.n_dofs,) * 2)
    return _symmetrize(M)


# ------------------------------------------------------------------ solvers


def solve_spd(A, rhs, rel_tol=1e-10, maxiter=None):
    """Jacobi-preconditioned conjugate gradients.

    Returns ``x`` with ``||A x - rhs|| <= rel_tol * ||rhs||``. Raises
    ConvergenceError after ``maxiter`` (default ``10 n``) iterations.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = len(rhs)
    maxiter = 10 * n if maxiter is None else maxiter
    x = np.zeros(n)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return x
    dinv = 1.0 / A.diagonal()
    r = rhs.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(maxiter):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= rel_tol * bnorm:
            # recursive residual can drift; confirm with the true one
            r = rhs - A @ x
            if np.linalg.norm(r) <= rel_tol * bnorm:
                return x
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(rhs - A @ x) / bnorm
    raise ConvergenceError(f"CG did not converge in {maxiter} iterations", residual=res)


# ------------------------------------------------------------ prolongation


@lru_cache(maxsize=64)
def _prolongation_step(dim, coarse_level, base_cells):
    """Interpolation matrix from level ``coarse_level`` to ``coarse_level + 1``."""
    n = base_cells * 2**coarse_level
    nf = 2 * n
    if dim == 1:
        I = np.arange(nf + 1)
        lo, hi = I // 2, (I + 1) // 2
        rows = np.concatenate([I, I])
        cols = np.concatenate([lo, hi])
        # even nodes get 0.5 twice from the same coarse node
        vals = np.full(len(rows), 0.5)
        full_c, full_f = n + 1, nf + 1
        int_c, int_f = np.arange(1, n), np.arange(1, nf)
    else:
        J, I = np.divmod(np.arange((nf + 1) ** 2), nf + 1)
        ilo, ihi = I // 2, (I + 1) // 2
        jlo, jhi = J // 2, (J + 1) // 2
        # odd/odd nodes sit on the diagonal edge (ilo, jlo)-(ihi, jhi)
        rows = np.concatenate([np.arange(len(I))] * 2)
        cols = np.concatenate([jlo * (n + 1) + ilo, jhi * (n + 1) + ihi])
        vals = np.full(len(rows), 0.5)
        full_c, full_f = (n + 1) ** 2, (nf + 1) ** 2
        int_c = _build_mesh(dim, coarse_level, base_cells).interior
        int_f = _build_mesh(dim, coarse_level + 1, base_cells).interior
    P = sp.csr_matrix((vals, (rows, cols)), shape=(full_f, full_c))
    return P[int_f][:, int_c].tocsr()


def prolong(u, target):
    """Interpolate ``u`` onto the finer nested mesh ``target``."""
    src = u.mesh
    if not src.same_hierarchy(target) or target.level < src.level:
        raise ConfigurationError(f"cannot prolong from {src} to {target}")
    values = u.values
    for level in range(src.level, target.level):
        values = _prolongation_step(src.dim, level, src.base_cells) @ values
    return NodalField(target, values)


def l2_norm(u):
    """L2(D) norm using the consistent mass matrix."""
    v = u.values
    return float(np.sqrt(max(v @ (assemble_mass(u.mesh) @ v), 0.0)))


def l2_inner(u, v):
    if u.mesh is not v.mesh:
        u, v = _common_mesh(u, v)
    return float(u.values @ (assemble_mass(u.mesh) @ v.values))


def _common_mesh(u, v):
    if not u.mesh.same_hierarchy(v.mesh):
        raise ConfigurationError("fields belong to different mesh hierarchies")
    if u.mesh.level < v.mesh.level:
        u = prolong(u, v.mesh)
    else:
        v = prolong(v, u.mesh)
    return u, v


def l2_distance(u, v):
    """L2(D) distance, prolonging the coarser argument first."""
    u, v = _common_mesh(u, v)
    return l2_norm(u - v)
