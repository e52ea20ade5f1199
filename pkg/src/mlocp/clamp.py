"""Integrals of pointwise-clamped P1 functions.

For a P1 function ``w`` and bounds ``a <= b`` the control ``clamp(w, a, b)``
is piecewise linear on each element but kinks along the level lines
``w = a`` and ``w = b``, so it is not a P1 function itself. Because ``w`` is
linear on an element, the sublevel set ``{w <= c}`` of a simplex is a
simplex or the simplex minus a corner simplex. Every integral needed below
is therefore a polynomial of degree <= 2 over a small simplex and is
computed exactly with a degree-2 rule.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .fem import build_mesh, prolong


def full_values(mesh, values):
    """Nodal values on all nodes, zero on the boundary."""
    out = np.zeros(len(mesh.coords))
    out[mesh.interior] = values
    return out


@lru_cache(maxsize=64)
def _element_measure(mesh):
    P = mesh.coords[mesh.elements]
    if mesh.dim == 1:
        return P[:, 1, 0] - P[:, 0, 0]
    e1, e2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


@lru_cache(maxsize=64)
def _dof_map(mesh):
    dof_of = np.full(len(mesh.coords), -1)
    dof_of[mesh.interior] = np.arange(mesh.n_dofs)
    return dof_of[mesh.elements]


def _rule(k):
    # points as weights over the simplex vertices, exact for degree 2
    if k == 2:
        return np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]]), np.array([1, 1, 4]) / 6.0
    return np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]), np.full(3, 1 / 3)


def _simplex_moments(V, measure):
    """First and second moments of the barycentric coordinates over sub-simplices.

    ``V[e, v]`` holds the barycentric coordinates (w.r.t. element ``e``) of
    vertex ``v`` of the sub-simplex. Returns ``l[e, i] = int phi_i`` and
    ``m[e, i, j] = int phi_i phi_j`` over the sub-simplex.
    """
    ratio = np.abs(np.linalg.det(V)) * measure
    pts, wts = _rule(V.shape[1])
    lam = np.einsum("qv,evi->eqi", pts, V)
    l = np.einsum("q,eqi->ei", wts, lam) * ratio[:, None]
    m = np.einsum("q,eqi,eqj->eij", wts, lam, lam) * ratio[:, None, None]
    return l, m


def _full_moments(n_el, k, measure):
    eye = np.broadcast_to(np.eye(k), (n_el, k, k))
    return _simplex_moments(eye, measure)


def _sublevel_moments(wloc, c, measure, full):
    """Moments over ``T ∩ {w <= c}`` for every element ``T``."""
    n_el, k = wloc.shape
    l = np.zeros((n_el, k))
    m = np.zeros((n_el, k, k))
    order = np.argsort(wloc, axis=1, kind="stable")
    s = np.take_along_axis(wloc, order, axis=1)
    eye = np.eye(k)
    whole = c >= s[:, -1]
    l[whole], m[whole] = full[0][whole], full[1][whole]

    def point(idx, frm, to, t):
        # barycentric coordinates of frm + t (to - frm)
        return (1 - t)[:, None] * eye[order[idx, frm]] + t[:, None] * eye[order[idx, to]]

    if k == 2:
        part = np.flatnonzero((s[:, 0] < c) & ~whole)
        if len(part):
            t = (c - s[part, 0]) / (s[part, 1] - s[part, 0])
            V = np.stack([eye[order[part, 0]], point(part, 0, 1, t)], axis=1)
            l[part], m[part] = _simplex_moments(V, measure[part])
        return l, m

    low = np.flatnonzero((s[:, 0] < c) & (c <= s[:, 1]) & ~whole)
    if len(low):
        t1 = (c - s[low, 0]) / (s[low, 1] - s[low, 0])
        t2 = (c - s[low, 0]) / (s[low, 2] - s[low, 0])
        V = np.stack([eye[order[low, 0]], point(low, 0, 1, t1), point(low, 0, 2, t2)], axis=1)
        l[low], m[low] = _simplex_moments(V, measure[low])
    high = np.flatnonzero((s[:, 1] < c) & ~whole)
    if len(high):
        t1 = (s[high, 2] - c) / (s[high, 2] - s[high, 1])
        t0 = (s[high, 2] - c) / (s[high, 2] - s[high, 0])
        V = np.stack([eye[order[high, 2]], point(high, 2, 1, t1), point(high, 2, 0, t0)], axis=1)
        lc, mc = _simplex_moments(V, measure[high])
        l[high] = full[0][high] - lc
        m[high] = full[1][high] - mc
    return l, m


class ClampedMoments:
    """Element-wise integrals of ``clamp(w, a, b)`` against the P1 basis.

    Attributes
    ----------
    load : ndarray (n_dofs,)
        ``int clamp(w) phi_i`` for every interior dof.
    jacobian : csr_matrix (n_dofs, n_dofs)
        Derivative of ``load`` w.r.t. the interior values of ``w``: the mass
        matrix restricted to the set ``{a < w < b}``.
    sq_norm : float
        ``int clamp(w)^2``.
    """

    def __init__(self, w, bounds):
        mesh = w.mesh
        a, b = map(float, bounds)
        wloc = full_values(mesh, w.values)[mesh.elements]
        measure = _element_measure(mesh)
        n_el, k = wloc.shape
        full = _full_moments(n_el, k, measure)
        la, ma = _sublevel_moments(wloc, a, measure, full)
        lb, mb = _sublevel_moments(wloc, b, measure, full)
        l_in, m_in = lb - la, mb - ma
        l_up = full[0] - lb
        local = a * la + b * l_up + np.einsum("eij,ej->ei", m_in, wloc)

        dofs = _dof_map(mesh)
        keep = dofs >= 0
        self.load = np.bincount(dofs[keep], weights=local[keep], minlength=mesh.n_dofs)
        rows = np.repeat(dofs, k, axis=1).reshape(n_el, k, k)
        cols = np.tile(dofs, (1, k)).reshape(n_el, k, k)
        ok = (rows >= 0) & (cols >= 0)
        self.jacobian = sp.csr_matrix((m_in[ok], (rows[ok], cols[ok])),
                                      shape=(mesh.n_dofs,) * 2)
        self.sq_norm = float(a * a * la.sum() + b * b * l_up.sum()
                             + np.einsum("ei,eij,ej->", wloc, m_in, wloc))
        self.inactive_measure = float(l_in.sum())


# ----------------------------------------------------- norms of combinations


def _linear_parts(wloc, bounds):
    """Per-element linear representative of ``clamp(w)`` and a 'cut' flag.

    On uncut elements the clamped function is linear and equals the P1
    function with the returned vertex values.
    """
    if bounds is None:
        return wloc, np.zeros(len(wloc), dtype=bool)
    a, b = bounds
    lo, hi = wloc.min(axis=1), wloc.max(axis=1)
    below, above = hi <= a, lo >= b
    inside = (lo >= a) & (hi <= b)
    rep = np.where(below[:, None], a, np.where(above[:, None], b, wloc))
    return rep, ~(below | above | inside)


def _split(poly, vals):
    """Split a convex polygon by the sign of a linear function given at its vertices."""
    neg, pos = [], []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        vp, vq = vals[i], vals[(i + 1) % n]
        if vp <= 0:
            neg.append(p)
        if vp >= 0:
            pos.append(p)
        if (vp < 0 < vq) or (vq < 0 < vp):
            x = p + (vp / (vp - vq)) * (q - p)
            neg.append(x)
            pos.append(x)
    return [part for part in (neg, pos) if len(part) >= 3]


def _cut_element_integral(span, terms_local, coefs, bounds_list):
    """Exact integral of ``(sum_i c_i clamp_i(w_i))^2`` over one cut triangle."""
    pieces = [[np.eye(3)[0], np.eye(3)[1], np.eye(3)[2]]]
    for wl, bnd in zip(terms_local, bounds_list):
        if bnd is None:
            continue
        for c in bnd:
            out = []
            for poly in pieces:
                vals = [float(lam @ wl) - c for lam in poly]
                out.extend(_split(poly, vals))
            pieces = out
    total = 0.0
    for poly in pieces:
        for j in range(1, len(poly) - 1):
            V = np.array([poly[0], poly[j], poly[j + 1]])
            area = abs(np.linalg.det(V)) * span
            mids = 0.5 * (V + V[[1, 2, 0]])
            g = np.zeros(3)
            for coef, wl, bnd in zip(coefs, terms_local, bounds_list):
                v = mids @ wl
                g += coef * (np.clip(v, *bnd) if bnd is not None else v)
            total += area * (g @ g) / 3.0
    return total


def combination_norm(terms):
    """Exact L2 norm of ``sum_i c_i f_i``.

    ``terms`` is a list of ``(coefficient, field, bounds)``: ``field`` is a
    NodalField, ``bounds`` is ``None`` (the P1 function itself) or ``(a, b)``
    (its pointwise clamp). Fields are prolonged to the finest mesh among
    them; each element is split along every kink line so the integrand is
    a quadratic polynomial on every piece.
    """
    meshes = [f.mesh for _, f, _ in terms]
    fine = max(meshes, key=lambda m: m.level)
    for m in meshes:
        if not m.same_hierarchy(fine):
            raise ConfigurationError("fields belong to different mesh hierarchies")
    coefs = [float(c) for c, _, _ in terms]
    bounds_list = [None if bnd is None else tuple(map(float, bnd)) for _, _, bnd in terms]
    local = [full_values(fine, prolong(f, fine).values)[fine.elements] for _, f, _ in terms]
    measure = _element_measure(fine)
    n_el, k = local[0].shape

    g = np.zeros((n_el, k))
    cut = np.zeros(n_el, dtype=bool)
    for c, wl, bnd in zip(coefs, local, bounds_list):
        rep, is_cut = _linear_parts(wl, bnd)
        g += c * rep
        cut |= is_cut
    _, Mloc = _full_moments(n_el, k, measure)
    smooth = ~cut
    total = float(np.einsum("ei,eij,ej->", g[smooth], Mloc[smooth], g[smooth]))

    idx = np.flatnonzero(cut)
    if k == 2 and len(idx):
        # breakpoints of every term, then Simpson on each piece
        ts = [np.zeros(len(idx)), np.ones(len(idx))]
        for wl, bnd in zip(local, bounds_list):
            if bnd is None:
                continue
            w0, w1 = wl[idx, 0], wl[idx, 1]
            d = w1 - w0
            for c in bnd:
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = np.where(d != 0, (c - w0) / d, 0.0)
                ts.append(np.clip(t, 0.0, 1.0))
        T = np.sort(np.column_stack(ts), axis=1)
        for j in range(T.shape[1] - 1):
            s, e = T[:, j], T[:, j + 1]
            acc = 0.0
            for tt, wt in ((s, 1 / 6), ((s + e) / 2, 4 / 6), (e, 1 / 6)):
                val = np.zeros(len(idx))
                for c, wl, bnd in zip(coefs, local, bounds_list):
                    v = wl[idx, 0] + (wl[idx, 1] - wl[idx, 0]) * tt
                    val += c * (np.clip(v, *bnd) if bnd is not None else v)
                acc = acc + wt * val * val
            total += float(np.sum(acc * (e - s) * measure[idx]))
    elif len(idx):
        for e in idx:
            total += _cut_element_integral(measure[e], [wl[e] for wl in local],
                                           coefs, bounds_list)
    return float(np.sqrt(max(total, 0.0)))
