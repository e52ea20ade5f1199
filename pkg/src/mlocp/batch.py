"""Batched state/adjoint solves for all nodes of a quadrature rule.

Samples are grouped into chunks; each chunk is assembled as one
block-diagonal sparse matrix and factorized once with SuperLU. Factors are
kept as long as they fit in ``FACTOR_CACHE_BYTES``, otherwise every solve
refactorizes chunk by chunk.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .fem import _pattern, stiffness_data

log = logging.getLogger(__name__)

CHUNK_DOFS = 200_000
FACTOR_CACHE_BYTES = int(os.environ.get("MLOCP_FACTOR_CACHE_BYTES", 1_500_000_000))
_threads = max(1, int(os.environ.get("MLOCP_THREADS", "1")))


def set_threads(n):
    """Thread-count hint for chunk solves. Results do not depend on it."""
    global _threads
    _threads = max(1, int(n))


def get_threads():
    return _threads


class SampleSolver:
    """Solve ``A(xi_j) x_j = b_j`` for every node ``xi_j`` of a rule."""

    def __init__(self, mesh, nodes):
        self.mesh = mesh
        self.nodes = np.asarray(nodes, dtype=float)
        self.n = mesh.n_dofs
        n_samples = len(self.nodes)
        per_chunk = max(1, CHUNK_DOFS // max(self.n, 1))
        self.chunks = [(s, min(s + per_chunk, n_samples)) for s in range(0, n_samples, per_chunk)]
        self._factors = None
        self._cache = True
        self._permc = "NATURAL" if mesh.dim == 1 else "MMD_AT_PLUS_A"

    def __len__(self):
        return len(self.nodes)

    def _factorize(self, start, stop):
        pat = _pattern(self.mesh)
        c, n = stop - start, self.n
        data = stiffness_data(self.mesh, self.nodes[start:stop]).ravel()
        nnz = len(pat.indices)
        offs = np.arange(c)
        indptr = np.concatenate([(pat.indptr[:-1][None, :] + nnz * offs[:, None]).ravel(), [c * nnz]])
        indices = (pat.indices[None, :] + n * offs[:, None]).ravel()
        # symmetric, so the CSR arrays are also valid CSC arrays
        A = sp.csc_matrix((data, indices, indptr), shape=(c * n, c * n))
        return splu(A, permc_spec=self._permc, diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True})

    def _factor(self, i):
        if self._factors is None:
            first = self._factorize(*self.chunks[0])
            est = (first.L.nnz + first.U.nnz) * 12 * len(self.chunks)
            self._cache = est <= FACTOR_CACHE_BYTES
            if not self._cache:
                log.info("factor cache disabled for %s (%.0f MB)", self.mesh, est / 1e6)
            self._factors = [first] + [None] * (len(self.chunks) - 1)
        lu = self._factors[i]
        if lu is None:
            lu = self._factorize(*self.chunks[i])
            if self._cache:
                self._factors[i] = lu
        elif not self._cache:
            self._factors[i] = None
        return lu

    def solve(self, rhs):
        """``rhs`` of shape (n,) (shared) or (n_samples, n); returns (n_samples, n)."""
        rhs = np.asarray(rhs, dtype=float)
        shared = rhs.ndim == 1
        out = np.empty((len(self.nodes), self.n))

        def work(i):
            s, e = self.chunks[i]
            lu = self._factor(i)
            b = np.tile(rhs, e - s) if shared else rhs[s:e].ravel()
            out[s:e] = lu.solve(b).reshape(e - s, self.n)

        if _threads > 1 and len(self.chunks) > 1 and self._factors is not None:
            with ThreadPoolExecutor(_threads) as ex:
                list(ex.map(work, range(len(self.chunks))))
        else:
            for i in range(len(self.chunks)):
                work(i)
        return out
