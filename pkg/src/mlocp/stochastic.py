"""
Random diffusion coefficient and quadrature rules over its parameters.

The coefficient depends on three parameters ``xi`` uniform on [-1, 1]^3,

    kappa(x, xi) = exp(sigma2 * sum_n xi_n psi_n(x)),  sigma2 = exp(-1.125).

Monte Carlo rules draw their nodes from counter-based Philox streams keyed
by ``(seed, stream, level, replicate)``, so every (level, replicate) pair
gets its own reproducible, independent sample set.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

SIGMA2 = float(np.exp(-1.125))
N_PARAMS = 3

# stream tags keep the sample sets of different experiments apart
STREAM_MLMC = 0
STREAM_MC = 1
STREAM_CALIBRATE_MC = 2
STREAM_CALIBRATE_SURPLUS = 3
STREAM_MIXED = 4


def psi_functions(x, dim):
    """Basis functions of the coefficient, evaluated at points ``x``.

    ``x`` has shape (m, dim) (or (m,) in 1D); the result has shape (m, 3).
    """
    x = np.asarray(x, dtype=float)
    if dim == 1:
        t = x.reshape(-1)
        return np.column_stack([np.cos(np.pi * t), np.sin(np.pi * t), np.cos(2 * np.pi * t)])
    if dim == 2:
        x = x.reshape(-1, 2)
        s, t = x[:, 0], x[:, 1]
        return np.column_stack([
            np.cos(np.pi * s) * np.sin(np.pi * t),
            np.cos(2 * np.pi * s) * np.sin(np.pi * t),
            np.cos(np.pi * s) * np.sin(2 * np.pi * t),
        ])
    raise ConfigurationError(f"dimension must be 1 or 2, got {dim}")


def kappa(x, xi, dim):
    """Diffusion coefficient at points ``x`` for one sample ``xi``."""
    xi = np.asarray(xi, dtype=float)
    return np.exp(SIGMA2 * (psi_functions(x, dim) @ xi))


@dataclass(frozen=True)
class StreamKey:
    seed: int
    level: int = 0
    replicate: int = 0
    stream: int = STREAM_MLMC

    def generator(self):
        ss = np.random.SeedSequence(
            int(self.seed), spawn_key=(int(self.stream), int(self.level), int(self.replicate)))
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Positive-weight rule on [-1,1]^3 for the uniform probability measure."""

    kind: str
    nodes: np.ndarray
    weights: np.ndarray
    key: StreamKey | None = None

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, N_PARAMS)
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if len(nodes) < 1 or len(nodes) != len(weights):
            raise ConfigurationError("rule needs >= 1 node and one weight per node")
        if np.any(weights <= 0):
            raise ConfigurationError("quadrature weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"weights sum to {weights.sum()!r}, expected 1")
        if np.any(np.abs(nodes) > 1.0):
            raise ConfigurationError("nodes must lie in [-1, 1]^3")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.weights)

    def subset(self, n):
        """Rule built from the first ``n`` nodes with equal weights (MC only)."""
        if self.kind != "monte-carlo":
            raise ConfigurationError("subset is defined for Monte Carlo rules only")
        return QuadratureRule(self.kind, self.nodes[:n], np.full(n, 1.0 / n), self.key)


def custom_rule(nodes, weights):
    return QuadratureRule("custom", nodes, weights)


def monte_carlo_rule(n, key):
    """``n`` i.i.d. uniform nodes from the stream ``key``, weights ``1/n``."""
    if n < 1:
        raise ConfigurationError(f"need at least one sample, got {n}")
    nodes = key.generator().uniform(-1.0, 1.0, size=(int(n), N_PARAMS))
    return QuadratureRule("monte-carlo", nodes, np.full(int(n), 1.0 / n), key)


def gauss_tensor_rule(n):
    """Tensor Gauss-Legendre rule with ``n`` points per parameter (n**3 nodes)."""
    if n < 1:
        raise ConfigurationError(f"need at least one point per dimension, got {n}")
    x, w = np.polynomial.legendre.leggauss(int(n))
    w = w / 2.0
    g = np.meshgrid(x, x, x, indexing="ij")
    gw = np.meshgrid(w, w, w, indexing="ij")
    nodes = np.column_stack([c.ravel() for c in g])
    weights = (gw[0] * gw[1] * gw[2]).ravel()
    # leggauss weights sum to 2 only up to rounding
    weights = weights / weights.sum()
    return QuadratureRule("gauss-tensor", nodes, weights)


def quadrature_apply(rule, values):
    """Weighted sum of per-node fields, accumulated in node order."""
    if len(values) != len(rule):
        raise ConfigurationError(f"{len(values)} values for a rule with {len(rule)} nodes")
    mesh = values[0].mesh
    acc = np.zeros_like(values[0].values)
    for w, v in zip(rule.weights, values):
        if v.mesh is not mesh:
            raise ConfigurationError("all values must live on the same mesh")
        acc += w * v.values
    return dataclasses.replace(values[0], values=acc)
