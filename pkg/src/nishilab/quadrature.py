"""Tensor-product Gauss-Hermite rules over the couplings of very small systems.

With at most three random couplings a disorder expectation becomes a
weighted sum over 64**K nodes, exact to quadrature accuracy.  The rule is
returned in the same ``p -> (rows, |B_p|)`` layout as sampled disorder so
every downstream estimator treats nodes as weighted realizations.

Accuracy falls off once beta * delta grows past about 1: the Gibbs
expectations then approach step functions of the couplings.
"""

from __future__ import annotations

import numpy as np

from .model import ModelParameters, coupling_scale, family_map

DEFAULT_NODES = 64
MAX_RANDOM_COUPLINGS = 3


class QuadratureError(ValueError):
    pass


def hermite_rule(n_nodes: int = DEFAULT_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for E f(g), g standard normal."""
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def random_coupling_count(params: ModelParameters, families) -> int:
    fams = family_map(families)
    return sum(len(fams[s.p]) for s in params.species if s.delta > 0)


def coupling_rule(params: ModelParameters, families, n_nodes: int = DEFAULT_NODES):
    """Quadrature couplings ``p -> (M, |B_p|)`` and weights ``(M,)``."""
    fams = family_map(families)
    k = random_coupling_count(params, fams)
    if k > MAX_RANDOM_COUPLINGS:
        raise QuadratureError(f"{k} random couplings; quadrature supports at most {MAX_RANDOM_COUPLINGS}")
    g, w = hermite_rule(n_nodes)
    grids = np.meshgrid(*([g] * k), indexing="ij") if k else []
    wgrids = np.meshgrid(*([w] * k), indexing="ij") if k else []
    nodes = np.stack([a.ravel() for a in grids], axis=1) if k else np.zeros((1, 0))
    weights = np.prod(np.stack([a.ravel() for a in wgrids], axis=1), axis=1) if k else np.ones(1)
    couplings = {}
    col = 0
    for s in params.species:
        fam = fams[s.p]
        mean, std = coupling_scale(s, params.kind, fam.n_sites)
        if std == 0:
            couplings[s.p] = np.full((len(weights), len(fam)), mean)
            continue
        couplings[s.p] = mean + std * nodes[:, col : col + len(fam)]
        col += len(fam)
    return couplings, weights
