"""Joint estimation of the upper-layer precision matrices across conditions.

Per node, the K regressions of a variable on all the others are fit together
under element-wise group penalties, the per-condition edge sets are formed by
an OR rule on the two directed coefficients, and the precision matrices are
refit by support-restricted maximum likelihood.  The same node-wise machinery
also powers the lower-layer neighborhood updates of the joint estimator, and
applied to centered response data alone it gives the single-layer baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .core import PairGroups
from .solvers import NonFinite, NotPD, PrecisionProblem, restricted_glasso

__all__ = [
    "UpperLayerFit",
    "default_eta_grid",
    "joint_neighborhoods",
    "union_edges",
    "fit_upper_layer",
]

NONZERO_TOL = 1e-10


def default_eta_grid(d: int, n: int) -> np.ndarray:
    """Penalty grid {0.3, 0.4, ..., 1.0} * sqrt(log d / n)."""
    return np.arange(0.3, 1.01, 0.1) * np.sqrt(np.log(d) / n)


def _node_groups(d: int, pair_groups: PairGroups) -> list[list[np.ndarray]]:
    """Group index sets for every node's joint regression.

    For node i, neighbor position r maps to variable i' (r if r < i else
    r + 1); each part of the (i, i') condition partition becomes one group of
    (condition, position) pairs.
    """
    out = []
    for i in range(d):
        groups_i = []
        for r in range(d - 1):
            ip = r if r < i else r + 1
            for part in pair_groups.groups(i, ip):
                ent = np.empty((len(part), 2), dtype=np.int64)
                ent[:, 0] = part
                ent[:, 1] = r
                groups_i.append(ent)
        out.append(groups_i)
    return out


def group_penalties(groups, base: float, weights: str) -> "np.ndarray":
    """Per-group penalty levels: the base value, optionally sqrt-size weighted."""
    import numpy as _np
    if weights == "sqrt":
        return _np.array([base * _np.sqrt(len(g)) for g in groups])
    if weights != "none":
        raise ValueError(f"unknown weights convention {weights!r}")
    return _np.full(len(groups), float(base))


def _pack(groups_i):
    sizes = [len(g) for g in groups_i]
    gptr = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=gptr[1:])
    ent = np.concatenate(groups_i)
    return gptr, np.ascontiguousarray(ent[:, 0]), np.ascontiguousarray(ent[:, 1])


def nodewise_joint_regression(grams, node_groups, penalty, warm=None,
                              weights="none", tol=1e-6, max_sweeps=500):
    """Solve all node-wise grouped regressions given scaled Grams.

    grams : (K, d, d) arrays holding M'M / n for the data matrix M of each
            condition, i.e. the quadratic term of the (1/2n)-scaled loss;
            node i uses the Gram with row/column i removed and the linear
            term M_{-i}' M_i / n.
    Returns coefficients of shape (d, d-1, K).
    """
    G2 = np.ascontiguousarray(grams, dtype=float)
    K, d, _ = G2.shape
    coef = np.zeros((d, d - 1, K)) if warm is None else np.array(warm, dtype=float)
    objective = np.empty(max_sweeps)
    for i in range(d):
        others = np.concatenate([np.arange(i), np.arange(i + 1, d)])
        A = np.ascontiguousarray(G2[:, others[:, None], others[None, :]])
        b = np.ascontiguousarray(G2[:, others, i])
        gptr, gblk, gcol = node_groups[i][1]
        beta = np.ascontiguousarray(coef[i].T)
        lamg = group_penalties(node_groups[i][0], penalty, weights)
        gdiag = np.ones(len(node_groups[i][0]), dtype=np.int64)
        uflat = np.zeros(1)
        uptr = np.zeros(len(node_groups[i][0]) + 1, dtype=np.int64)
        dflat = np.zeros(gptr[-1])
        status, _, _ = _kernels.bcd_gram(A, b, beta, gptr, gblk, gcol, gdiag,
                                         uflat, uptr, dflat, lamg, tol,
                                         max_sweeps, objective)
        if status in (_kernels.STATUS_NONFINITE, _kernels.STATUS_UNBOUNDED):
            raise NonFinite(f"node {i}: joint regression diverged")
        coef[i] = beta.T
    return coef


def _prepare_nodes(d: int, pair_groups: PairGroups):
    raw = _node_groups(d, pair_groups)
    return [(g, _pack(g)) for g in raw]


def joint_neighborhoods(X: Sequence[np.ndarray], gx: PairGroups, eta: float,
                        weights: str = "none", tol: float = 1e-6,
                        max_sweeps: int = 500) -> np.ndarray:
    """Neighborhood coefficients of every upper-layer node, all conditions.

    Solves, for each node i, the grouped regression of X_i^k on X_{-i}^k
    across k with (1/2n)-scaled squared loss and penalty eta on the group
    norms defined by gx (unweighted by default).  Returns (p, p-1, K).
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    X = [np.asarray(x, dtype=float) for x in X]
    n, p = X[0].shape
    grams = np.stack([(x.T @ x) / x.shape[0] for x in X])
    nodes = _prepare_nodes(p, gx)
    return nodewise_joint_regression(grams, nodes, eta, weights=weights,
                                     tol=tol, max_sweeps=max_sweeps)


def union_edges(coef: np.ndarray, threshold: float = NONZERO_TOL) -> np.ndarray:
    """Symmetric edge sets from node-wise coefficients by the OR rule.

    coef has shape (d, d-1, K); edge (i, i') is present in condition k when
    either directed coefficient exceeds the threshold in magnitude.
    """
    d, _, K = coef.shape
    edges = np.zeros((K, d, d), dtype=bool)
    for i in range(d):
        others = np.concatenate([np.arange(i), np.arange(i + 1, d)])
        nz = np.abs(coef[i]) > threshold  # (d-1, K)
        for k in range(K):
            hit = others[nz[:, k]]
            edges[k, i, hit] = True
    edges |= np.swapaxes(edges, 1, 2)
    return edges


@dataclass
class UpperLayerFit:
    """Joint neighborhood fit with the support-restricted precision refit."""

    zeta: np.ndarray        # (p, p-1, K)
    edges: np.ndarray       # (K, p, p) boolean, symmetric
    omega: np.ndarray       # (K, p, p) PD precision matrices
    eta_selected: float
    eta_grid: np.ndarray
    bic_path: np.ndarray
    edge_counts: np.ndarray  # per grid point, summed over k
    ridge_applied: bool = False


def _restricted_fit(S, edges, tol=1e-6):
    """Per-condition restricted MLE with the documented ridge fallback."""
    mats = []
    ridge = False
    for k in range(len(S)):
        Sk = S[k]
        try:
            om = restricted_glasso(PrecisionProblem(Sk, edges[k], tol=tol))
        except NotPD:
            eps = 1e-3 * float(np.mean(np.diag(Sk)))
            om = restricted_glasso(PrecisionProblem(Sk + eps * np.eye(Sk.shape[0]),
                                                    edges[k], tol=tol))
            ridge = True
        mats.append(om)
    return np.stack(mats), ridge


def _bic_restricted(S, omega, edges, n):
    """sum_k [Tr(S_k Om_k) - log det Om_k] + (log n / n) * sum_k |E_k|."""
    total = 0.0
    n_edges = 0
    for k in range(len(S)):
        sign, logdet = np.linalg.slogdet(omega[k])
        total += float(np.sum(S[k] * omega[k])) - logdet
        n_edges += int(np.triu(edges[k], 1).sum())
    return total + np.log(n) / n * n_edges, n_edges


def fit_upper_layer(X: Sequence[np.ndarray], gx: PairGroups,
                    eta_grid: np.ndarray | None = None,
                    tol: float = 1e-6) -> UpperLayerFit:
    """Tune the joint neighborhood penalty by BIC and refit the precisions.

    The criterion scores, at each grid value, the support-restricted MLE on
    the selected edge sets (ties broken toward the larger, sparser penalty).
    The grid is swept in descending order with warm starts.
    """
    X = [np.asarray(x, dtype=float) for x in X]
    n, p = X[0].shape
    if eta_grid is None:
        eta_grid = default_eta_grid(p, n)
    eta_grid = np.sort(np.asarray(eta_grid, dtype=float))[::-1]
    if eta_grid.size == 0:
        raise ValueError("eta grid is empty")
    S = np.stack([x.T @ x / x.shape[0] for x in X])
    nodes = _prepare_nodes(p, gx)

    zeta = None
    best = None
    bic_path = np.empty(eta_grid.size)
    counts = np.empty(eta_grid.size, dtype=int)
    for idx, eta in enumerate(eta_grid):
        zeta = nodewise_joint_regression(S, nodes, eta, warm=zeta, tol=tol)
        edges = union_edges(zeta)
        omega, ridge = _restricted_fit(S, edges)
        bic, n_edges = _bic_restricted(S, omega, edges, n)
        bic_path[idx] = bic
        counts[idx] = n_edges
        if best is None or bic < best[0]:
            best = (bic, eta, zeta.copy(), edges, omega, ridge)
    _, eta_star, zeta_star, edges_star, omega_star, ridge_star = best
    return UpperLayerFit(
        zeta=zeta_star,
        edges=edges_star,
        omega=omega_star,
        eta_selected=float(eta_star),
        eta_grid=eta_grid,
        bic_path=bic_path,
        edge_counts=counts,
        ridge_applied=ridge_star,
    )
