"""Penalized least-squares and support-restricted precision solvers.

Two problem families are covered:

* group-penalized least squares, solved by exact groupwise block coordinate
  descent with a certified KKT residual at exit;
* Gaussian log-likelihood precision estimation restricted to a fixed edge
  support (no shrinkage on free entries), solved by blockwise regression on
  the working covariance.

Loss-scaling conventions: the joint-model problems use a (1/n)-scaled squared
loss, while the lasso initializer keeps the unscaled loss of its defining
display; each call site documents which convention it passes via ``scale``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels

__all__ = [
    "SolverError",
    "NonFinite",
    "NotPD",
    "NoConverge",
    "GroupedLSProblem",
    "GroupLassoResult",
    "PrecisionProblem",
    "group_lasso_bcd",
    "lasso_cd",
    "restricted_glasso",
    "refit_ols",
    "precision_objective",
]

KKT_TOL = 1e-6
MAX_SWEEPS = 500


class SolverError(RuntimeError):
    pass


class NonFinite(SolverError):
    """Iterates diverged or the subproblem is unbounded."""


class NotPD(SolverError):
    """Covariance input cannot support a positive-definite solution.

    Callers may retry after adding a ridge of 1e-3 * mean(diag(S)).
    """


class NoConverge(SolverError):
    pass


@dataclass
class GroupedLSProblem:
    """Group-penalized least squares over a shared coefficient vector.

    minimize  scale * sum_b ||y_b - D_b beta||^2  +  penalty * sum_g w_g ||beta[g]||

    blocks  : (design, response) pairs; every design has n_coef columns
              indexing the same coefficient vector.
    groups  : disjoint index sets covering 0..n_coef-1.
    scale   : loss prefactor (1/n for the joint-model problems, 1 for the
              plain lasso convention).
    weights : None for the unweighted norms used everywhere by default, or
              "sqrt" for sqrt(group size) weights.
    """

    blocks: Sequence[tuple[np.ndarray, np.ndarray]]
    groups: Sequence[np.ndarray]
    penalty: float
    scale: float = 1.0
    weights: str | None = None

    def __post_init__(self):
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")
        if not self.blocks:
            raise ValueError("need at least one (design, response) block")
        widths = {np.asarray(D).shape[1] for D, _ in self.blocks}
        if len(widths) != 1:
            raise ValueError("all designs must share the coefficient indexing")
        self.n_coef = widths.pop()
        seen = np.zeros(self.n_coef, dtype=bool)
        for g in self.groups:
            g = np.asarray(g, dtype=np.int64)
            if g.size == 0 or g.min() < 0 or g.max() >= self.n_coef:
                raise ValueError("group indices out of range")
            if seen[g].any():
                raise ValueError("groups must be disjoint")
            seen[g] = True
        if not seen.all():
            raise ValueError("groups must cover every coefficient")
        for D, y in self.blocks:
            if not (np.isfinite(D).all() and np.isfinite(y).all()):
                raise ValueError("non-finite design or response")


@dataclass
class GroupLassoResult:
    coef: np.ndarray
    converged: bool
    sweeps: int
    kkt_residual: float
    objective_path: np.ndarray = field(repr=False, default=None)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coef, dtype=dtype)


def _pack_eigen(A_blocks, gptr, gblk, gcol, gdiag):
    """Eigendecompositions of the non-diagonal group quadratics, packed flat."""
    n_groups = len(gptr) - 1
    uptr = np.zeros(n_groups + 1, dtype=np.int64)
    dflat = np.zeros(gptr[-1])
    chunks = []
    run = 0
    for g in range(n_groups):
        lo, hi = gptr[g], gptr[g + 1]
        uptr[g] = run
        if gdiag[g]:
            continue
        s = hi - lo
        Q = np.empty((s, s))
        for a in range(s):
            for c in range(s):
                if gblk[lo + a] == gblk[lo + c]:
                    Q[a, c] = A_blocks[gblk[lo + a]][gcol[lo + a], gcol[lo + c]]
                else:
                    Q[a, c] = 0.0
        evals, evecs = np.linalg.eigh(Q)
        evals[np.abs(evals) < 1e-13] = 0.0
        if evals.min() < -1e-9 * max(1.0, evals.max()):
            raise NonFinite("indefinite group quadratic")
        evals = np.clip(evals, 0.0, None)
        dflat[lo:hi] = evals
        chunks.append(evecs.T.ravel())  # rows are eigenvectors
        run += s * s
    uptr[n_groups] = run
    uflat = np.concatenate(chunks) if chunks else np.zeros(1)
    return uflat, uptr, dflat


def _run_gram_bcd(A, b, groups_bc, lamg, init=None, tol=KKT_TOL,
                  max_sweeps=MAX_SWEEPS, objective_offset=0.0):
    """Run the BCD kernel on per-block Gram form.

    A: (Kb, m, m) symmetric 2*scale*D'D blocks; b: (Kb, m); groups_bc:
    sequence of integer arrays of shape (s, 2) holding (block, column) pairs.
    """
    A = np.ascontiguousarray(A, dtype=float)
    b = np.ascontiguousarray(b, dtype=float)
    Kb, m = b.shape
    sizes = [len(g) for g in groups_bc]
    gptr = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=gptr[1:])
    gblk = np.empty(gptr[-1], dtype=np.int64)
    gcol = np.empty(gptr[-1], dtype=np.int64)
    gdiag = np.empty(len(sizes), dtype=np.int64)
    for g, ent in enumerate(groups_bc):
        ent = np.asarray(ent, dtype=np.int64).reshape(-1, 2)
        gblk[gptr[g]:gptr[g + 1]] = ent[:, 0]
        gcol[gptr[g]:gptr[g + 1]] = ent[:, 1]
        blocks = ent[:, 0]
        gdiag[g] = 1 if len(np.unique(blocks)) == len(blocks) else 0
    uflat, uptr, dflat = _pack_eigen(A, gptr, gblk, gcol, gdiag)
    beta = np.zeros((Kb, m)) if init is None else np.array(init, dtype=float).reshape(Kb, m)
    objective = np.empty(max_sweeps)
    lamg = np.ascontiguousarray(lamg, dtype=float)
    status, sweeps, kkt = _kernels.bcd_gram(
        A, b, beta, gptr, gblk, gcol, gdiag, uflat, uptr, dflat,
        lamg, tol, max_sweeps, objective)
    if status == _kernels.STATUS_NONFINITE or status == _kernels.STATUS_UNBOUNDED:
        raise NonFinite("group BCD diverged (unbounded or non-finite iterates)")
    result = GroupLassoResult(
        coef=beta,
        converged=(status == _kernels.STATUS_OK),
        sweeps=int(sweeps),
        kkt_residual=float(kkt),
        objective_path=objective[:sweeps] + objective_offset,
    )
    return result


def group_lasso_bcd(prob: GroupedLSProblem, init: np.ndarray | None = None,
                    tol: float = KKT_TOL, max_sweeps: int = MAX_SWEEPS) -> GroupLassoResult:
    """Solve a GroupedLSProblem by exact groupwise coordinate descent.

    At exit the KKT conditions are certified to ``tol``: active groups have
    gradient + penalty * beta_g/||beta_g|| vanishing entrywise, zero groups
    have gradient norm within penalty * (1 + tol).  When the sweep cap is hit
    the best iterate is returned with ``converged=False``.
    """
    m = prob.n_coef
    A = np.zeros((1, m, m))
    bvec = np.zeros((1, m))
    c0 = 0.0
    for D, y in prob.blocks:
        D = np.asarray(D, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        A[0] += 2.0 * prob.scale * (D.T @ D)
        bvec[0] += 2.0 * prob.scale * (D.T @ y)
        c0 += prob.scale * float(y @ y)
    groups_bc = [np.stack([np.zeros(len(g), dtype=np.int64),
                           np.asarray(g, dtype=np.int64)], axis=1)
                 for g in prob.groups]
    if prob.weights == "sqrt":
        lamg = np.array([prob.penalty * np.sqrt(len(g)) for g in prob.groups])
    else:
        lamg = np.full(len(prob.groups), prob.penalty)
    init2 = None if init is None else np.asarray(init, dtype=float).reshape(1, m)
    res = _run_gram_bcd(A, bvec, groups_bc, lamg, init=init2, tol=tol,
                        max_sweeps=max_sweeps, objective_offset=c0)
    res.coef = res.coef[0]
    return res


def lasso_cd(X: np.ndarray, y: np.ndarray, lam: float,
             tol: float = KKT_TOL, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Coordinate-descent lasso for ||y - X beta||^2 + lam * ||beta||_1.

    Note the unscaled squared loss: the zero solution is reached exactly when
    lam >= 2 ||X'y||_inf.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    p = X.shape[1]
    prob = GroupedLSProblem(
        blocks=[(X, y)],
        groups=[np.array([j]) for j in range(p)],
        penalty=float(lam),
        scale=1.0,
    )
    return group_lasso_bcd(prob, tol=tol, max_sweeps=max_sweeps).coef


def _lasso_gram(A, bvec, lam, init=None, tol=KKT_TOL, max_sweeps=MAX_SWEEPS):
    """Lasso on precomputed 2*scale*Gram form; used by the pipeline hot path."""
    m = bvec.shape[0]
    groups = [np.array([[0, j]], dtype=np.int64) for j in range(m)]
    lamg = np.full(m, float(lam))
    res = _run_gram_bcd(A[None], bvec[None], groups, lamg, init=None if init is None
                        else init[None], tol=tol, max_sweeps=max_sweeps)
    return res.coef[0]


def refit_ols(X: np.ndarray, y: np.ndarray, support) -> np.ndarray:
    """Least-squares refit on a support set via the SVD pseudo-inverse.

    Coefficients off the support are exactly zero.  On the support the
    minimum-norm solution of the normal equations is returned, dropping Gram
    eigenvalues below 1e-10 times the largest.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    p = X.shape[1]
    support = np.asarray(support)
    idx = np.flatnonzero(support) if support.dtype == bool else support.astype(int)
    coef = np.zeros(p)
    if idx.size == 0:
        return coef
    U, s, Vt = np.linalg.svd(X[:, idx], full_matrices=False)
    if s.size and s[0] > 0:
        keep = s**2 > 1e-10 * s[0] ** 2
        coef[idx] = Vt[keep].T @ ((U[:, keep].T @ y) / s[keep])
    return coef


@dataclass
class PrecisionProblem:
    """Support-restricted Gaussian precision estimation.

    minimize  Tr(S Omega) - log det(Omega)  over PD Omega with off-diagonal
    support contained in the given symmetric edge set.
    """

    S: np.ndarray
    support: np.ndarray
    tol: float = 1e-6

    def __post_init__(self):
        S = np.asarray(self.S, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("S must be square")
        if not np.allclose(S, S.T, atol=1e-10, rtol=0):
            raise ValueError("S must be symmetric")
        sup = np.asarray(self.support, dtype=bool).copy()
        if sup.shape != S.shape:
            raise ValueError("support shape mismatch")
        sup |= sup.T
        np.fill_diagonal(sup, False)
        self.S = (S + S.T) / 2.0
        self.support = sup


def precision_objective(S: np.ndarray, omega: np.ndarray) -> float:
    """Tr(S Omega) - log det Omega."""
    sign, logdet = np.linalg.slogdet(omega)
    if sign <= 0:
        return np.inf
    return float(np.sum(S * omega) - logdet)


def restricted_glasso(prob: PrecisionProblem, max_sweeps: int = 500) -> np.ndarray:
    """Constrained precision MLE with hard zeros off the support.

    Blockwise coordinate descent on the working covariance W: each column
    solves the regression of its neighbors under the support restriction,
    which pins W to S on the free entries at stationarity.  The returned
    matrix is symmetric PD and certified to satisfy
    max |S - inv(Omega)| <= tol on the support and the diagonal.
    """
    S, support, tol = prob.S, prob.support, prob.tol
    q = S.shape[0]
    if np.any(np.diag(S) <= 0):
        raise NotPD("S has non-positive diagonal entries")
    if q == 1:
        return np.array([[1.0 / S[0, 0]]])

    free = support.copy()
    np.fill_diagonal(free, True)

    if not support.any():
        return np.diag(1.0 / np.diag(S))
    off_mask = ~np.eye(q, dtype=bool)
    if support[off_mask].all():
        try:
            omega = np.linalg.inv(S)
        except np.linalg.LinAlgError as err:
            raise NotPD("S is singular") from err
        omega = (omega + omega.T) / 2
        if np.linalg.eigvalsh(omega)[0] <= 0:
            raise NotPD("S not positive definite")
        return omega

    neigh = [np.flatnonzero(support[j]) for j in range(q)]
    W = S.copy()
    inner_tol = tol * 1e-2 * max(1.0, float(np.mean(np.diag(S))))

    def recover():
        omega = np.zeros((q, q))
        for j in range(q):
            idx = neigh[j]
            if idx.size:
                try:
                    beta = np.linalg.solve(W[np.ix_(idx, idx)], S[idx, j])
                except np.linalg.LinAlgError as err:
                    raise NotPD("working covariance block singular") from err
                den = W[j, j] - W[idx, j] @ beta
            else:
                beta = None
                den = W[j, j]
            if den <= 0:
                raise NotPD("negative conditional variance in recovery")
            omega[j, j] = 1.0 / den
            if idx.size:
                omega[idx, j] = -beta / den
        return (omega + omega.T) / 2.0

    for sweep in range(max_sweeps):
        delta = 0.0
        for j in range(q):
            idx = neigh[j]
            others = np.concatenate([np.arange(j), np.arange(j + 1, q)])
            if idx.size:
                try:
                    beta = np.linalg.solve(W[np.ix_(idx, idx)], S[idx, j])
                except np.linalg.LinAlgError as err:
                    raise NotPD("working covariance block singular") from err
                w12 = W[np.ix_(others, idx)] @ beta
            else:
                w12 = np.zeros(others.size)
            change = np.abs(W[others, j] - w12).max() if others.size else 0.0
            delta = max(delta, change)
            W[others, j] = w12
            W[j, others] = w12
        if delta <= inner_tol:
            omega = recover()
            resid = np.abs(S - np.linalg.inv(omega))[free].max()
            if resid <= tol:
                if np.linalg.eigvalsh(omega)[0] <= 0:
                    raise NotPD("recovered precision not positive definite")
                return omega
            inner_tol *= 0.1
    raise NoConverge(f"restricted precision solve did not certify in {max_sweeps} sweeps")
