"""Numba kernels for block-coordinate descent on group-penalized quadratics.

Both kernels minimize a smooth quadratic plus a sum of unweighted euclidean
group norms by exact groupwise minimization, so the objective is
non-increasing after every group update.  The group subproblem

    min_u  0.5 u' Q u - v' u + lam ||u||

is solved through the eigendecomposition Q = U diag(d) U': with z = U'v the
optimal radius t = ||u|| is the unique positive root of

    phi(t) = sum_e z_e^2 / (d_e t + lam)^2 = 1     (when ||z|| > lam, else u=0)

and Newton iterations approach the root monotonically from the left because
phi is convex and decreasing.

Status codes returned by the kernels:
    0 converged (KKT residual <= tol), 1 sweep cap reached,
    2 non-finite values encountered, 3 unbounded group subproblem.
"""

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_MAXITER = 1
STATUS_NONFINITE = 2
STATUS_UNBOUNDED = 3

_DTOL = 1e-12


@njit(cache=True)
def _solve_group(d, z, lam, u):
    """Fill u with the exact subproblem minimizer in the eigenbasis.

    Returns False when the subproblem is unbounded below (rank-deficient
    quadratic with enough linear term along a null direction).
    """
    s = d.shape[0]
    znorm = 0.0
    for e in range(s):
        u[e] = 0.0
        znorm += z[e] * z[e]
    znorm = np.sqrt(znorm)
    if lam == 0.0:
        for e in range(s):
            if d[e] > _DTOL:
                u[e] = z[e] / d[e]
            elif abs(z[e]) > 1e-9:
                return False
        return True
    if znorm <= lam:
        return True
    dmax = 0.0
    const = 0.0
    for e in range(s):
        if d[e] > dmax:
            dmax = d[e]
        if d[e] <= _DTOL:
            const += (z[e] / lam) ** 2
    if dmax <= _DTOL or const >= 1.0:
        return False
    t = (znorm - lam) / dmax
    for _ in range(200):
        phi = 0.0
        dphi = 0.0
        for e in range(s):
            den = d[e] * t + lam
            r = z[e] / den
            phi += r * r
            dphi -= 2.0 * r * r * d[e] / den
        diff = phi - 1.0
        if abs(diff) <= 1e-14 or dphi == 0.0:
            break
        t_new = t - diff / dphi
        if t_new <= t:
            break
        t = t_new
    for e in range(s):
        u[e] = z[e] * t / (d[e] * t + lam)
    return True


@njit(cache=True)
def _kkt_residual(grad, beta, gptr, gblk, gcol, lamg):
    """Max over groups of the group-lasso stationarity violation."""
    worst = 0.0
    n_groups = gptr.shape[0] - 1
    for g in range(n_groups):
        lo, hi = gptr[g], gptr[g + 1]
        lam = lamg[g]
        bnorm = 0.0
        gnorm2 = 0.0
        for e in range(lo, hi):
            bb = beta[gblk[e], gcol[e]]
            bnorm += bb * bb
            ge = grad[gblk[e], gcol[e]]
            gnorm2 += ge * ge
        bnorm = np.sqrt(bnorm)
        if bnorm > 0.0:
            res = 0.0
            for e in range(lo, hi):
                val = grad[gblk[e], gcol[e]] + lam * beta[gblk[e], gcol[e]] / bnorm
                if abs(val) > res:
                    res = abs(val)
        else:
            res = np.sqrt(gnorm2) - lam
            if res < 0.0:
                res = 0.0
        if res > worst:
            worst = res
    return worst


@njit(cache=True)
def bcd_gram(A, b, beta, gptr, gblk, gcol, gdiag, uflat, uptr, dflat,
             lamg, tol, max_sweeps, objective_out):
    """Groupwise BCD for f(beta) = 0.5 sum_k beta_k' A_k beta_k - b_k' beta_k + pen.

    A     : (Kb, m, m) per-block symmetric quadratic terms (2 * scale * D'D)
    b     : (Kb, m) per-block linear terms (2 * scale * D'y)
    beta  : (Kb, m) coefficients, updated in place (warm starts allowed)
    Groups are CSR-encoded by (gptr, gblk, gcol).  gdiag[g] = 1 when the group
    quadratic is diagonal (all entries in distinct blocks); otherwise its
    eigendecomposition is packed row-major in uflat[uptr[g]:] with the
    eigenvalues in dflat[gptr[g]:gptr[g+1]].
    objective_out[sweep] receives the objective minus its data constant
    (0.5 <beta, grad - b> + penalty).

    Returns (status, sweeps, kkt_residual).
    """
    Kb, m = beta.shape
    n_groups = gptr.shape[0] - 1
    grad = np.empty((Kb, m))
    for k in range(Kb):
        grad[k] = A[k] @ beta[k] - b[k]

    smax = 1
    for g in range(n_groups):
        sz = gptr[g + 1] - gptr[g]
        if sz > smax:
            smax = sz
    v = np.empty(smax)
    z = np.empty(smax)
    dloc = np.empty(smax)
    uloc = np.empty(smax)
    unew = np.empty(smax)

    sweeps = 0
    status = STATUS_MAXITER
    kkt = np.inf
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        for g in range(n_groups):
            lo, hi = gptr[g], gptr[g + 1]
            s = hi - lo
            lam = lamg[g]
            if gdiag[g] == 1:
                for e in range(s):
                    k = gblk[lo + e]
                    j = gcol[lo + e]
                    dloc[e] = A[k, j, j]
                    z[e] = -grad[k, j] + dloc[e] * beta[k, j]
                if not _solve_group(dloc[:s], z[:s], lam, unew[:s]):
                    return STATUS_UNBOUNDED, sweeps, kkt
                for e in range(s):
                    uloc[e] = unew[e]
            else:
                # Q_g = V' diag(d) V with the rows of V being eigenvectors,
                # packed row-major in uflat[uptr[g]:].
                uoff = uptr[g]
                for e in range(s):
                    acc = 0.0
                    for e2 in range(s):
                        acc += uflat[uoff + e * s + e2] * beta[gblk[lo + e2], gcol[lo + e2]]
                    z[e] = dflat[lo + e] * acc  # z = diag(d) V beta_g
                # v = -grad_g + V' z  (= -grad_g + Q beta_g)
                for e in range(s):
                    acc = -grad[gblk[lo + e], gcol[lo + e]]
                    for e2 in range(s):
                        acc += uflat[uoff + e2 * s + e] * z[e2]
                    v[e] = acc
                # rotate into the eigenbasis: z = V v
                for e in range(s):
                    acc = 0.0
                    for e2 in range(s):
                        acc += uflat[uoff + e * s + e2] * v[e2]
                    z[e] = acc
                for e in range(s):
                    dloc[e] = dflat[lo + e]
                if not _solve_group(dloc[:s], z[:s], lam, unew[:s]):
                    return STATUS_UNBOUNDED, sweeps, kkt
                # back out: u = V' unew
                for e in range(s):
                    acc = 0.0
                    for e2 in range(s):
                        acc += uflat[uoff + e2 * s + e] * unew[e2]
                    uloc[e] = acc
            for e in range(s):
                k = gblk[lo + e]
                j = gcol[lo + e]
                delta = uloc[e] - beta[k, j]
                if delta != 0.0:
                    beta[k, j] = uloc[e]
                    grad[k] += A[k, j] * delta  # A symmetric: row j == column j
        if sweeps % 64 == 0:
            for k in range(Kb):
                grad[k] = A[k] @ beta[k] - b[k]
        obj = 0.0
        for k in range(Kb):
            for j in range(m):
                obj += beta[k, j] * (grad[k, j] - b[k, j])
        obj *= 0.5
        for g in range(n_groups):
            bn = 0.0
            for e in range(gptr[g], gptr[g + 1]):
                bb = beta[gblk[e], gcol[e]]
                bn += bb * bb
            obj += lamg[g] * np.sqrt(bn)
        objective_out[sweep] = obj
        if not np.isfinite(obj):
            return STATUS_NONFINITE, sweeps, kkt
        kkt = _kkt_residual(grad, beta, gptr, gblk, gcol, lamg)
        if kkt <= tol:
            status = STATUS_OK
            break
    return status, sweeps, kkt


@njit(cache=True)
def _kron_kkt(grad, B, gptr, gblk, grow, gcol, lamg):
    worst = 0.0
    n_groups = gptr.shape[0] - 1
    for g in range(n_groups):
        lo, hi = gptr[g], gptr[g + 1]
        lam = lamg[g]
        bnorm = 0.0
        gnorm2 = 0.0
        for e in range(lo, hi):
            bb = B[gblk[e], grow[e], gcol[e]]
            bnorm += bb * bb
            ge = grad[gblk[e], grow[e], gcol[e]]
            gnorm2 += ge * ge
        bnorm = np.sqrt(bnorm)
        if bnorm > 0.0:
            res = 0.0
            for e in range(lo, hi):
                val = grad[gblk[e], grow[e], gcol[e]] \
                    + lam * B[gblk[e], grow[e], gcol[e]] / bnorm
                if abs(val) > res:
                    res = abs(val)
        else:
            res = np.sqrt(gnorm2) - lam
            if res < 0.0:
                res = 0.0
        if res > worst:
            worst = res
    return worst


@njit(cache=True)
def kron_bcd(Sx2, W, C, B, gptr, gblk, grow, gcol, lamg, tol, max_sweeps,
             objective_out):
    """Groupwise BCD for the coupled regression-matrix quadratic.

    Minimizes, over the K matrices B[k] (p x q),

        0.5 sum_k <B_k, Sx2_k B_k W_k>  -  sum_k <B_k, C_k>  +  lam * pen

    with Sx2_k = (2/n) X_k'X_k, W_k = T_k T_k', C_k = (2/n) X_k'Y_k W_k,
    which is the fixed-Theta objective up to a data constant.  Group entries
    (gblk, grow, gcol) must lie in pairwise-distinct blocks within each group
    so that all group quadratics are diagonal.

    Returns (status, sweeps, kkt_residual).
    """
    K, p, q = B.shape
    n_groups = gptr.shape[0] - 1
    grad = np.empty((K, p, q))
    for k in range(K):
        grad[k] = Sx2[k] @ B[k] @ W[k] - C[k]

    smax = 1
    for g in range(n_groups):
        sz = gptr[g + 1] - gptr[g]
        if sz > smax:
            smax = sz
    z = np.empty(smax)
    dloc = np.empty(smax)
    unew = np.empty(smax)

    sweeps = 0
    status = STATUS_MAXITER
    kkt = np.inf
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        for g in range(n_groups):
            lo, hi = gptr[g], gptr[g + 1]
            s = hi - lo
            lam = lamg[g]
            for e in range(s):
                k = gblk[lo + e]
                i = grow[lo + e]
                j = gcol[lo + e]
                dloc[e] = Sx2[k, i, i] * W[k, j, j]
                z[e] = -grad[k, i, j] + dloc[e] * B[k, i, j]
            if not _solve_group(dloc[:s], z[:s], lam, unew[:s]):
                return STATUS_UNBOUNDED, sweeps, kkt
            for e in range(s):
                k = gblk[lo + e]
                i = grow[lo + e]
                j = gcol[lo + e]
                delta = unew[e] - B[k, i, j]
                if delta != 0.0:
                    B[k, i, j] = unew[e]
                    for r in range(p):
                        f = delta * Sx2[k, i, r]
                        if f != 0.0:
                            for c in range(q):
                                grad[k, r, c] += f * W[k, j, c]
        if sweeps % 16 == 0:
            for k in range(K):
                grad[k] = Sx2[k] @ B[k] @ W[k] - C[k]
        obj = 0.0
        for k in range(K):
            for i in range(p):
                for j in range(q):
                    obj += B[k, i, j] * (grad[k, i, j] - C[k, i, j])
        obj *= 0.5
        for g in range(n_groups):
            bn = 0.0
            for e in range(gptr[g], gptr[g + 1]):
                bb = B[gblk[e], grow[e], gcol[e]]
                bn += bb * bb
            obj += lamg[g] * np.sqrt(bn)
        objective_out[sweep] = obj
        if not np.isfinite(obj):
            return STATUS_NONFINITE, sweeps, kkt
        kkt = _kron_kkt(grad, B, gptr, gblk, grow, gcol, lamg)
        if kkt <= tol:
            status = STATUS_OK
            break
    return status, sweeps, kkt
