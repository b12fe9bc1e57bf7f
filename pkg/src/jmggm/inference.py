"""Debiased inference on between-layer edges: row debiasing, the global
chi-square test of row equality across two conditions, simultaneous
entrywise tests with a false-discovery-rate threshold, and within-row
thresholding of the regression estimates.

The debiasing correction projects the fit residuals onto each upper-layer
variable's neighborhood-regression residual, reusing the coefficients
already computed by the upper-layer joint fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2, norm

from .core import ModelEstimate, MultiDataset
from .solvers import NotPD

__all__ = [
    "DegenerateProjection",
    "DegenerateVariance",
    "KMismatch",
    "DebiasedRow",
    "GlobalTestResult",
    "TestReport",
    "debias_row",
    "global_test",
    "pairwise_stats",
    "fdr_threshold",
    "simultaneous_test",
    "threshold_rows",
]


class DegenerateProjection(RuntimeError):
    """A variable is numerically collinear with its neighborhood fit."""


class DegenerateVariance(RuntimeError):
    pass


class KMismatch(ValueError):
    """Pairwise tests require exactly two conditions."""


@dataclass(frozen=True)
class DebiasedRow:
    """Debiased row estimates and their scaling factors.

    c holds the K debiased row vectors (K, q); t the projection inner
    products; s the projection residual scales; m = sqrt(n) t / s the
    normalizing factors, an identity kept exact by construction.
    """

    i: int
    c: np.ndarray
    m: np.ndarray
    t: np.ndarray
    s: np.ndarray
    n: int

    def __post_init__(self):
        if np.any(self.s <= 0):
            raise DegenerateVariance("projection residual scale must be positive")
        expected = np.sqrt(self.n) * self.t / self.s
        if not np.array_equal(expected, self.m):
            raise ValueError("m must equal sqrt(n) t / s exactly")

    @property
    def K(self) -> int:
        return self.c.shape[0]


def debias_row(data: MultiDataset, est: ModelEstimate, i: int) -> DebiasedRow:
    """Debias row i of every condition's regression matrix.

    The correction adds, per condition, the fit residuals projected onto the
    residual of X_i regressed on its neighborhood:
    c = b_i + (X_i - X_{-i} zeta_i)' (Y - X B) / (n t).
    """
    K, n, p = data.K, data.n, data.p
    if not 0 <= i < p:
        raise IndexError(f"row {i} outside 0..{p - 1}")
    others = np.concatenate([np.arange(i), np.arange(i + 1, p)])
    c = np.empty((K, data.q))
    t = np.empty(K)
    s = np.empty(K)
    for k in range(K):
        xi = data.X[k][:, i]
        r = xi - data.X[k][:, others] @ est.zeta[i][:, k]
        t[k] = float(r @ xi) / n
        if abs(t[k]) < 1e-10:
            raise DegenerateProjection(
                f"row {i}, condition {k}: projection inner product {t[k]:.2e}")
        s[k] = np.sqrt(float(r @ r) / n)
        resid = data.Y[k] - data.X[k] @ est.B[k]
        c[k] = est.B[k][i, :] + (r @ resid) / (n * t[k])
    m = np.sqrt(n) * t / s
    return DebiasedRow(i=i, c=c, m=m, t=t, s=s, n=n)


@dataclass(frozen=True)
class GlobalTestResult:
    i: int
    statistic: float
    df: int
    threshold: float
    reject: bool
    alpha: float


def _sigma_y(omega_y: np.ndarray):
    """PD inverses of the two precision matrices via Cholesky."""
    out = []
    for k in range(2):
        m = np.asarray(omega_y[k], dtype=float)
        try:
            cf = cho_factor((m + m.T) / 2)
        except np.linalg.LinAlgError as err:
            raise NotPD(f"omega_y[{k}] is not positive definite") from err
        out.append(cho_solve(cf, np.eye(m.shape[0])))
    return out


def global_test(row: DebiasedRow, omega_y: np.ndarray, alpha: float) -> GlobalTestResult:
    """Chi-square test of equality of row i across the two conditions.

    The statistic is the squared Mahalanobis norm of the debiased row
    difference under the pooled covariance sum_k Sigma_y^k / m_k^2; the null
    is rejected at the upper 1-alpha chi-square quantile with q degrees of
    freedom.
    """
    if row.K != 2:
        raise KMismatch(f"global test needs K=2, got K={row.K}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    sig = _sigma_y(omega_y)
    pooled = sig[0] / row.m[0] ** 2 + sig[1] / row.m[1] ** 2
    diff = row.c[0] - row.c[1]
    try:
        cf = cho_factor((pooled + pooled.T) / 2)
    except np.linalg.LinAlgError as err:
        raise NotPD("pooled covariance is not positive definite") from err
    stat = float(diff @ cho_solve(cf, diff))
    q = diff.size
    thr = float(chi2.ppf(1 - alpha, q))
    return GlobalTestResult(i=row.i, statistic=stat, df=q, threshold=thr,
                            reject=bool(stat >= thr), alpha=alpha)


def pairwise_stats(row: DebiasedRow, omega_y: np.ndarray) -> np.ndarray:
    """Entrywise standardized differences of the debiased rows (length q)."""
    if row.K != 2:
        raise KMismatch(f"pairwise statistics need K=2, got K={row.K}")
    sig = _sigma_y(omega_y)
    var = np.diag(sig[0]) / row.m[0] ** 2 + np.diag(sig[1]) / row.m[1] ** 2
    if np.any(var <= 0) or not np.all(np.isfinite(var)):
        raise DegenerateVariance("nonpositive pooled variance")
    return (row.c[0] - row.c[1]) / np.sqrt(var)


def fdr_threshold(d: np.ndarray, alpha: float) -> float:
    """Smallest threshold whose normal tail bound controls the FDR at alpha.

    tau = inf{ tau : 1 - Phi(tau) <= alpha/(2q) * max(#{|d_j| >= tau}, 1) }.
    The infimum is attained either at one of the sorted |d_j| or at one of
    the quantiles Phi^{-1}(1 - alpha m / (2q)) for m = 0..q rejections, so
    scanning that candidate set is exact.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    d = np.abs(np.asarray(d, dtype=float).ravel())
    q = d.size
    levels = alpha / (2 * q) * np.maximum(np.arange(q + 1), 1)
    quantiles = norm.ppf(1 - np.clip(levels, 0.0, 1.0))
    candidates = np.concatenate([d, quantiles])
    candidates = candidates[np.isfinite(candidates)]
    best = np.inf
    for tau in candidates:
        if tau >= best:
            continue
        count = int(np.sum(d >= tau))
        if 1 - norm.cdf(tau) <= alpha / (2 * q) * max(count, 1):
            best = tau
    return float(best)


@dataclass(frozen=True)
class TestReport:
    """Global and simultaneous test results for one upper-layer row."""

    i: int
    D: float
    df: int
    global_reject: bool
    d: np.ndarray
    tau_hat: float
    rejections: np.ndarray
    alpha: float

    def __post_init__(self):
        expected = np.flatnonzero(np.abs(self.d) >= self.tau_hat)
        if not np.array_equal(np.sort(np.asarray(self.rejections)), expected):
            raise ValueError("rejections must equal {j : |d_j| >= tau_hat}")
        if self.D < 0:
            raise ValueError("global statistic must be nonnegative")


def simultaneous_test(row: DebiasedRow, omega_y: np.ndarray, alpha: float) -> TestReport:
    """Global test plus FDR-thresholded entrywise tests for one row."""
    gres = global_test(row, omega_y, alpha)
    d = pairwise_stats(row, omega_y)
    tau = fdr_threshold(d, alpha)
    rejections = np.flatnonzero(np.abs(d) >= tau)
    return TestReport(i=row.i, D=gres.statistic, df=gres.df,
                      global_reject=gres.reject, d=d, tau_hat=tau,
                      rejections=rejections, alpha=alpha)


def threshold_rows(est: ModelEstimate, data: MultiDataset, alpha: float) -> np.ndarray:
    """Within-row FDR thresholding of the regression matrices.

    Per row and condition, the statistics sqrt(omega_jj) * m_i * c_ij feed
    the same threshold rule as the simultaneous tests; entries whose
    statistic falls below the row threshold are zeroed.  Returns the
    thresholded (K, p, q) stack.
    """
    K, p, q = est.B.shape
    out = np.array(est.B)
    omega_diag = np.stack([np.diag(est.omega_y[k]) for k in range(K)])
    if np.any(omega_diag <= 0):
        raise DegenerateVariance("precision diagonal must be positive")
    root = np.sqrt(omega_diag)
    for i in range(p):
        row = debias_row(data, est, i)
        for k in range(K):
            w = root[k] * row.m[k] * row.c[k]
            tau = fdr_threshold(w, alpha)
            out[k, i, :] = np.where(np.abs(w) >= tau, out[k, i, :], 0.0)
    return out
