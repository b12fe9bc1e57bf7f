"""Scoring fitted models against simulation truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "ShapeMismatch",
    "ZeroTruth",
    "SupportMetrics",
    "ScoreCard",
    "support_metrics",
    "rel_frobenius",
    "score_arrays",
    "test_summary",
]

NONZERO_TOL = 1e-10


class ShapeMismatch(ValueError):
    pass


class ZeroTruth(ValueError):
    pass


class SupportMetrics(NamedTuple):
    tpr: float
    tnr: float
    mcc: float
    mcc_degenerate: bool = False


def support_metrics(est: np.ndarray, truth: np.ndarray,
                    threshold: float = NONZERO_TOL) -> SupportMetrics:
    """True positive rate, true negative rate and Matthews correlation.

    Supports are entries exceeding the threshold in magnitude.  A zero MCC
    denominator yields MCC = 0 with the degenerate flag set; an empty truth
    support (or empty complement) makes the corresponding rate vacuously 1.
    """
    est = np.asarray(est)
    truth = np.asarray(truth)
    if est.shape != truth.shape:
        raise ShapeMismatch(f"{est.shape} vs {truth.shape}")
    e = np.abs(est) > threshold
    t = np.abs(truth) > threshold
    tp = float(np.sum(e & t))
    tn = float(np.sum(~e & ~t))
    fp = float(np.sum(~t)) - tn
    fn = float(np.sum(t)) - tp
    tpr = tp / (tp + fn) if tp + fn > 0 else 1.0
    tnr = tn / (tn + fp) if tn + fp > 0 else 1.0
    denom2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom2 <= 0:
        return SupportMetrics(tpr, tnr, 0.0, True)
    mcc = (tp * tn - fp * fn) / np.sqrt(denom2)
    return SupportMetrics(tpr, tnr, float(mcc), False)


def rel_frobenius(est: np.ndarray, truth: np.ndarray) -> float:
    """||est - truth||_F / ||truth||_F."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ShapeMismatch(f"{est.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth)
    if denom == 0:
        raise ZeroTruth("truth matrix is identically zero")
    return float(np.linalg.norm(est - truth) / denom)


@dataclass
class ScoreCard:
    """Support and error metrics per condition plus their averages,
    optionally with empirical testing summaries over replications."""

    tpr_per_k: np.ndarray = None
    tnr_per_k: np.ndarray = None
    mcc_per_k: np.ndarray = None
    rf_per_k: np.ndarray = None
    tpr: float = np.nan
    tnr: float = np.nan
    mcc: float = np.nan
    rf: float = np.nan
    fdr_empirical: float = np.nan
    power_empirical: float = np.nan
    sim_power_empirical: float = np.nan
    size_empirical: float = np.nan


def score_arrays(est: np.ndarray, truth: np.ndarray,
                 threshold: float = NONZERO_TOL) -> ScoreCard:
    """Per-condition support/error metrics for stacked (K, ., .) arrays."""
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ShapeMismatch(f"{est.shape} vs {truth.shape}")
    K = est.shape[0]
    tpr = np.empty(K)
    tnr = np.empty(K)
    mcc = np.empty(K)
    rf = np.empty(K)
    for k in range(K):
        m = support_metrics(est[k], truth[k], threshold)
        tpr[k], tnr[k], mcc[k] = m.tpr, m.tnr, m.mcc
        rf[k] = rel_frobenius(est[k], truth[k])
    return ScoreCard(tpr_per_k=tpr, tnr_per_k=tnr, mcc_per_k=mcc, rf_per_k=rf,
                     tpr=float(tpr.mean()), tnr=float(tnr.mean()),
                     mcc=float(mcc.mean()), rf=float(rf.mean()))


def test_summary(alt_reports: Sequence[Sequence], truths: Sequence,
                 null_reports: Sequence[Sequence] | None = None) -> ScoreCard:
    """Empirical power, size, and FDR over replications.

    alt_reports[r][i] is the per-row test report (global_reject flag and the
    simultaneous rejection set) of replication r on the alternative data;
    truths[r].diff identifies the true differences.  null_reports, when
    given, holds the same structure from the null-companion runs and feeds
    the empirical size.  Global power pools alternative rows, simultaneous
    power pools true-alternative entries, and the FDR is the mean over rows
    and replications of the per-row false discovery proportion.
    """
    global_hits = []
    sim_hits = []
    fdps = []
    for reports, truth in zip(alt_reports, truths):
        diff = np.asarray(truth.diff)
        for rep in reports:
            i = rep.i
            row_alt = diff[i] != 0
            if row_alt.any():
                global_hits.append(bool(rep.global_reject))
            rej = np.zeros(diff.shape[1], dtype=bool)
            rej[np.asarray(rep.rejections, dtype=int)] = True
            if row_alt.any():
                sim_hits.extend(rej[row_alt].tolist())
            n_rej = int(rej.sum())
            false_rej = int((rej & ~row_alt).sum())
            fdps.append(false_rej / max(n_rej, 1))
    card = ScoreCard()
    card.power_empirical = float(np.mean(global_hits)) if global_hits else np.nan
    card.fdr_empirical = float(np.mean(fdps)) if fdps else np.nan
    if sim_hits:
        card.sim_power_empirical = float(np.mean(sim_hits))
    if null_reports is not None:
        null_flags = [bool(rep.global_reject) for reports in null_reports
                      for rep in reports]
        card.size_empirical = float(np.mean(null_flags)) if null_flags else np.nan
    return card
