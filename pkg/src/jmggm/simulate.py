"""Synthetic two-layer benchmark data.

Precision matrices are built from shared sparse blocks across conditions
(positive definiteness via the 1 + |smallest eigenvalue| diagonal rule), the
covariances are the correlation-normalized inverses, and the lower layer is
generated as Y = X B + E with shared-support regression matrices.  A K=2
variant adds a random difference matrix to the second regression matrix for
power studies, together with a null companion dataset for size studies.

Randomness: one root seed feeds a SeedSequence whose children are spawned in
a fixed, documented order (upper precisions, lower precisions, regression
matrices, differences/misspecification, X draws, E draws, then the null
companion's X and E).  Within each matrix family, per-condition generators
are spawned in condition order, so every draw is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import GroupStructure, MultiDataset, PairGroups, SimTruth
from .solvers import NotPD

__all__ = [
    "SimConfig",
    "TestingSim",
    "gen_shared_precision",
    "precision_to_cov",
    "gen_estimation_dataset",
    "gen_testing_dataset",
    "fig3_pair_groups",
]

_FIG3_UPPER = ((0, 1), (2, 3), (4,))
_FIG3_LOWER = ((0, 2, 4), (1, 3))


@dataclass(frozen=True)
class SimConfig:
    """Benchmark generator settings.

    structure: "fig3-blocks" (half-and-half shared block pattern, defined for
    K=5 and degrading to "all-shared" otherwise), "identical-pairs" or
    "all-shared" (one shared pattern for all conditions).
    value_range gives the magnitude interval of nonzero entries with random
    signs; literal_interval instead samples the asymmetric interval
    [-1, 0.5] u [0.5, 1] that the uncorrected text displays.
    diff_probs are the probabilities of a -1, +1, 0 entry in the K=2
    difference matrix.  misspec_prob zeroes individual within-group entries
    of the regression matrices to emulate group misspecification.
    """

    p: int
    q: int
    n: int
    K: int = 5
    pi_x: float = None
    pi_y: float = None
    pi: float = None
    structure: str = "fig3-blocks"
    seed: int = 0
    value_range: tuple[float, float] = (0.5, 1.0)
    literal_interval: bool = False
    diff_probs: tuple[float, float, float] = (0.1, 0.1, 0.8)
    misspec_prob: float = 0.0

    def __post_init__(self):
        if min(self.p, self.q, self.n, self.K) < 1:
            raise ValueError("dimensions must be positive")
        defaults = {"pi_x": 5 / self.p, "pi_y": 5 / self.q, "pi": 5 / self.p}
        for name, val in defaults.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, val)
        for name in ("pi_x", "pi_y", "pi", "misspec_prob"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if abs(sum(self.diff_probs) - 1.0) > 1e-12:
            raise ValueError("diff_probs must sum to 1")


def _draw_values(rng: np.random.Generator, size: int, value_range, literal: bool):
    lo, hi = value_range
    if literal:
        # length-weighted uniform over [-1, 0.5] u [0.5, 1]
        u = rng.uniform(0.0, 2.0, size)
        vals = np.where(u < 1.5, -1.0 + u, 0.5 + (u - 1.5))
        return vals
    mags = rng.uniform(lo, hi, size)
    signs = rng.choice([-1.0, 1.0], size)
    return mags * signs


def _region_masks(dim: int):
    """Upper region: any index in the first half; lower: both in second half."""
    half = dim // 2
    second = np.arange(dim) >= half
    lower = np.logical_and.outer(second, second)
    upper = ~lower
    np.fill_diagonal(upper, False)
    np.fill_diagonal(lower, False)
    return np.triu(upper, 1), np.triu(lower, 1)


def _condition_partitions(dim: int, K: int, preset: str):
    """Per-region condition partitions and the matching pair partitions."""
    if preset == "fig3-blocks" and K == 5:
        return [_FIG3_UPPER, _FIG3_LOWER]
    all_shared = (tuple(range(K)),)
    return [all_shared, all_shared]


def gen_shared_precision(dim: int, K: int, preset: str, pi: float,
                         rng: np.random.Generator,
                         value_range=(0.5, 1.0), literal_interval=False):
    """K precision matrices with block-shared sparsity patterns.

    Within each region, every condition group shares one sparse symmetric
    block (support and values); each matrix is assembled from its groups'
    blocks and made PD by setting the diagonal to 1 + |smallest eigenvalue|,
    so the smallest eigenvalue of the output is at least 1.

    Returns (omegas (K, dim, dim), edges (K, dim, dim) boolean).
    """
    regions = _region_masks(dim)
    parts = _condition_partitions(dim, K, preset)
    off = np.zeros((K, dim, dim))
    for region_mask, partition in zip(regions, parts):
        ii, jj = np.nonzero(region_mask)
        for group in partition:
            active = rng.random(ii.size) < pi
            vals = np.zeros(ii.size)
            vals[active] = _draw_values(rng, int(active.sum()), value_range,
                                        literal_interval)
            for k in group:
                off[k][ii, jj] = vals
    off = off + np.swapaxes(off, 1, 2)
    omegas = np.empty_like(off)
    for k in range(K):
        lam_min = np.linalg.eigvalsh(off[k])[0]
        omegas[k] = off[k] + (1.0 + abs(lam_min)) * np.eye(dim)
    edges = np.abs(off) > 0
    return omegas, edges


def fig3_pair_groups(dim: int, K: int, preset: str) -> PairGroups:
    """Pair partitions matching the generator's shared-block layout."""
    if preset != "fig3-blocks" or K != 5:
        return PairGroups(K, "all-shared")
    upper_mask, lower_mask = _region_masks(dim)
    overrides = {}
    for i, j in zip(*np.nonzero(upper_mask)):
        overrides[(int(i), int(j))] = _FIG3_UPPER
    for i, j in zip(*np.nonzero(lower_mask)):
        overrides[(int(i), int(j))] = _FIG3_LOWER
    return PairGroups(K, "all-shared", overrides)


def precision_to_cov(omega: np.ndarray) -> np.ndarray:
    """Correlation-normalized inverse: unit-diagonal PD covariance."""
    omega = np.asarray(omega, dtype=float)
    vals = np.linalg.eigvalsh(omega)
    if vals[0] <= 0:
        raise NotPD("precision matrix is not positive definite")
    inv = np.linalg.inv(omega)
    d = np.sqrt(np.diag(inv))
    sigma = inv / np.outer(d, d)
    return (sigma + sigma.T) / 2.0


def _sample_rows(rng: np.random.Generator, n: int, sigma: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(sigma)
    return rng.standard_normal((n, sigma.shape[0])) @ L.T


def _gen_B(rng, p, q, K, pi, value_range, literal, misspec_prob, misspec_rng):
    sup = rng.random((p, q)) < pi
    B = np.zeros((K, p, q))
    for k in range(K):
        B[k][sup] = _draw_values(rng, int(sup.sum()), value_range, literal)
    if misspec_prob > 0:
        drop = misspec_rng.random((K, p, q)) < misspec_prob
        B[drop & (B != 0)] = 0.0
    return B


def gen_estimation_dataset(cfg: SimConfig):
    """Estimation benchmark draw: (MultiDataset, SimTruth, GroupStructure)."""
    root = np.random.SeedSequence(cfg.seed)
    ss = root.spawn(8)
    rng_ox, rng_oy, rng_b, rng_d = (np.random.default_rng(s) for s in ss[:4])
    rng_x = [np.random.default_rng(s) for s in ss[4].spawn(cfg.K)]
    rng_e = [np.random.default_rng(s) for s in ss[5].spawn(cfg.K)]

    omega_x, _ = gen_shared_precision(cfg.p, cfg.K, cfg.structure, cfg.pi_x,
                                      rng_ox, cfg.value_range, cfg.literal_interval)
    omega_y, _ = gen_shared_precision(cfg.q, cfg.K, cfg.structure, cfg.pi_y,
                                      rng_oy, cfg.value_range, cfg.literal_interval)
    sigma_x = np.stack([precision_to_cov(om) for om in omega_x])
    sigma_y = np.stack([precision_to_cov(om) for om in omega_y])
    B0 = _gen_B(rng_b, cfg.p, cfg.q, cfg.K, cfg.pi, cfg.value_range,
                cfg.literal_interval, cfg.misspec_prob, rng_d)

    X = [_sample_rows(rng_x[k], cfg.n, sigma_x[k]) for k in range(cfg.K)]
    E = [_sample_rows(rng_e[k], cfg.n, sigma_y[k]) for k in range(cfg.K)]
    Y = [X[k] @ B0[k] + E[k] for k in range(cfg.K)]
    data = MultiDataset.from_arrays(X, Y)

    truth = SimTruth(B0=B0, omega_x0=omega_x, omega_y0=omega_y,
                     sigma_x0=sigma_x, sigma_y0=sigma_y, seed=cfg.seed,
                     pi_x=cfg.pi_x, pi_y=cfg.pi_y, pi=cfg.pi)
    gs = GroupStructure(
        gx=fig3_pair_groups(cfg.p, cfg.K, cfg.structure),
        gy=fig3_pair_groups(cfg.q, cfg.K, cfg.structure),
        h=PairGroups(cfg.K, "all-shared", symmetric=False),
    )
    return data, truth, gs


@dataclass(frozen=True)
class TestingSim:
    data: MultiDataset
    truth: SimTruth
    null_data: MultiDataset
    null_truth: SimTruth
    groups: GroupStructure


def gen_testing_dataset(cfg: SimConfig) -> TestingSim:
    """Testing benchmark draw (K forced to 2).

    The second regression matrix is the first plus a random {-1, +1, 0}
    difference; the null companion shares all truths but has a zero
    difference and fresh X and E draws.
    """
    if cfg.K != 2:
        cfg = replace(cfg, K=2)
    root = np.random.SeedSequence(cfg.seed)
    ss = root.spawn(8)
    rng_ox, rng_oy, rng_b, rng_d = (np.random.default_rng(s) for s in ss[:4])
    rng_x = [np.random.default_rng(s) for s in ss[4].spawn(2)]
    rng_e = [np.random.default_rng(s) for s in ss[5].spawn(2)]
    rng_x0 = [np.random.default_rng(s) for s in ss[6].spawn(2)]
    rng_e0 = [np.random.default_rng(s) for s in ss[7].spawn(2)]

    structure = cfg.structure if cfg.structure != "fig3-blocks" else "identical-pairs"
    omega_x, _ = gen_shared_precision(cfg.p, 2, structure, cfg.pi_x, rng_ox,
                                      cfg.value_range, cfg.literal_interval)
    omega_y, _ = gen_shared_precision(cfg.q, 2, structure, cfg.pi_y, rng_oy,
                                      cfg.value_range, cfg.literal_interval)
    sigma_x = np.stack([precision_to_cov(om) for om in omega_x])
    sigma_y = np.stack([precision_to_cov(om) for om in omega_y])

    sup = rng_b.random((cfg.p, cfg.q)) < cfg.pi
    b1 = np.zeros((cfg.p, cfg.q))
    b1[sup] = _draw_values(rng_b, int(sup.sum()), cfg.value_range,
                           cfg.literal_interval)
    diff = rng_d.choice([-1.0, 1.0, 0.0], size=(cfg.p, cfg.q), p=cfg.diff_probs)
    B = np.stack([b1, b1 + diff])
    B_null = np.stack([b1, b1.copy()])

    def build(rngs_x, rngs_e, Bmats):
        X = [_sample_rows(rngs_x[k], cfg.n, sigma_x[k]) for k in range(2)]
        E = [_sample_rows(rngs_e[k], cfg.n, sigma_y[k]) for k in range(2)]
        Y = [X[k] @ Bmats[k] + E[k] for k in range(2)]
        return MultiDataset.from_arrays(X, Y)

    data = build(rng_x, rng_e, B)
    null_data = build(rng_x0, rng_e0, B_null)

    truth = SimTruth(B0=B, omega_x0=omega_x, omega_y0=omega_y,
                     sigma_x0=sigma_x, sigma_y0=sigma_y, seed=cfg.seed,
                     pi_x=cfg.pi_x, pi_y=cfg.pi_y, pi=cfg.pi, diff=diff)
    null_truth = SimTruth(B0=B_null, omega_x0=omega_x, omega_y0=omega_y,
                          sigma_x0=sigma_x, sigma_y0=sigma_y, seed=cfg.seed,
                          pi_x=cfg.pi_x, pi_y=cfg.pi_y, pi=cfg.pi,
                          diff=np.zeros((cfg.p, cfg.q)))
    gs = GroupStructure(
        gx=PairGroups(2, "all-shared"),
        gy=PairGroups(2, "all-shared"),
        h=PairGroups(2, "all-shared", symmetric=False),
    )
    return TestingSim(data, truth, null_data, null_truth, gs)
