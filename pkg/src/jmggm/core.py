"""Shared domain types: paired two-layer datasets, group-sparsity structures,
fitted-model containers, and simulation ground truth.

Conventions used throughout the package:

* ``K`` conditions, ``n`` samples per condition, ``p`` upper-layer variables,
  ``q`` lower-layer variables.
* All indices are 0-based in memory; serialized files use 1-based indices.
* Group structures are partitions of the condition set ``{0..K-1}`` attached
  to variable pairs, stored sparsely as a preset plus per-pair overrides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "GroupStructureError",
    "OverlappingGroups",
    "IncompleteCover",
    "IndexOutOfRange",
    "PairGroups",
    "GroupStructure",
    "MultiDataset",
    "ModelEstimate",
    "SimTruth",
    "validate_groups",
]

Partition = tuple[tuple[int, ...], ...]


class GroupStructureError(ValueError):
    """Base class for invalid group structures."""


class OverlappingGroups(GroupStructureError):
    pass


class IncompleteCover(GroupStructureError):
    pass


class IndexOutOfRange(GroupStructureError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.flags.writeable = False
    return out


def _canon_partition(groups: Iterable[Iterable[int]]) -> Partition:
    return tuple(tuple(sorted(int(k) for k in g)) for g in groups)


def _check_partition(groups: Partition, K: int, where: str) -> None:
    seen: set[int] = set()
    for g in groups:
        if len(g) == 0:
            raise IncompleteCover(f"{where}: empty group in partition")
        for k in g:
            if not 0 <= k < K:
                raise IndexOutOfRange(f"{where}: condition index {k} outside 0..{K - 1}")
            if k in seen:
                raise OverlappingGroups(f"{where}: condition {k} appears in more than one group")
            seen.add(k)
    if len(seen) != K:
        missing = sorted(set(range(K)) - seen)
        raise IncompleteCover(f"{where}: conditions {missing} not covered")


@dataclass(frozen=True)
class PairGroups:
    """Partition of the condition set attached to every variable pair.

    ``preset`` gives the default partition: "all-shared" puts all K conditions
    in one group, "singleton" gives each condition its own group.  Pairs that
    deviate from the preset are listed in ``overrides``.  Pair keys for
    symmetric structures are canonicalized with i < i'.
    """

    K: int
    preset: str = "all-shared"
    overrides: Mapping[tuple[int, int], Partition] = field(default_factory=dict)
    symmetric: bool = True

    def __post_init__(self):
        if self.preset not in ("all-shared", "singleton"):
            raise GroupStructureError(f"unknown preset {self.preset!r}")
        canon = {}
        for pair, groups in self.overrides.items():
            i, j = (int(pair[0]), int(pair[1]))
            if self.symmetric:
                if i == j:
                    raise IndexOutOfRange(f"pair ({i},{j}): self-pairs carry no partition")
                if i > j:
                    i, j = j, i
            canon[(i, j)] = _canon_partition(groups)
        object.__setattr__(self, "overrides", canon)

    def _default(self) -> Partition:
        if self.preset == "all-shared":
            return (tuple(range(self.K)),)
        return tuple((k,) for k in range(self.K))

    def groups(self, i: int, j: int) -> Partition:
        """Partition of conditions for pair (i, j)."""
        if self.symmetric and i > j:
            i, j = j, i
        return self.overrides.get((i, j), self._default())


@dataclass(frozen=True)
class GroupStructure:
    """Group-sparsity structure for a two-layer model over K conditions.

    gx : partitions over upper-layer variable pairs (i, i'), i < i'
    gy : partitions over lower-layer variable pairs (j, j'), j < j'
    h  : partitions over between-layer cells (i, j), i in upper, j in lower
    """

    gx: PairGroups
    gy: PairGroups
    h: PairGroups

    def __post_init__(self):
        if not (self.gx.K == self.gy.K == self.h.K):
            raise GroupStructureError("gx, gy and h disagree on the number of conditions")
        if self.h.symmetric:
            object.__setattr__(self, "h", replace(self.h, symmetric=False))

    @property
    def K(self) -> int:
        return self.gx.K

    @classmethod
    def preset(cls, name: str, K: int) -> "GroupStructure":
        """Uniform structure: every partition equals the named preset."""
        return cls(
            gx=PairGroups(K, name),
            gy=PairGroups(K, name),
            h=PairGroups(K, name, symmetric=False),
        )

    def to_json(self) -> str:
        def encode(pg: PairGroups) -> dict:
            return {
                "preset": pg.preset,
                "overrides": [
                    {
                        "pair": [i + 1, j + 1],
                        "groups": [[k + 1 for k in g] for g in groups],
                    }
                    for (i, j), groups in sorted(pg.overrides.items())
                ],
            }

        payload = {"K": self.K, "x": encode(self.gx), "y": encode(self.gy), "h": encode(self.h)}
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroupStructure":
        payload = json.loads(text)
        K = int(payload["K"])

        def decode(obj: dict, symmetric: bool) -> PairGroups:
            overrides = {
                (entry["pair"][0] - 1, entry["pair"][1] - 1): tuple(
                    tuple(k - 1 for k in g) for g in entry["groups"]
                )
                for entry in obj.get("overrides", [])
            }
            return PairGroups(K, obj["preset"], overrides, symmetric=symmetric)

        return cls(
            gx=decode(payload["x"], True),
            gy=decode(payload["y"], True),
            h=decode(payload["h"], False),
        )


def validate_groups(gs: GroupStructure, p: int, q: int, K: int) -> GroupStructure:
    """Check all partition invariants of ``gs`` against the model dimensions.

    Returns ``gs`` unchanged when every override is a disjoint, covering
    partition of the conditions and every pair index is in range.  Raises
    OverlappingGroups, IncompleteCover, or IndexOutOfRange naming the
    offending pair otherwise.
    """
    if min(p, q, K) < 1:
        raise ValueError("dimensions must be positive")
    if gs.K != K:
        raise GroupStructureError(f"structure built for K={gs.K}, data has K={K}")

    def check(pg: PairGroups, hi_i: int, hi_j: int, name: str) -> None:
        for (i, j), groups in pg.overrides.items():
            if not (0 <= i < hi_i and 0 <= j < hi_j):
                raise IndexOutOfRange(f"{name} pair ({i},{j}) outside dimensions ({hi_i},{hi_j})")
            _check_partition(groups, K, f"{name} pair ({i},{j})")
        _check_partition(pg._default(), K, f"{name} preset")

    check(gs.gx, p, p, "gx")
    check(gs.gy, q, q, "gy")
    check(gs.h, p, q, "h")
    return gs


@dataclass(frozen=True)
class MultiDataset:
    """K paired sample matrices for a two-layer model.

    X[k] is n x p (upper layer), Y[k] is n x q (lower layer).  Columns are
    centered on ingestion; all matrices are read-only after construction.
    """

    X: tuple[np.ndarray, ...]
    Y: tuple[np.ndarray, ...]

    def __post_init__(self):
        X = tuple(_freeze(x) for x in self.X)
        Y = tuple(_freeze(y) for y in self.Y)
        if len(X) != len(Y) or not X:
            raise ValueError("need the same positive number of X and Y matrices")
        n, p = X[0].shape
        q = Y[0].shape[1]
        for k, (x, y) in enumerate(zip(X, Y)):
            if x.shape != (n, p):
                raise ValueError(f"X[{k}] has shape {x.shape}, expected {(n, p)}")
            if y.shape != (n, q):
                raise ValueError(f"Y[{k}] has shape {y.shape}, expected {(n, q)}")
            if not (np.isfinite(x).all() and np.isfinite(y).all()):
                raise ValueError(f"non-finite entries in condition {k}")
            for name, m in (("X", x), ("Y", y)):
                worst = np.abs(m.mean(axis=0)).max()
                if worst >= 1e-8:
                    raise ValueError(
                        f"{name}[{k}] columns not centered (max |mean| = {worst:.3g}); "
                        "use MultiDataset.from_arrays to center on ingestion"
                    )
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_arrays(cls, X: Sequence[np.ndarray], Y: Sequence[np.ndarray]) -> "MultiDataset":
        """Build a dataset, centering every column of every matrix."""
        Xc = [np.asarray(x, dtype=float) for x in X]
        Yc = [np.asarray(y, dtype=float) for y in Y]
        Xc = [x - x.mean(axis=0, keepdims=True) for x in Xc]
        Yc = [y - y.mean(axis=0, keepdims=True) for y in Yc]
        return cls(X=tuple(Xc), Y=tuple(Yc))

    @property
    def K(self) -> int:
        return len(self.X)

    @property
    def n(self) -> int:
        return self.X[0].shape[0]

    @property
    def p(self) -> int:
        return self.X[0].shape[1]

    @property
    def q(self) -> int:
        return self.Y[0].shape[1]


@dataclass(frozen=True)
class ModelEstimate:
    """Fitted two-layer model across K conditions.

    B        : (K, p, q) between-layer regression matrices
    theta    : (q, q-1, K) lower-layer neighborhood coefficients per node
    omega_y  : (K, q, q) lower-layer precision matrices (PD, symmetric)
    omega_x  : (K, p, p) upper-layer precision matrices (PD, symmetric)
    zeta     : (p, p-1, K) upper-layer neighborhood coefficients per node
    edges_y  : (K, q, q) boolean symmetric supports recorded at fit time
    edges_x  : (K, p, p) boolean symmetric supports recorded at fit time
    """

    B: np.ndarray
    theta: np.ndarray
    omega_y: np.ndarray
    omega_x: np.ndarray
    zeta: np.ndarray
    edges_y: np.ndarray
    edges_x: np.ndarray
    lambda_selected: float
    gamma_selected: float
    eta_selected: float
    iterations: int
    converged: bool
    ridge_applied: bool = False

    def __post_init__(self):
        for name in ("B", "theta", "omega_y", "omega_x", "zeta"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        for name in ("edges_y", "edges_x"):
            e = np.asarray(getattr(self, name), dtype=bool)
            e.flags.writeable = False
            object.__setattr__(self, name, e)
        for lam in (self.lambda_selected, self.gamma_selected, self.eta_selected):
            if lam < 0:
                raise ValueError("selected penalties must be nonnegative")
        for name in ("omega_y", "omega_x"):
            mats = getattr(self, name)
            for k, m in enumerate(mats):
                if not np.allclose(m, m.T, atol=1e-12, rtol=0.0):
                    raise ValueError(f"{name}[{k}] not symmetric")
                if np.linalg.eigvalsh(m)[0] <= 0:
                    raise ValueError(f"{name}[{k}] not positive definite")
        for k in range(self.omega_y.shape[0]):
            off = np.abs(self.omega_y[k]) > 1e-12
            np.fill_diagonal(off, False)
            if np.any(off & ~self.edges_y[k]):
                raise ValueError(f"omega_y[{k}] support leaks outside recorded edge set")

    @property
    def K(self) -> int:
        return self.B.shape[0]


@dataclass(frozen=True)
class SimTruth:
    """Ground-truth parameters used to score estimates.

    omega_x0 / omega_y0 hold the raw generated precision matrices; sigma_x0 /
    sigma_y0 the unit-diagonal covariances actually sampled from.  The
    effective precision of the sampled data is inv(sigma), a rescaling of the
    raw omega with identical support.
    """

    B0: np.ndarray
    omega_x0: np.ndarray
    omega_y0: np.ndarray
    sigma_x0: np.ndarray
    sigma_y0: np.ndarray
    seed: int
    pi_x: float
    pi_y: float
    pi: float
    diff: np.ndarray | None = None  # (p, q) difference matrix for K=2 testing sims

    def __post_init__(self):
        for name in ("B0", "omega_x0", "omega_y0", "sigma_x0", "sigma_y0"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if self.diff is not None:
            object.__setattr__(self, "diff", _freeze(self.diff))

    def effective_precision_y(self) -> np.ndarray:
        """True precision of the sampled lower-layer noise, per condition."""
        return np.stack([np.linalg.inv(s) for s in self.sigma_y0])

    def effective_precision_x(self) -> np.ndarray:
        return np.stack([np.linalg.inv(s) for s in self.sigma_x0])

    def null_rows(self) -> np.ndarray:
        """Indices of upper-layer rows with no true difference (testing sims)."""
        if self.diff is None:
            raise ValueError("not a testing-simulation truth")
        return np.where(~self.diff.astype(bool).any(axis=1))[0]
