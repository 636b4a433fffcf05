"""Sparse precision structures (RW2, ICAR, iid) and hyperprior densities.

Random-walk and spatial structure matrices are rank deficient; their kernels
are tracked explicitly so that soft constraints and rank-corrected Gaussian
densities can be applied downstream.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

DEFAULT_CONSTRAINT_WEIGHT = 1e6


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class PrecisionStructure:
    """A structure matrix K with its precision scalar and known kernel.

    The full (possibly singular) precision is ``kappa * K``; constraints are
    applied softly via :func:`apply_soft_constraint`.
    """

    kind: str  # "rw2" | "icar" | "iid"
    K: sp.csr_matrix
    kappa: float = 1.0
    null_space: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    soft_constraint_weight: float = DEFAULT_CONSTRAINT_WEIGHT

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def rank(self) -> int:
        return self.n - self.null_space.shape[1]

    def with_kappa(self, kappa: float) -> "PrecisionStructure":
        return PrecisionStructure(self.kind, self.K, kappa, self.null_space,
                                  self.soft_constraint_weight)


def rw2_structure(n_periods: int,
                  weight: float = DEFAULT_CONSTRAINT_WEIGHT) -> PrecisionStructure:
    """Structure matrix D'D of the second-difference operator on n points.

    Rank is n-2; the kernel is spanned by the constant and linear vectors.
    """
    if n_periods < 3:
        raise PriorError(f"RW2 needs at least 3 periods, got {n_periods}")
    n = n_periods
    D = sp.lil_matrix((n - 2, n))
    for t in range(n - 2):
        D[t, t] = 1.0
        D[t, t + 1] = -2.0
        D[t, t + 2] = 1.0
    K = (D.T @ D).tocsr()
    ones = np.ones(n)
    lin = np.arange(1.0, n + 1.0)
    null = np.column_stack([ones / np.linalg.norm(ones), _orth(lin, ones)])
    return PrecisionStructure("rw2", K, 1.0, null, weight)


def _orth(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    u = v - w * (v @ w) / (w @ w)
    return u / np.linalg.norm(u)


def icar_structure(graph,
                   weight: float = DEFAULT_CONSTRAINT_WEIGHT) -> PrecisionStructure:
    """ICAR structure matrix: degree on the diagonal, -1 between neighbors.

    Islands (regions with no neighbors) get K[r, r] = 1, which amounts to an
    iid effect for that region.
    """
    regions = list(graph.regions)
    n = len(regions)
    idx = {r: i for i, r in enumerate(regions)}
    K = sp.lil_matrix((n, n))
    islands = []
    for r in regions:
        i = idx[r]
        nbrs = graph.adjacency[r]
        if not nbrs:
            islands.append(r)
            K[i, i] = 1.0
            continue
        K[i, i] = float(len(nbrs))
        for rp in nbrs:
            K[i, idx[rp]] = -1.0
    if islands:
        log.warning("ICAR: %d island region(s) (%s) treated as iid effects",
                    len(islands), ", ".join(map(str, islands[:5])))
    # kernel: one indicator per connected component of non-island regions
    comps = _components(graph, islands)
    basis = []
    for comp in comps:
        v = np.zeros(n)
        for r in comp:
            v[idx[r]] = 1.0
        basis.append(v / np.linalg.norm(v))
    null = np.column_stack(basis) if basis else np.zeros((n, 0))
    return PrecisionStructure("icar", K.tocsr(), 1.0, null, weight)


def _components(graph, islands):
    seen = set(islands)
    comps = []
    for start in graph.regions:
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            r = stack.pop()
            comp.append(r)
            for rp in graph.adjacency[r]:
                if rp not in seen:
                    seen.add(rp)
                    stack.append(rp)
        comps.append(comp)
    return comps


def iid_structure(n: int) -> PrecisionStructure:
    return PrecisionStructure("iid", sp.eye(n, format="csr"), 1.0,
                              np.zeros((n, 0)))


def constraint_rows(ps: PrecisionStructure, sum_to_zero_only: bool = False) -> np.ndarray:
    """Constraint matrix A whose rows are softly forced to A @ x = 0.

    The first row is always the all-ones (sum-to-zero) row.  For RW2 the
    linear-contrast row is added as well unless ``sum_to_zero_only`` is set,
    so that the constrained precision is full rank.
    """
    n = ps.n
    rows = [np.ones(n)]
    if ps.kind == "rw2" and not sum_to_zero_only:
        rows.append(np.arange(1.0, n + 1.0) - (n + 1.0) / 2.0)
    return np.vstack(rows)


def apply_soft_constraint(ps: PrecisionStructure,
                          sum_to_zero_only: bool = False) -> np.ndarray:
    """Constrained precision Q = kappa*K + w*A'A (dense).

    With the default constraint rows, Q is positive definite for any
    kappa > 0 on RW2 and connected ICAR structures.
    """
    A = constraint_rows(ps, sum_to_zero_only=sum_to_zero_only)
    Q = ps.kappa * ps.K.toarray() + ps.soft_constraint_weight * (A.T @ A)
    return 0.5 * (Q + Q.T)


def sample_constrained(ps: PrecisionStructure, size: int, rng,
                       sum_to_zero_only: bool = False) -> np.ndarray:
    """Draw from N(0, Q^{-1}) with Q the softly constrained precision."""
    Q = apply_soft_constraint(ps, sum_to_zero_only=sum_to_zero_only)
    L = np.linalg.cholesky(Q)
    z = rng.standard_normal((ps.n, size))
    # x = L^{-T} z has covariance Q^{-1}
    from scipy.linalg import solve_triangular
    return solve_triangular(L.T, z, lower=False).T


@dataclass(frozen=True)
class HyperPrior:
    """PC / Gamma priors on precisions, Normal priors on fixed effects."""

    kind: str  # "pc" | "gamma" | "normal"
    u: float = 1.0       # pc: sd threshold
    alpha: float = 0.01  # pc: exceedance probability
    shape: float = 1.0   # gamma
    scale: float = 1.0   # gamma
    mean: float = 0.0    # normal
    sd: float = 1.0      # normal

    def __post_init__(self):
        if self.kind == "pc" and not (self.u > 0 and 0 < self.alpha < 1):
            raise PriorError("PC prior needs u > 0 and alpha in (0, 1)")
        if self.kind == "gamma" and not (self.shape > 0 and self.scale > 0):
            raise PriorError("Gamma prior needs positive shape and scale")
        if self.kind == "normal" and not self.sd > 0:
            raise PriorError("Normal prior needs positive sd")


def pc_rate(u: float, alpha: float) -> float:
    """Rate lambda of the exponential prior on the sd implied by Pr(sigma > u) = alpha."""
    return -math.log(alpha) / u


def log_hyperprior(hp: HyperPrior, value: float) -> float:
    """Log density of a hyperprior at ``value`` (precision or fixed effect).

    Out-of-support values return -inf.
    """
    if hp.kind == "pc":
        if value <= 0:
            log.warning("PC prior evaluated outside support at %g", value)
            return -math.inf
        lam = pc_rate(hp.u, hp.alpha)
        return math.log(lam / 2.0) - 1.5 * math.log(value) - lam / math.sqrt(value)
    if hp.kind == "gamma":
        if value < 0:
            log.warning("Gamma prior evaluated outside support at %g", value)
            return -math.inf
        sh, sc = hp.shape, hp.scale
        if value == 0:
            # finite only in the exponential case
            return -math.log(sc) if sh == 1.0 else -math.inf
        return ((sh - 1.0) * math.log(value) - value / sc
                - math.lgamma(sh) - sh * math.log(sc))
    if hp.kind == "normal":
        z = (value - hp.mean) / hp.sd
        return -0.5 * z * z - math.log(hp.sd) - 0.5 * math.log(2.0 * math.pi)
    raise PriorError(f"unknown hyperprior kind {hp.kind!r}")
