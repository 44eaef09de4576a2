"""Shape metrics of occupied sets and the named ensemble experiments.

For a finite occupied set A let M be the largest norm of a site of A and m*
the smallest norm of a site not in A (0 when the origin is missing). All
metrics reduce to these two numbers:

* delta_in  = max(0, r(t) - m*),  delta_out = max(0, M - r(t));
* A is eps-symmetric iff M / (1 + eps) < m* / (1 - eps).

Both are kept as squared integer norms so comparisons are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .brw import Estimate
from .engine import Bidla, ParticleConfig, stabilize
from .lattice import FiniteDomain, Site, ball_sites, neighbors, origin, sq_threshold, sqnorm, volume_radius
from .stacks import InstructionStacks


@dataclass
class ShapeMetrics:
    t: int
    volume: int
    r_of_t: float
    delta_in: float
    delta_out: float
    eps_symmetric: dict[float, bool] = field(default_factory=dict)


def extreme_sqnorms(A: Iterable[Site], d: int) -> tuple[int, int]:
    """(max squared norm over A, min squared norm over sites not in A); max is -1 for empty A."""
    A = A if isinstance(A, (set, frozenset)) else set(A)
    o = origin(d)
    if o not in A:
        return max((sqnorm(z) for z in A), default=-1), 0
    max_sq = max(sqnorm(z) for z in A)
    # a nearest missing site always has a neighbour in A (step towards the origin)
    min_missing = min(sqnorm(y) for z in A for y in neighbors(z) if y not in A)
    return max_sq, min_missing


def deviations_from_sq(max_sq: int, min_missing_sq: int, t: float, d: int) -> tuple[float, float]:
    r = volume_radius(t, d)
    M = math.sqrt(max_sq) if max_sq > 0 else 0.0
    return max(0.0, r - math.sqrt(min_missing_sq)), max(0.0, M - r)


def deviations(A: Iterable[Site], t: float, d: int) -> tuple[float, float]:
    """(delta_in, delta_out) of A against the ball of volume t."""
    return deviations_from_sq(*extreme_sqnorms(A, d), t, d)


def eps_symmetric_from_sq(max_sq: int, min_missing_sq: int, eps) -> bool:
    """M (1 - eps) < m* (1 + eps), squared and in exact rationals.

    A float eps is read by its decimal repr, so 0.2 means 1/5 and not the
    nearest binary double (which matters on exact ties such as M = 3, m* = 2).
    """
    e = Fraction(repr(eps)) if isinstance(eps, float) else Fraction(eps)
    if not 0 < e < 1:
        raise ValueError("eps must lie in (0, 1)")
    if max_sq < 0:
        raise ValueError("the occupied set must be nonempty")
    return max_sq * (1 - e) ** 2 < min_missing_sq * (1 + e) ** 2


def is_eps_symmetric(A: Iterable[Site], eps, d: int | None = None) -> bool:
    A = set(A)
    if not A:
        raise ValueError("the occupied set must be nonempty")
    d = d or len(next(iter(A)))
    return eps_symmetric_from_sq(*extreme_sqnorms(A, d), eps)


def shape_metrics(A: Iterable[Site], t: int, d: int, eps_list=(0.1, 0.25, 0.5)) -> ShapeMetrics:
    A = set(A)
    mx, mn = extreme_sqnorms(A, d)
    di, do = deviations_from_sq(mx, mn, t, d)
    flags = {e: eps_symmetric_from_sq(mx, mn, e) for e in eps_list} if A else {}
    return ShapeMetrics(t, len(A), volume_radius(t, d), di, do, flags)


def bidla_metrics(b: Bidla, eps_list=(0.1, 0.25, 0.5)) -> ShapeMetrics:
    """Metrics of the current cluster of a running :class:`Bidla`, from its incremental extremes."""
    di, do = deviations_from_sq(b.max_sq, b.min_missing_sq, b.t, b.d)
    flags = {e: eps_symmetric_from_sq(b.max_sq, b.min_missing_sq, e) for e in eps_list} if b.size else {}
    return ShapeMetrics(b.t, b.size, volume_radius(b.t, b.d), di, do, flags)


# -- brute-force oracles --------------------------------------------------------

def _box(A: set, d: int) -> list[Site]:
    reach = max((max(abs(c) for c in z) for z in A), default=0) + 2
    return ball_sites(reach * math.sqrt(d) + 1, d)


def deviations_bruteforce(A: Iterable[Site], t: float, d: int) -> tuple[float, float]:
    """Scan delta over the grid of distinct site norms, testing each inclusion by enumeration.

    Ball radii on the grid are sqrt(k) for integers k, handled as squared
    thresholds so the scan is exact.
    """
    A = set(A)
    r = volume_radius(t, d)
    box = _box(A, d)
    ks = sorted({sqnorm(z) for z in box})

    def ball_in_A(k):  # {z : |z|^2 < k} inside A
        return all(z in A for z in box if sqnorm(z) < k)

    # inner: the smallest delta on the grid {0} u {r - sqrt(k) >= 0} with B_(r - delta) in A
    cands = [(0.0, sq_threshold(r))] + [(r - math.sqrt(k), k) for k in ks if k <= r * r]
    delta_in = min(dl for dl, k in cands if ball_in_A(k))
    # outer: the largest sqrt(k) - r for which A is not inside B_sqrt(k)
    delta_out = 0.0
    for k in ks:
        if math.sqrt(k) > r and any(sqnorm(z) >= k for z in A):
            delta_out = max(delta_out, math.sqrt(k) - r)
    return delta_in, delta_out


def eps_symmetric_bruteforce(A: Iterable[Site], eps: float, d: int) -> bool:
    """Try candidate radii r and test B_((1-eps)r) in A in B_((1+eps)r) by enumeration."""
    A = set(A)
    box = _box(A, d)
    occ = [math.sqrt(sqnorm(z)) for z in A]
    missing = [math.sqrt(sqnorm(z)) for z in box if z not in A]
    m_star = min(missing) if origin(d) in A else 0.0
    M = max(occ)
    lo, hi = M / (1 + eps), m_star / (1 - eps)
    cands = {hi, hi * (1 - 1e-12), lo + 1e-9, (lo + hi) / 2}
    for s in occ + missing:
        cands.update({s, s / (1 - eps), s / (1 + eps) + 1e-9})
    for r in cands:
        if r <= 0:
            continue
        inner = sq_threshold(Fraction((1 - eps) * r))
        outer = sq_threshold(Fraction((1 + eps) * r))
        if all(z in A for z in box if sqnorm(z) < inner) and all(sqnorm(z) < outer for z in A):
            return True
    return False


# -- experiments ----------------------------------------------------------------

@dataclass
class CoveringResult:
    estimate: Estimate
    failures: int
    replicas: int


def covering_experiment(eta: ParticleConfig, n: int, replicas: int, master_seed: int, d: int,
                        law="binary") -> CoveringResult:
    """Frequency of B_n not being covered by the full stabilization of eta."""
    if replicas < 1:
        raise ValueError("need at least one replica")
    half = Fraction(n, 2)
    if any(sqnorm(z) >= sq_threshold(half) for z in eta.counts):
        raise ValueError("eta must be supported in B_{n/2}")
    base = InstructionStacks.create(master_seed, d, law)
    target = ball_sites(n, d)
    fails = 0
    for r in range(replicas):
        if eta.total == 0:
            fails += 1
            continue
        res = stabilize(eta, None, base.replica(r), policy="fast")
        occ = res.stable_config.counts
        if any(z not in occ for z in target):
            fails += 1
    p = fails / replicas
    return CoveringResult(Estimate(p, math.sqrt(p * (1 - p) / replicas), replicas), fails, replicas)


@dataclass
class InnerBoundResult:
    fill_frequency: float
    frozen_counts: np.ndarray
    frozen_mean: float
    reference_scale: float  # n^(d - 1 + alpha), for comparison only
    replicas: int


def inner_bound_experiment(n: int, alpha_exp: float, replicas: int, master_seed: int, d: int = 3,
                           law="binary") -> InnerBoundResult:
    """|B_n| particles at the origin stabilized with freezing on the boundary of B_n.

    Records whether B_(n - n^alpha) is filled and how many particles froze.
    """
    if replicas < 1:
        raise ValueError("need at least one replica")
    if not 0.5 < alpha_exp < 1:
        raise ValueError("alpha_exp must lie in (1/2, 1)")
    if d < 3:
        raise ValueError("the inner-bound experiment is set in d >= 3")
    K = FiniteDomain.ball(n, d)
    inner = ball_sites(n - n**alpha_exp, d)
    eta = ParticleConfig({origin(d): len(K)})
    base = InstructionStacks.create(master_seed, d, law)
    filled = 0
    frozen = np.zeros(replicas, dtype=np.int64)
    for r in range(replicas):
        res = stabilize(eta, K, base.replica(r), policy="fast")
        occ = res.stable_config.counts
        filled += all(z in occ for z in inner)
        frozen[r] = res.frozen.total()
    return InnerBoundResult(filled / replicas, frozen, float(frozen.mean()),
                            n ** (d - 1 + alpha_exp), replicas)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])
