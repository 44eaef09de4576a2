"""Critical branching random walks restricted to a domain.

A BRW started at x in K moves by simple random walk steps, each individual
replaced by k children with law nu. Individuals stepping out of K are frozen
on the exterior boundary (pioneers). Local times count individuals per site.

``run_brw`` is a plain depth-first exploration in Python; ``brw_ensemble``
runs many independent replicas through the compiled kernel. Replica r of an
ensemble with master seed s uses ``InstructionStacks(s).replica(r)``, so a
single replica can always be re-run with the Python driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .kernel import DEFAULT_BUDGET, LOG_FULL, NEED_GROW, OK, BudgetExceeded, Grid, brw_batch
from .lattice import FiniteDomain, Site, exterior_boundary, neighbors, origin, sq_threshold
from .offspring import OffspringLaw, make_law
from .stacks import InstructionStacks, instruction_at

MIN_SURVIVAL_REPLICAS = 1000


@dataclass
class LocalTimeField:
    interior: dict[Site, int] = field(default_factory=dict)
    boundary: dict[Site, int] = field(default_factory=dict)

    def total_pioneers(self) -> int:
        return sum(self.boundary.values())


@dataclass(frozen=True)
class PioneerStats:
    total: int
    support: int
    square_sum: int

    def cauchy_schwarz_holds(self) -> bool:
        return self.total * self.total <= self.square_sum * self.support


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    count: int  # number of samples the estimate averages over


def run_brw(start: Site, K: FiniteDomain, stacks: InstructionStacks,
            budget: int = DEFAULT_BUDGET) -> LocalTimeField:
    """Local times of one BRW from ``start``, frozen on the exterior boundary of K.

    Individuals are explored depth-first from an explicit frontier; the n-th
    individual processed at x uses instruction (x, n).
    """
    start = tuple(start)
    if start not in K:
        raise ValueError(f"start {start} is not in the domain")
    out = LocalTimeField()
    inner, bnd = out.interior, out.boundary
    frontier = [start]
    used = 0
    while frontier:
        x = frontier.pop()
        if x not in K:
            bnd[x] = bnd.get(x, 0) + 1
            continue
        if used >= budget:
            raise BudgetExceeded(f"BRW exceeded {budget} individuals", partial=out)
        used += 1
        j = inner.get(x, 0) + 1
        inner[x] = j
        for s in reversed(instruction_at(stacks, x, j).steps):
            frontier.append(tuple(a + b for a, b in zip(x, s)))
    out.boundary = dict(sorted(bnd.items()))
    return out


def stats_of(field_: LocalTimeField) -> PioneerStats:
    vals = list(field_.boundary.values())
    return PioneerStats(sum(vals), sum(1 for v in vals if v > 0), sum(v * v for v in vals))


def pioneer_stats(start: Site, K: FiniteDomain, stacks: InstructionStacks) -> PioneerStats:
    """Total, support size and square sum of the pioneers of one BRW."""
    return stats_of(run_brw(start, K, stacks))


@dataclass
class BrwEnsemble:
    """Per-replica pioneer statistics plus per-site sums of local times."""

    d: int
    replicas: int
    grid: Grid
    thr: int
    totals: np.ndarray
    supports: np.ndarray
    sqsums: np.ndarray
    sum_odo: np.ndarray
    sum_odo2: np.ndarray
    sum_fr: np.ndarray
    sum_fr2: np.ndarray
    sum_fr4: np.ndarray

    def _cell(self, z: Site) -> int:
        if max(abs(c) for c in z) >= self.grid.L:
            raise ValueError(f"site {z} is outside the simulated region")
        return self.grid.index(z)

    def _mean_se(self, s1: float, s2: float) -> Estimate:
        n = self.replicas
        m = s1 / n
        var = max(s2 / n - m * m, 0.0)
        return Estimate(m, math.sqrt(var / max(n - 1, 1)), n)

    def local_time(self, z: Site) -> Estimate:
        """Mean local time at z (interior visits in K, pioneer count on the boundary)."""
        i = self._cell(z)
        if self.grid.sqnorm[i] < self.thr:
            return self._mean_se(float(self.sum_odo[i]), float(self.sum_odo2[i]))
        return self._mean_se(float(self.sum_fr[i]), float(self.sum_fr2[i]))

    def local_time_square(self, z: Site) -> Estimate:
        """Mean of the squared pioneer count at a boundary site z."""
        i = self._cell(z)
        return self._mean_se(float(self.sum_fr2[i]), float(self.sum_fr4[i]))

    def pioneer_mean(self) -> Estimate:
        t = self.totals.astype(np.float64)
        return self._mean_se(t.sum(), (t * t).sum())

    def survival(self) -> Estimate:
        n = self.replicas
        s = int(np.count_nonzero(self.totals))
        p = s / n
        return Estimate(p, math.sqrt(p * (1 - p) / n), n)

    def stats(self, r: int) -> PioneerStats:
        return PioneerStats(int(self.totals[r]), int(self.supports[r]), int(self.sqsums[r]))


def brw_ensemble(R, d: int, replicas: int, master_seed: int, law: OffspringLaw | str = "binary",
                 start: Site | None = None, first_replica: int = 0,
                 budget: int = DEFAULT_BUDGET) -> BrwEnsemble:
    """Run ``replicas`` independent BRWs from ``start`` frozen on the boundary of B_R."""
    if replicas < 1:
        raise ValueError("need at least one replica")
    if not isinstance(law, OffspringLaw):
        law = make_law(law)
    start = tuple(start) if start is not None else origin(d)
    thr = sq_threshold(R)
    if sum(c * c for c in start) >= thr:
        raise ValueError("start must lie inside the ball")
    L = math.isqrt(max(thr - 1, 0)) + 3
    g = Grid(d, L)
    n = g.size
    active = np.zeros(n, dtype=np.int32)
    odo = np.zeros(n, dtype=np.int64)
    frozen = np.zeros(n, dtype=np.int64)
    stack = np.zeros(n, dtype=np.int64)
    flog = np.zeros(4096, dtype=np.int64)
    tlog = np.zeros(n, dtype=np.int64)
    totals = np.zeros(replicas, dtype=np.int64)
    supports = np.zeros(replicas, dtype=np.int64)
    sqsums = np.zeros(replicas, dtype=np.int64)
    sums = [np.zeros(n, dtype=np.int64) for _ in range(4)]
    sum_fr4 = np.zeros(n, dtype=np.float64)
    s = g.index(start)
    r = first_replica
    stop = first_replica + replicas
    while r < stop:
        status, r = brw_batch(
            np.uint64(master_seed), r, stop, s, thr, g.sqnorm, g.strides, g.n, g.L, g.d,
            law.code, law.cdf, budget, active, odo, frozen, stack, flog, tlog,
            totals[r - first_replica:], supports[r - first_replica:], sqsums[r - first_replica:],
            *sums, sum_fr4,
        )
        if status == OK:
            break
        if status == LOG_FULL:
            flog = np.zeros(2 * len(flog), dtype=np.int64)
        elif status == NEED_GROW:  # cannot happen for a ball that fits, kept as a guard
            raise RuntimeError("BRW left the preallocated grid")
        else:
            raise BudgetExceeded(f"replica {r} exceeded the toppling budget {budget}")
    return BrwEnsemble(d, replicas, g, thr, totals, supports, sqsums, *sums, sum_fr4)


def survival_probability_estimate(R, d: int, replicas: int, master_seed: int = 0,
                                  law: OffspringLaw | str = "binary") -> Estimate:
    """P(some pioneer reaches the boundary of B_R) for a BRW from the origin, with binomial SE."""
    if replicas < MIN_SURVIVAL_REPLICAS:
        raise ValueError(f"need at least {MIN_SURVIVAL_REPLICAS} replicas, got {replicas}")
    if R < 2:
        raise ValueError("R must be at least 2")
    return brw_ensemble(R, d, replicas, master_seed, law).survival()


@dataclass(frozen=True)
class WindowEstimate:
    value: float | None  # None when no replica survived
    se: float | None
    survivors: int
    replicas: int


def window_fraction(totals: np.ndarray, R, alpha: float, beta: float) -> WindowEstimate:
    """P(total in [alpha R^2, beta R^2] | total > 0) from a sample of pioneer totals."""
    if not 0 <= alpha <= beta:
        raise ValueError("need 0 <= alpha <= beta")
    alive = totals[totals > 0]
    n = len(alive)
    if n == 0:
        return WindowEstimate(None, None, 0, len(totals))
    r2 = float(R) ** 2
    hit = np.count_nonzero((alive >= alpha * r2) & (alive <= beta * r2))
    p = hit / n
    return WindowEstimate(p, math.sqrt(p * (1 - p) / n), n, len(totals))


def conditioned_pioneer_window(R, alpha: float, beta: float, replicas: int, d: int = 2,
                               master_seed: int = 0, law: OffspringLaw | str = "binary") -> WindowEstimate:
    """Empirical P(total pioneers in [alpha R^2, beta R^2] | at least one pioneer)."""
    if not 0 <= alpha < beta:
        raise ValueError("need 0 <= alpha < beta")
    ens = brw_ensemble(R, d, replicas, master_seed, law)
    return window_fraction(ens.totals, R, alpha, beta)


def conditioned_brw(start: Site, K: FiniteDomain, stacks: InstructionStacks,
                    max_attempts: int = 10**7) -> tuple[LocalTimeField, int]:
    """A BRW conditioned to produce a pioneer, by rejection over replicas 0, 1, 2, ...

    Returns the accepted run and the number of attempts it took.
    """
    for attempt in range(1, max_attempts + 1):
        f = run_brw(start, K, stacks.replica(attempt - 1))
        if f.boundary:
            return f, attempt
    raise RuntimeError(f"no surviving BRW in {max_attempts} attempts")


def empirical_mgf(totals: np.ndarray, R, lambdas) -> np.ndarray:
    """Sample mean of exp(lambda * total / R^2) for each lambda."""
    x = np.asarray(totals, dtype=np.float64) / float(R) ** 2
    return np.array([float(np.mean(np.exp(lam * x))) for lam in np.atleast_1d(lambdas)])


def exact_no_pioneer_probability(K: FiniteDomain, law: OffspringLaw | str = "binary",
                                 tol: float = 1e-15, max_iter: int = 10**6) -> dict[Site, float]:
    """q(x) = P(BRW from x has no pioneer), the minimal fixed point of

        q(x) = f( mean over neighbours y of q(y) ),  q = 0 outside K,

    with f the offspring generating function, found by monotone iteration
    from q = 0.
    """
    if not isinstance(law, OffspringLaw):
        law = make_law(law)
    pts = K.sites()
    index = {z: i for i, z in enumerate(pts)}
    rows, cols = [], []
    for i, z in enumerate(pts):
        for y in neighbors(z):
            j = index.get(y)
            if j is not None:
                rows.append(i)
                cols.append(j)
    P = sp.csr_matrix((np.full(len(rows), 1.0 / (2 * K.d)), (rows, cols)), shape=(len(pts), len(pts)))
    pmf = np.asarray(law.pmf)
    q = np.zeros(len(pts))
    for _ in range(max_iter):
        new = np.polynomial.polynomial.polyval(P @ q, pmf)
        done = np.max(np.abs(new - q)) < tol
        q = new
        if done:
            break
    else:
        raise RuntimeError("generating-function iteration did not converge")
    return {z: float(q[i]) for z, i in index.items()}


def exact_survival_probability(R, d: int, law: OffspringLaw | str = "binary") -> float:
    """Exact P(at least one pioneer on the boundary of B_R) for a BRW from the origin."""
    return 1.0 - exact_no_pioneer_probability(FiniteDomain.ball(R, d), law)[origin(d)]


def boundary_of_ball(R, d: int) -> list[Site]:
    return exterior_boundary(FiniteDomain.ball(R, d))
