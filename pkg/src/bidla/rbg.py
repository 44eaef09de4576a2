"""Random Barrier Growth (RBG) and its iteration through shells.

One shell from radius R1 to R2 processes the particles on the exterior
boundary of B_R1 one at a time. Particle t draws a barrier height Z_t with
P(Z = h) proportional to h^(d-1), h = 1..R2-R1, and runs a BRW frozen on the
boundary of B_(R1+Z_t). Its pioneers then split:

* pioneers landing on a site already in the aggregate are *green* and
  continue as BRWs frozen on the boundary of B_R2;
* at each newly hit site one pioneer settles (the first one generated) and
  the others are *red*, continuing the same way.

All BRWs run on a shared :class:`~bidla.kernel.Walker`, so the whole
process is one acceptable toppling sequence on the instruction stacks and
its odometer can be compared with the legal stabilization of the same
particles.
"""

from __future__ import annotations

import bisect
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .engine import ParticleConfig, stabilize
from .kernel import DEFAULT_BUDGET, Walker
from .lattice import FiniteDomain, Site, exterior_boundary, neighbors, origin, sq_threshold, sqnorm
from .stacks import STREAM_BARRIER, STREAM_PLACEMENT, InstructionStacks, fresh_stream

DEFAULT_KAPPA = 4.0
DEFAULT_SHELL_CAP = 1000


@lru_cache(maxsize=None)
def _bernoulli_plus(n: int) -> tuple[Fraction, ...]:
    # B_0..B_n with B_1 = +1/2 (Akiyama-Tanigawa)
    out, A = [], [Fraction(0)] * (n + 1)
    for m in range(n + 1):
        A[m] = Fraction(1, m + 1)
        for j in range(m, 0, -1):
            A[j - 1] = j * (A[j - 1] - A[j])
        out.append(A[0])
    return tuple(out)


@lru_cache(maxsize=None)
def _faulhaber(p: int) -> tuple[tuple[int, ...], int]:
    # integer coefficients c_j and denominator D with sum_{r<=H} r^p = sum_j c_j H^(p+1-j) / D
    B = _bernoulli_plus(p)
    coeffs = [Fraction(math.comb(p + 1, j)) * B[j] / (p + 1) for j in range(p + 1)]
    D = math.lcm(*(c.denominator for c in coeffs))
    return tuple(int(c * D) for c in coeffs), D


def power_sum(H: int, p: int) -> int:
    """sum_{r=1}^H r^p in closed form (Faulhaber)."""
    if H <= 0:
        return 0
    coeffs, D = _faulhaber(p)
    num = sum(c * H ** (p + 1 - j) for j, c in enumerate(coeffs))
    q, rem = divmod(num, D)
    if rem:
        raise ArithmeticError("power sum is not an integer")
    return q


@dataclass(frozen=True)
class BarrierLaw:
    """P(Z = h) = h^(d-1) / sum_{r=1}^H r^(d-1), h = 1..H, held exactly."""

    H: int
    d: int
    normalizer: int

    def weight(self, h: int) -> int:
        return h ** (self.d - 1) if 1 <= h <= self.H else 0

    def pmf(self, h: int) -> Fraction:
        return Fraction(self.weight(h), self.normalizer)

    def table(self) -> list[Fraction]:
        return [self.pmf(h) for h in range(1, self.H + 1)]

    @property
    def _cumulative(self) -> list[int]:
        cum = self.__dict__.get("_cum")
        if cum is None:
            cum, s = [], 0
            for h in range(1, self.H + 1):
                s += self.weight(h)
                cum.append(s)
            object.__setattr__(self, "_cum", cum)
        return cum

    def sample(self, rng: np.random.Generator) -> int:
        """Exact draw: a uniform integer below the normalizer, inverted on the integer cdf."""
        if self.normalizer >= 1 << 62:
            raise OverflowError("barrier normalizer too large for exact sampling")
        u = int(rng.integers(self.normalizer))
        return bisect.bisect_right(self._cumulative, u) + 1


def barrier_pmf(H: int, d: int) -> BarrierLaw:
    if H < 1:
        raise ValueError("shell width H must be at least 1")
    if d < 1:
        raise ValueError("dimension must be at least 1")
    return BarrierLaw(int(H), int(d), power_sum(int(H), int(d) - 1))


def shell_width(N_prev: int, d: int, kappa: float = DEFAULT_KAPPA) -> int:
    """ceil((kappa * N * log(N + 1)^beta)^(1/d)), beta = 1 in d = 3 and 0 otherwise, natural log."""
    if N_prev < 1:
        raise ValueError("shell width is undefined once no particle is left")
    beta = 1 if d == 3 else 0
    x = kappa * N_prev * math.log(N_prev + 1) ** beta
    h = math.ceil(x ** (1.0 / d))
    # guard the float root near exact integers
    if h > 1 and (h - 1) ** d >= x:
        h -= 1
    elif h**d < x:
        h += 1
    return max(h, 1)


def on_sphere_boundary(z: Site, R) -> bool:
    """z lies on the exterior boundary of B_R."""
    thr = sq_threshold(R)
    return sqnorm(z) >= thr and any(sqnorm(y) < thr for y in neighbors(z))


@dataclass
class RbgShellState:
    R1: int
    R2: int
    aggregate: set[Site] = field(default_factory=set)
    barriers: list[int] = field(default_factory=list)
    green_counts: list[int] = field(default_factory=list)
    red_counts: list[int] = field(default_factory=list)
    N2: int = 0
    t: int = 0


def _take_pioneers(w: Walker) -> list[int]:
    log = w.take_frozen_log()
    w.frozen[log] = 0
    return log.tolist()


def rbg_shell(eta: ParticleConfig, R1: int, R2: int, stacks: InstructionStacks,
              rng: np.random.Generator | None = None, walker: Walker | None = None,
              budget: int = DEFAULT_BUDGET) -> tuple[ParticleConfig, RbgShellState]:
    """Run one RBG shell; returns the escaping particles on the boundary of B_R2 and the state."""
    if R2 <= R1:
        raise ValueError("need R2 > R1")
    for z in eta.counts:
        if not on_sphere_boundary(z, R1):
            raise ValueError(f"particle at {z} is not on the boundary of B_{R1}")
    rng = rng if rng is not None else fresh_stream(stacks, STREAM_BARRIER)
    w = walker if walker is not None else Walker(stacks, L=R2 + 3)
    w.ensure(R2 + 2)
    law = barrier_pmf(R2 - R1, stacks.d)
    thr2 = sq_threshold(R2)
    state = RbgShellState(R1, R2)
    escaping: Counter = Counter()
    A = state.aggregate

    def continue_from(cells: list[int]) -> int:
        if not cells:
            return 0
        for c in cells:
            w.add_active(c)
        w.run(thr2, budget=budget)
        out = _take_pioneers(w)
        for c in out:
            escaping[c] += 1
        return len(out)

    for z in eta.labels():
        state.t += 1
        Z = law.sample(rng)
        state.barriers.append(Z)
        w.add_active(w.grid.index(z))
        w.run(sq_threshold(R1 + Z), budget=budget)
        pioneers = _take_pioneers(w)
        green, red, new = [], [], []
        seen = set()
        for c in pioneers:
            if c in A:
                green.append(c)
            elif c in seen:
                red.append(c)
            else:
                seen.add(c)
                new.append(c)
        for c in new:
            w.resting[c] += 1
            w.arrival[c] = state.t
        A.update(new)
        if R1 + Z == R2:
            # already on the outer boundary: nothing left to run
            for c in green + red:
                escaping[c] += 1
            g, r = len(green), len(red)
        else:
            g = continue_from(green)
            r = continue_from(red)
        state.green_counts.append(g)
        state.red_counts.append(r)
        state.N2 += g + r
    state.aggregate = {w.grid.site(c) for c in A}
    out = ParticleConfig({w.grid.site(c): n for c, n in escaping.items()})
    assert out.total == state.N2
    return out, state


@dataclass
class ShellsState:
    radii: list[int]
    N: list[int]
    H: list[int]
    kappa: float
    beta: int
    alpha: float
    green_sums: list[int] = field(default_factory=list)
    red_sums: list[int] = field(default_factory=list)
    T_alpha: int | None = None  # None encodes +infinity
    T_end: int | None = None  # None when the shell cap was hit first
    capped: bool = False

    @property
    def blew_up_before_end(self) -> bool:
        return self.T_alpha is not None and (self.T_end is None or self.T_alpha < self.T_end)


def rbg_through_shells(eta0: ParticleConfig, R0: int, kappa: float, alpha: float,
                       stacks: InstructionStacks, rng: np.random.Generator | None = None,
                       shell_cap: int = DEFAULT_SHELL_CAP, walker: Walker | None = None,
                       budget: int = DEFAULT_BUDGET) -> ShellsState:
    """Iterate RBG shells of width shell_width(N_{t-1}) until no particle is left or the cap is hit."""
    rng = rng if rng is not None else fresh_stream(stacks, STREAM_BARRIER)
    d = stacks.d
    N0 = eta0.total
    st = ShellsState([R0], [N0], [], kappa, 1 if d == 3 else 0, alpha)
    if N0 == 0:
        st.T_end = 0
        return st
    w = walker if walker is not None else Walker(stacks, L=R0 + 8)
    eta, R = eta0, R0
    for t in range(1, shell_cap + 1):
        H = shell_width(eta.total, d, kappa)
        eta, s = rbg_shell(eta, R, R + H, stacks, rng, w, budget)
        R += H
        st.radii.append(R)
        st.H.append(H)
        st.N.append(eta.total)
        st.green_sums.append(sum(s.green_counts))
        st.red_sums.append(sum(s.red_counts))
        if st.T_alpha is None and eta.total > alpha * N0:
            st.T_alpha = t
        if eta.total == 0:
            st.T_end = t
            return st
    st.capped = True
    return st


def uniform_on_sphere_boundary(n: int, R, d: int, rng: np.random.Generator) -> ParticleConfig:
    """n particles placed i.i.d. uniformly on the exterior boundary of B_R."""
    sites = exterior_boundary(FiniteDomain.ball(R, d))
    picks = rng.integers(len(sites), size=n)
    return ParticleConfig(Counter(sites[i] for i in picks.tolist()))


def contraction_ratios(d: int, N1: int, R1: int, H: int, replicas: int, master_seed: int,
                       law="binary") -> np.ndarray:
    """N2 / N1 for independent RBG shells from B_R1 to B_(R1+H).

    Replica r uses the stacks of replica r; its N1 starting particles are
    placed uniformly on the boundary of B_R1 from the placement stream.
    """
    base = InstructionStacks.create(master_seed, d, law)
    out = np.empty(replicas)
    for r in range(replicas):
        stacks = base.replica(r)
        eta = uniform_on_sphere_boundary(N1, R1, d, fresh_stream(stacks, STREAM_PLACEMENT))
        esc, _ = rbg_shell(eta, R1, R1 + H, stacks, fresh_stream(stacks, STREAM_BARRIER))
        out[r] = esc.total / N1
    return out


@dataclass
class CouplingResult:
    """Acceptable (RBG) realization versus legal stabilization on the same stacks."""

    acceptable_odometer: dict[Site, int]
    legal_odometer: dict[Site, int]
    acceptable_config: dict[Site, int]
    legal_config: dict[Site, int]
    shells: ShellsState
    complete: bool  # the RBG emptied itself, so its sequence is stabilizing

    def dominates(self) -> bool:
        a = self.acceptable_odometer
        return all(a.get(x, 0) >= v for x, v in self.legal_odometer.items())

    @staticmethod
    def _inside(odo: dict, D) -> bool:
        thr = sq_threshold(D)
        return all(sqnorm(x) < thr for x, v in odo.items() if v > 0)

    def acceptable_inside(self, D) -> bool:
        return self._inside(self.acceptable_odometer, D)

    def legal_inside(self, D) -> bool:
        return self._inside(self.legal_odometer, D)


def coupling_instance(stacks: InstructionStacks, n: int = 5, R_pre: int = 2,
                      kappa: float = DEFAULT_KAPPA, shell_cap: int = DEFAULT_SHELL_CAP,
                      budget: int = DEFAULT_BUDGET) -> CouplingResult:
    """n particles at the origin: freeze on the boundary of B_R_pre, then RBG through shells.

    The first stage is the legal stabilization inside B_R_pre; the second is
    the RBG started from the frozen particles. Together they form one
    acceptable toppling sequence, compared here with the legal
    stabilization of the same n particles on the same stacks.
    """
    d = stacks.d
    w = Walker(stacks, L=R_pre + 8)
    o = w.grid.index(origin(d))
    if n > 0:
        w.resting[o] = 1
        w.add_active(o, n - 1)
    w.run(sq_threshold(R_pre), settle=True, budget=budget)
    w.take_settle_log()
    frozen = w.frozen_sites()
    w.frozen[:] = 0
    w.take_frozen_log()
    shells = rbg_through_shells(ParticleConfig(frozen), R_pre, kappa, math.inf, stacks,
                                fresh_stream(stacks, STREAM_BARRIER), shell_cap, w, budget)
    legal = stabilize(ParticleConfig({origin(d): n}), None, stacks, policy="fast", budget=budget)
    return CouplingResult(
        acceptable_odometer=w.odometer(),
        legal_odometer=legal.odometer.uses,
        acceptable_config=w.resting_sites(),
        legal_config=legal.stable_config.counts,
        shells=shells,
        complete=not shells.capped and not w.active.any(),
    )
