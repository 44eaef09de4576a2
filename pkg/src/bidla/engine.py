"""Particle configurations, topplings, stabilization and the BIDLA process.

Two drivers share the same instruction stacks:

* a pure-Python reference stabilizer working on dicts, with several toppling
  orders (lexicographic, depth-first, random), used as the oracle;
* compiled drivers on a dense grid (``policy="fast"`` and :class:`Bidla`).

Because the j-th toppling at x always uses instruction (x, j), every legal
order gives the same final configuration and odometer, which is what the
tests check bit for bit.
"""

from __future__ import annotations

import heapq
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kernel import DEFAULT_BUDGET, BudgetExceeded, Walker
from .lattice import FiniteDomain, Site, origin, sq_threshold, sqnorm
from .stacks import STREAM_POLICY, InstructionStacks, fresh_stream, instruction_at

__all__ = [
    "BudgetExceeded",
    "Bidla",
    "FrozenBoundary",
    "JumpChain",
    "Odometer",
    "ParticleConfig",
    "StabilizationResult",
    "ToppleError",
    "bidla_step",
    "drain",
    "jump_chain",
    "replay",
    "stabilize",
    "topple",
]

POLICIES = ("lex", "dfs", "random", "fast")
MASS_CHECK_EVERY = 10**6


class ToppleError(ValueError):
    """Toppling a site that holds too few particles for the requested mode."""


class ParticleConfig:
    """Finitely supported map site -> number of particles, with cached total."""

    __slots__ = ("counts", "total")

    def __init__(self, counts: Mapping[Site, int] | None = None):
        self.counts: dict[Site, int] = {}
        self.total = 0
        for z, n in (counts or {}).items():
            self.add(tuple(z), int(n))

    @classmethod
    def single(cls, site: Site, n: int = 1) -> "ParticleConfig":
        return cls({site: n})

    def add(self, z: Site, n: int = 1) -> None:
        if n < 0:
            raise ValueError("particle counts are nonnegative")
        if n:
            self.counts[z] = self.counts.get(z, 0) + n
            self.total += n

    def remove(self, z: Site, n: int = 1) -> None:
        have = self.counts.get(z, 0)
        if n > have:
            raise ToppleError(f"cannot remove {n} particles from {z} holding {have}")
        if have == n:
            self.counts.pop(z, None)
        else:
            self.counts[z] = have - n
        self.total -= n

    def __getitem__(self, z: Site) -> int:
        return self.counts.get(z, 0)

    def __eq__(self, other) -> bool:
        return isinstance(other, ParticleConfig) and self.counts == other.counts

    def __repr__(self) -> str:
        return f"ParticleConfig({dict(sorted(self.counts.items()))})"

    def copy(self) -> "ParticleConfig":
        out = ParticleConfig()
        out.counts = dict(self.counts)
        out.total = self.total
        return out

    def support(self) -> list[Site]:
        return sorted(self.counts)

    def occupied(self) -> frozenset[Site]:
        return frozenset(self.counts)

    def is_stable(self, K: FiniteDomain | None = None) -> bool:
        return all(n <= 1 for z, n in self.counts.items() if K is None or z in K)

    def labels(self) -> list[Site]:
        """One entry per particle, lexicographic by site (the canonical labelling)."""
        return [z for z in sorted(self.counts) for _ in range(self.counts[z])]


@dataclass
class Odometer:
    uses: dict[Site, int] = field(default_factory=dict)

    def __getitem__(self, x: Site) -> int:
        return self.uses.get(x, 0)

    def bump(self, x: Site) -> int:
        j = self.uses.get(x, 0) + 1
        self.uses[x] = j
        return j

    def total(self) -> int:
        return sum(self.uses.values())

    def support(self) -> set[Site]:
        return {x for x, v in self.uses.items() if v > 0}

    def dominates(self, other: "Odometer") -> bool:
        """self(x) >= other(x) for every x."""
        return all(self[x] >= v for x, v in other.uses.items())

    def copy(self) -> "Odometer":
        return Odometer(dict(self.uses))


@dataclass
class FrozenBoundary:
    frozen: dict[Site, int] = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.frozen.values())

    def add(self, z: Site, n: int = 1) -> None:
        self.frozen[z] = self.frozen.get(z, 0) + n


@dataclass
class StabilizationResult:
    stable_config: ParticleConfig
    frozen: FrozenBoundary
    odometer: Odometer
    topplings_performed: int
    net_births: int = 0  # sum over used instructions of (k - 1)

    def same_outcome(self, other: "StabilizationResult") -> bool:
        return (
            self.stable_config == other.stable_config
            and self.frozen.frozen == other.frozen.frozen
            and self.odometer.uses == other.odometer.uses
        )


def _inside(K: FiniteDomain | None, z: Site) -> bool:
    return K is None or z in K


def topple(config: ParticleConfig, odometer: Odometer, x: Site, stacks: InstructionStacks,
           mode: str = "legal", K: FiniteDomain | None = None,
           frozen: FrozenBoundary | None = None) -> tuple[ParticleConfig, Odometer]:
    """Use the next instruction at x; mutates and returns (config, odometer).

    Children landing outside K go to ``frozen`` when it is given, otherwise
    into the configuration.
    """
    n = config[x]
    if mode == "legal":
        if n <= 1:
            raise ToppleError(f"legal toppling needs more than one particle at {x}, found {n}")
    elif mode == "acceptable":
        if n < 1:
            raise ToppleError(f"acceptable toppling needs a particle at {x}")
    else:
        raise ValueError(f"unknown toppling mode {mode!r}")
    ins = instruction_at(stacks, x, odometer[x] + 1)
    odometer.bump(x)
    config.remove(x)
    for s in ins.steps:
        y = tuple(a + b for a, b in zip(x, s))
        if frozen is not None and not _inside(K, y):
            frozen.add(y)
        else:
            config.add(y)
    return config, odometer


def _initial_split(eta: ParticleConfig, K):
    inside, outside = ParticleConfig(), ParticleConfig()
    for z, n in eta.counts.items():
        (inside if _inside(K, z) else outside).add(z, n)
    return inside, outside


def _reference(eta, K, stacks, policy, mode, budget, odometer, debug):
    floor = 1 if mode == "legal" else 0
    inside, outside = _initial_split(eta, K)
    config = inside
    odo = odometer.copy() if odometer is not None else Odometer()
    frozen = FrozenBoundary()
    start_total = config.total
    topplings = 0
    rng = fresh_stream(stacks, STREAM_POLICY) if policy == "random" else None

    unstable = [z for z, n in config.counts.items() if n > floor]
    if policy == "lex":
        heapq.heapify(unstable)
    pos = {z: i for i, z in enumerate(unstable)} if policy == "random" else None

    def mark(y):
        if policy == "lex":
            heapq.heappush(unstable, y)
        elif policy == "dfs":
            unstable.append(y)
        else:
            pos[y] = len(unstable)
            unstable.append(y)

    while unstable:
        if policy == "lex":
            x = unstable[0]
        elif policy == "dfs":
            x = unstable[-1]
        else:
            i = int(rng.integers(len(unstable)))
            x = unstable[i]
        if topplings >= budget:
            partial = StabilizationResult(config, frozen, odo, topplings,
                                          config.total + frozen.total() - start_total)
            raise BudgetExceeded(f"toppling budget {budget} exceeded", partial=partial)
        ins = instruction_at(stacks, x, odo.bump(x))
        config.remove(x)
        topplings += 1
        if config[x] <= floor:
            if policy == "lex":
                heapq.heappop(unstable)
            elif policy == "dfs":
                unstable.pop()
            else:
                last = unstable.pop()
                if last != x:
                    unstable[i] = last
                    pos[last] = i
                del pos[x]
        for s in ins.steps:
            y = tuple(a + b for a, b in zip(x, s))
            if not _inside(K, y):
                frozen.add(y)
                continue
            config.add(y)
            if config[y] == floor + 1:
                mark(y)
        if debug and topplings % MASS_CHECK_EVERY == 0:
            _mass_check(start_total, config, frozen, odo, odometer, stacks)
    net = config.total + frozen.total() - start_total
    for z, n in outside.counts.items():
        config.add(z, n)
    return StabilizationResult(config, frozen, odo, topplings, net)


def _mass_check(start_total, config, frozen, odo, odo0, stacks):
    # full recount: |eta| + sum over newly used instructions of (k - 1) == current mass
    net = 0
    for x, m in odo.uses.items():
        for j in range((odo0[x] if odo0 else 0) + 1, m + 1):
            net += instruction_at(stacks, x, j).k - 1
    if config.total + frozen.total() != start_total + net:
        raise AssertionError("mass accounting mismatch")


def _fast(eta, K, stacks, mode, budget, odometer):
    inside, outside = _initial_split(eta, K)
    pts = list(inside.counts) + (list(odometer.uses) if odometer else [])
    reach = max((max(abs(c) for c in z) for z in pts), default=0)
    if K is not None:
        reach = max(reach, K.radius_bound())
    w = Walker(stacks, L=reach + 3)
    settle = mode == "legal"
    for z, n in inside.counts.items():
        i = w.grid.index(z)
        if settle:
            w.resting[i] = 1
            n -= 1
        w.add_active(i, n)
    if odometer is not None:
        for x, v in odometer.uses.items():
            w.odo[w.grid.index(x)] = v
    if K is None:
        domain = None
    elif K.ball_radius is not None:
        domain = sq_threshold(K.ball_radius)
    else:
        domain = K
    try:
        w.run(domain, settle=settle, budget=budget)
    except BudgetExceeded as exc:
        raise BudgetExceeded(str(exc), partial=_walker_result(w, outside)) from None
    return _walker_result(w, outside)


def _walker_result(w: Walker, outside: ParticleConfig) -> StabilizationResult:
    config = ParticleConfig(w.resting_sites())
    for z, n in w.active_sites().items():
        config.add(z, n)
    for z, n in outside.counts.items():
        config.add(z, n)
    return StabilizationResult(config, FrozenBoundary(w.frozen_sites()), Odometer(w.odometer()),
                               int(w.ctr[0]), int(w.ctr[1]))


def stabilize(eta: ParticleConfig, K: FiniteDomain | None, stacks: InstructionStacks,
              policy: str = "lex", budget: int = DEFAULT_BUDGET, odometer: Odometer | None = None,
              mode: str = "legal", debug: bool = False) -> StabilizationResult:
    """Stabilize eta inside K (None means all of Z^d), freezing particles that leave K.

    ``policy`` picks the toppling order: ``lex`` (least unstable site first),
    ``dfs`` (most recently destabilized first), ``random`` (uniform unstable
    site, from the policy stream) or ``fast`` (compiled kernel). ``mode`` is
    ``legal`` (topple sites with more than one particle) or ``acceptable``
    (topple every particle in K until none is left, i.e. run the BRWs).
    Initial particles outside K are left untouched in the returned config.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if mode not in ("legal", "acceptable"):
        raise ValueError(f"unknown mode {mode!r}")
    if policy == "fast":
        return _fast(eta, K, stacks, mode, budget, odometer)
    return _reference(eta, K, stacks, policy, mode, budget, odometer, debug)


def drain(eta: ParticleConfig, K: FiniteDomain | None, stacks: InstructionStacks,
          policy: str = "lex", budget: int = DEFAULT_BUDGET) -> StabilizationResult:
    """Acceptable stabilization: every particle in K is toppled, so each one runs a BRW frozen on the boundary of K."""
    return stabilize(eta, K, stacks, policy=policy, budget=budget, mode="acceptable")


def replay(eta: ParticleConfig, odometer: Odometer, stacks: InstructionStacks,
           K: FiniteDomain | None = None) -> tuple[ParticleConfig, FrozenBoundary]:
    """Final (config, frozen) determined by eta and an odometer alone.

    The outcome of any toppling sequence depends only on how many
    instructions were used at each site, so this sums the instructions
    without choosing an order.
    """
    counts = Counter(eta.counts)
    frozen = Counter()
    for x, m in odometer.uses.items():
        counts[x] -= m
        for j in range(1, m + 1):
            for s in instruction_at(stacks, x, j).steps:
                y = tuple(a + b for a, b in zip(x, s))
                if _inside(K, y):
                    counts[y] += 1
                else:
                    frozen[y] += 1
    if any(v < 0 for v in counts.values()):
        raise ValueError("odometer uses more particles than were ever present")
    return (ParticleConfig({z: n for z, n in counts.items() if n}),
            FrozenBoundary({z: n for z, n in sorted(frozen.items()) if n}))


def bidla_step(A: Iterable[Site], stacks: InstructionStacks, odometer: Odometer | None = None,
               d: int | None = None, policy: str = "lex", budget: int = DEFAULT_BUDGET):
    """One BIDLA step: stabilize A plus a particle at the origin.

    Returns the new occupied set; when ``odometer`` is given it is advanced in
    place, so consecutive steps keep consuming fresh instructions.
    """
    A = set(A)
    d = d or stacks.d
    eta = ParticleConfig({z: 1 for z in A})
    eta.add(origin(d))
    res = stabilize(eta, None, stacks, policy=policy, budget=budget, odometer=odometer)
    if odometer is not None:
        odometer.uses = res.odometer.uses
    return frozenset(res.stable_config.counts)


class Bidla:
    """Fast BIDLA driver with a global odometer carried across steps.

    ``arrival`` of a site is the step t whose stabilization settled it, i.e.
    the first t with the site in A(t). The running max occupied squared norm
    and min missing squared norm are maintained incrementally.
    """

    def __init__(self, stacks: InstructionStacks, L: int = 8, budget: int = DEFAULT_BUDGET):
        self.stacks = stacks
        self.d = stacks.d
        self.w = Walker(stacks, L=L)
        self.t = 0
        self.size = 0
        self.budget = budget
        self.max_sq = -1  # -1 while A is empty
        self._occ_shell: Counter = Counter()
        self._min_missing = 0
        self._shells_L = -1
        self._shell_sizes = np.zeros(0, dtype=np.int64)

    def _advance_missing(self) -> None:
        # shells of squared norm <= L**2 are complete on a grid of half-width L
        while True:
            g = self.w.grid
            if self._min_missing > (g.L - 2) ** 2:
                self.w.grow(2 * g.L)
                continue
            if self._shells_L != g.L:
                sq = g.sqnorm
                self._shell_sizes = np.bincount(sq[sq <= g.L * g.L], minlength=g.L * g.L + 1)
                self._shells_L = g.L
            s = self._min_missing
            if self._shell_sizes[s] > 0 and self._occ_shell[s] < self._shell_sizes[s]:
                return
            self._min_missing += 1

    def step(self) -> list[Site]:
        """Release one particle at the origin; returns the newly settled sites."""
        self.t += 1
        w = self.w
        o = w.grid.index(origin(self.d))
        if w.resting[o] == 0:
            w.resting[o] = 1
            w.arrival[o] = self.t
            new = np.array([o], dtype=np.int64)
        else:
            w.add_active(o)
            w.run(None, settle=True, tag=self.t, budget=self.budget)
            new = w.take_settle_log()
        sq = w.grid.sqnorm[new]
        for s in sq.tolist():
            self._occ_shell[s] += 1
        if len(sq):
            self.max_sq = max(self.max_sq, int(sq.max()))
        self.size += len(new)
        sites = [tuple(r) for r in w.grid.coords(new).tolist()]  # before any regrid below
        self._advance_missing()
        return sites

    def run(self, t_max: int, callback=None) -> None:
        while self.t < t_max:
            self.step()
            if callback is not None:
                callback(self)

    @property
    def min_missing_sq(self) -> int:
        return self._min_missing

    def occupied(self) -> frozenset[Site]:
        return frozenset(self.w.resting_sites())

    def arrival_times(self) -> dict[Site, int]:
        return self.w._nonzero_dict(np.where(self.w.resting > 0, self.w.arrival, 0))

    def odometer(self) -> Odometer:
        return Odometer(self.w.odometer())


@dataclass
class JumpChain:
    times: list[int]
    states: list


def jump_chain(trace: Sequence) -> JumpChain:
    """Time change onto the strict-change times of a recorded trace A(0), A(1), ....

    tau_1 = 1 and tau_k is the first t > tau_{k-1} with A(t) != A(tau_{k-1}).
    """
    if len(trace) < 2:
        return JumpChain([], [])
    times = [1]
    for t in range(2, len(trace)):
        if trace[t] != trace[times[-1]]:
            times.append(t)
    return JumpChain(times, [trace[t] for t in times])
