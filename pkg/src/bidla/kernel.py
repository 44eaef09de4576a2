"""Compiled toppling kernel on a growable dense grid.

Particles are split into *active* ones (to be toppled) and *resting* ones
(settled BIDLA particles). A site holding a resting particle plus active ones
is exactly an unstable site in the count picture, so toppling an active
particle there is a legal toppling; toppling an active particle on an empty
site is an acceptable one.

``walk`` consumes the Harris stacks through the per-site odometer: the j-th
toppling at x uses instruction (x, j). Children landing where
``level >= thr`` are frozen (outside the domain); with ``settle`` set,
children landing on an empty in-domain site become resting.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

from .lattice import Site, check_dim
from .offspring import MAX_CHILDREN, sample_k
from .stacks import (
    InstructionStacks,
    derive_seed_nb,
    direction_index,
    instruction_base,
    instruction_word,
    pack_coords,
)

OK, NEED_GROW, LOG_FULL, BUDGET = 0, 1, 2, 3
NO_FREEZE = np.iinfo(np.int64).max
DEFAULT_BUDGET = 10**9


class BudgetExceeded(RuntimeError):
    """Raised when a stabilization uses more topplings than allowed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


@nb.njit(cache=True)
def walk(stack, top, active, resting, odo, frozen, arrival, level, thr, settle, tag,
         strides, n, L, d, seed, code, cdf, flog, nflog, slog, nslog, tlog, ntlog,
         ctr, budget):
    two_d = 2 * d
    offs = np.empty(two_d, dtype=np.int64)
    for a in range(d):
        offs[2 * a] = strides[a]
        offs[2 * a + 1] = -strides[a]
    coords = np.empty(d, dtype=np.int64)
    cap_f = flog.shape[0]
    cap_s = slog.shape[0]
    cap_t = tlog.shape[0]
    track = cap_t > 0
    while top > 0:
        x = stack[top - 1]
        edge = False
        for a in range(d):
            c = (x // strides[a]) % n - L
            coords[a] = c
            if c <= -L or c >= L:
                edge = True
        if edge:
            return NEED_GROW, top, nflog, nslog, ntlog
        top -= 1
        lo, hi = pack_coords(coords)
        while active[x] > 0:
            if ctr[0] >= budget:
                stack[top] = x
                top += 1
                return BUDGET, top, nflog, nslog, ntlog
            if nflog + MAX_CHILDREN > cap_f or (settle and nslog + MAX_CHILDREN > cap_s) or (track and ntlog >= cap_t):
                stack[top] = x
                top += 1
                return LOG_FULL, top, nflog, nslog, ntlog
            active[x] -= 1
            j = odo[x] + 1
            odo[x] = j
            if track and j == 1:
                tlog[ntlog] = x
                ntlog += 1
            ctr[0] += 1
            base = instruction_base(seed, lo, hi, np.uint64(j))
            k = sample_k(code, cdf, instruction_word(base, 0))
            ctr[1] += k - 1
            for i in range(k):
                y = x + offs[direction_index(instruction_word(base, i + 1), two_d)]
                if level[y] >= thr:
                    frozen[y] += 1
                    flog[nflog] = y
                    nflog += 1
                elif settle and resting[y] == 0:
                    resting[y] = 1
                    arrival[y] = tag
                    slog[nslog] = y
                    nslog += 1
                else:
                    active[y] += 1
                    if active[y] == 1:
                        stack[top] = y
                        top += 1
    return OK, top, nflog, nslog, ntlog


@nb.njit(cache=True)
def brw_batch(master, r0, r1, start, thr, level, strides, n, L, d, code, cdf, budget,
              active, odo, frozen, stack, flog, tlog,
              totals, supports, sqsums, sum_odo, sum_odo2, sum_fr, sum_fr2, sum_fr4):
    """Independent BRWs from ``start`` frozen outside ``level < thr``.

    Replica r uses the stacks keyed by derive_seed(master, r). Returns
    (status, r): status OK means all replicas done; otherwise replica r was
    rolled back and must be rerun after the caller fixes the condition.
    """
    dummy8 = np.zeros(1, dtype=np.int8)
    dummy32 = np.zeros(1, dtype=np.int32)
    slog = np.empty(0, dtype=np.int64)
    ctr = np.zeros(2, dtype=np.int64)
    for r in range(r0, r1):
        seed = derive_seed_nb(master, np.uint64(r))
        ctr[0] = 0
        ctr[1] = 0
        active[start] = 1
        stack[0] = start
        status, top, nf, ns, nt = walk(stack, 1, active, dummy8, odo, frozen, dummy32, level, thr,
                                       False, 0, strides, n, L, d, seed, code, cdf,
                                       flog, 0, slog, 0, tlog, 0, ctr, budget)
        if status != OK:
            for i in range(top):
                active[stack[i]] = 0
            for i in range(nt):
                odo[tlog[i]] = 0
            for i in range(nf):
                frozen[flog[i]] = 0
            return status, r
        support = 0
        sq = 0
        for i in range(nf):
            y = flog[i]
            f = frozen[y]
            if f > 0:
                support += 1
                sq += f * f
                sum_fr[y] += f
                sum_fr2[y] += f * f
                sum_fr4[y] += float(f * f) * float(f * f)
                frozen[y] = 0
        for i in range(nt):
            x = tlog[i]
            v = odo[x]
            sum_odo[x] += v
            sum_odo2[x] += v * v
            odo[x] = 0
        totals[r - r0] = nf
        supports[r - r0] = support
        sqsums[r - r0] = sq
    return OK, r1


class Grid:
    """The box [-L, L]^d, flattened in C order."""

    def __init__(self, d: int, L: int):
        self.d = check_dim(d)
        self.L = int(L)
        self.n = 2 * self.L + 1
        self.shape = (self.n,) * self.d
        self.size = self.n**self.d
        self.strides = np.array([self.n ** (self.d - 1 - a) for a in range(self.d)], dtype=np.int64)
        ax = np.arange(-self.L, self.L + 1, dtype=np.int64) ** 2
        sq = np.zeros(self.shape, dtype=np.int64)
        for a in range(self.d):
            sh = [1] * self.d
            sh[a] = self.n
            sq = sq + ax.reshape(sh)
        self.sqnorm = sq.ravel()

    def index(self, z: Site) -> int:
        return int(sum((c + self.L) * s for c, s in zip(z, self.strides)))

    def indices(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.int64).reshape(-1, self.d)
        return (pts + self.L) @ self.strides

    def coords(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        return np.stack(np.unravel_index(idx, self.shape), axis=-1) - self.L

    def site(self, idx: int) -> Site:
        return tuple(int(c) for c in self.coords(idx))

    def contains_box(self, radius: int) -> bool:
        return radius < self.L

    def embed(self, arr: np.ndarray, other: "Grid") -> np.ndarray:
        """Copy a flat array on self into the centre of a (larger) grid."""
        out = np.zeros(other.size, dtype=arr.dtype)
        off = other.L - self.L
        view = out.reshape(other.shape)
        view[tuple(slice(off, off + self.n) for _ in range(self.d))] = arr.reshape(self.shape)
        return out

    def remap(self, idx: np.ndarray, other: "Grid") -> np.ndarray:
        return other.indices(self.coords(idx)) if len(idx) else idx.copy()

    def box_mask(self, radius: int) -> np.ndarray:
        """Flat mask of sites with sup-norm <= radius."""
        c = self.coords(np.arange(self.size))
        return np.abs(c).max(axis=1) <= radius


class Walker:
    """Particle state (active / resting / frozen) plus odometer on a Grid."""

    def __init__(self, stacks: InstructionStacks, L: int = 8, track_touched: bool = False):
        self.stacks = stacks
        self.seed = np.uint64(stacks.master_seed)
        self.grid = Grid(stacks.d, max(2, L))
        g = self.grid
        self.active = np.zeros(g.size, dtype=np.int32)
        self.resting = np.zeros(g.size, dtype=np.int8)
        self.odo = np.zeros(g.size, dtype=np.int64)
        self.frozen = np.zeros(g.size, dtype=np.int64)
        self.arrival = np.zeros(g.size, dtype=np.int32)
        self.stack = np.zeros(g.size, dtype=np.int64)
        self.top = 0
        self.flog = np.zeros(1024, dtype=np.int64)
        self.slog = np.zeros(1024, dtype=np.int64)
        self.tlog = np.zeros(1024 if track_touched else 0, dtype=np.int64)
        self.nflog = self.nslog = self.ntlog = 0
        self.ctr = np.zeros(2, dtype=np.int64)
        self._masks: dict[int, tuple[int, np.ndarray]] = {}

    # -- geometry -----------------------------------------------------------
    def grow(self, new_L: int) -> None:
        old, new = self.grid, Grid(self.grid.d, new_L)
        for name in ("active", "resting", "odo", "frozen", "arrival"):
            setattr(self, name, old.embed(getattr(self, name), new))
        stack = np.zeros(new.size, dtype=np.int64)
        stack[: self.top] = old.remap(self.stack[: self.top], new)
        self.stack = stack
        self.flog[: self.nflog] = old.remap(self.flog[: self.nflog], new)
        self.slog[: self.nslog] = old.remap(self.slog[: self.nslog], new)
        if len(self.tlog):
            self.tlog[: self.ntlog] = old.remap(self.tlog[: self.ntlog], new)
        self.grid = new
        self._masks.clear()

    def ensure(self, radius: int) -> None:
        """Make sure every site of sup-norm <= radius + 1 lies strictly inside the grid."""
        if radius + 1 >= self.grid.L:
            self.grow(max(radius + 3, 2 * self.grid.L))

    def idx(self, z: Site) -> int:
        self.ensure(max((abs(c) for c in z), default=0))
        return self.grid.index(z)

    # -- particles ------------------------------------------------------------
    def add_active(self, i: int, count: int = 1) -> None:
        if count <= 0:
            return
        was = self.active[i]
        self.active[i] += count
        if was == 0:
            self.stack[self.top] = i
            self.top += 1

    def _level(self, domain) -> tuple[np.ndarray, int]:
        """(level array, threshold) for a domain description.

        ``None`` is all of Z^d, an int is a squared-norm threshold (ball),
        otherwise a FiniteDomain.
        """
        g = self.grid
        if domain is None:
            return g.sqnorm, NO_FREEZE
        if isinstance(domain, (int, np.integer)):
            return g.sqnorm, int(domain)
        key = id(domain)
        if key not in self._masks:
            self.ensure(domain.radius_bound() + 1)
            g = self.grid
            level = np.ones(g.size, dtype=np.int64)
            pts = np.array(domain.sites(), dtype=np.int64).reshape(-1, g.d)
            if len(pts):
                level[g.indices(pts)] = 0
            self._masks[key] = (1, level)
        thr, level = self._masks[key]
        return level, thr

    def run(self, domain=None, settle: bool = False, tag: int = 0, budget: int = DEFAULT_BUDGET) -> int:
        """Topple until no active particle remains inside the domain; returns topplings used."""
        if isinstance(domain, (int, np.integer)):
            self.ensure(math.isqrt(max(int(domain) - 1, 0)) + 1)
        law = self.stacks.law
        start = int(self.ctr[0])
        while True:
            level, thr = self._level(domain)
            g = self.grid
            status, self.top, self.nflog, self.nslog, self.ntlog = walk(
                self.stack, self.top, self.active, self.resting, self.odo, self.frozen,
                self.arrival, level, thr, settle, tag, g.strides, g.n, g.L, g.d,
                self.seed, law.code, law.cdf, self.flog, self.nflog, self.slog, self.nslog,
                self.tlog, self.ntlog, self.ctr, start + budget,
            )
            if status == OK:
                return int(self.ctr[0]) - start
            if status == NEED_GROW:
                self.grow(2 * g.L)
            elif status == LOG_FULL:
                for name in ("flog", "slog", "tlog"):
                    arr = getattr(self, name)
                    if len(arr):
                        setattr(self, name, np.concatenate([arr, np.zeros(len(arr), dtype=np.int64)]))
            else:
                raise BudgetExceeded(f"toppling budget {budget} exceeded", partial=self)

    def take_frozen_log(self) -> np.ndarray:
        out = self.flog[: self.nflog].copy()
        self.nflog = 0
        return out

    def take_settle_log(self) -> np.ndarray:
        out = self.slog[: self.nslog].copy()
        self.nslog = 0
        return out

    # -- views ----------------------------------------------------------------
    def _nonzero_dict(self, arr: np.ndarray) -> dict[Site, int]:
        idx = np.flatnonzero(arr)
        coords = self.grid.coords(idx)
        return {tuple(int(c) for c in row): int(arr[i]) for row, i in zip(coords, idx)}

    def resting_sites(self) -> dict[Site, int]:
        return self._nonzero_dict(self.resting)

    def frozen_sites(self) -> dict[Site, int]:
        return self._nonzero_dict(self.frozen)

    def odometer(self) -> dict[Site, int]:
        return self._nonzero_dict(self.odo)

    def active_sites(self) -> dict[Site, int]:
        return self._nonzero_dict(self.active)
