"""Harris stacks of birth-death instructions, generated on demand.

The instruction at (site x, index j) is a pure function of
(master_seed, x, j): a 64-bit chain of SplitMix64 finalisers keyed by the
packed 126-bit site key and the index. Nothing is stored, so any two toppling
orders that use the j-th instruction at x see the same instruction.

Word layout per instruction: word 0 selects the number of children k, word
i (1 <= i <= k) selects the direction of child i.

Site packing: coordinate c_a + 2**20 occupies 21 bits; axes 0-2 go into the
low key word, axes 3-5 into the high one. Injective for |c_a| < 2**20.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .lattice import Site, check_dim, unit_vectors
from .offspring import OffspringLaw, make_law, sample_k

COORD_OFFSET = 1 << 20
COORD_BITS = 21
MASK64 = (1 << 64) - 1

_G = np.uint64(0x9E3779B97F4A7C15)
_K_SEED = np.uint64(0xD1B54A32D192ED03)
_K_HI = np.uint64(0x8CB92BA72F3D8DD7)
_K_J = np.uint64(0xAEF17502108EF2D9)
_K_DERIVE = np.uint64(0xA0761D6478BD642F)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S32 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(32)
_OFF = np.uint64(COORD_OFFSET)
_BITS = np.uint64(COORD_BITS)


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True)
def derive_seed_nb(master, label):
    return mix64(mix64(master ^ _K_DERIVE) + (label + np.uint64(1)) * _G)


@nb.njit(cache=True, inline="always")
def instruction_base(seed, key_lo, key_hi, j):
    h = mix64(seed ^ _K_SEED)
    h = mix64(h ^ key_lo)
    h = mix64(h ^ (key_hi * _K_HI))
    return mix64(h ^ (j * _K_J))


@nb.njit(cache=True, inline="always")
def instruction_word(base, i):
    return mix64(base + (np.uint64(i) + np.uint64(1)) * _G)


@nb.njit(cache=True, inline="always")
def direction_index(w, two_d):
    # multiply-shift on the top 32 bits; bias below 2d / 2**32
    return np.int64(((w >> _S32) * np.uint64(two_d)) >> _S32)


@nb.njit(cache=True)
def pack_coords(coords):
    lo = np.uint64(0)
    hi = np.uint64(0)
    for a in range(coords.shape[0]):
        v = np.uint64(coords[a] + COORD_OFFSET)
        if a < 3:
            lo |= v << (_BITS * np.uint64(a))
        else:
            hi |= v << (_BITS * np.uint64(a - 3))
    return lo, hi


@nb.njit(cache=True)
def _instruction(seed, coords, j, code, cdf, two_d, dirs_out):
    lo, hi = pack_coords(coords)
    base = instruction_base(seed, lo, hi, np.uint64(j))
    k = sample_k(code, cdf, instruction_word(base, 0))
    for i in range(k):
        dirs_out[i] = direction_index(instruction_word(base, i + 1), two_d)
    return k


def derive_seed(master: int, *labels: int) -> int:
    """Deterministic child seed for (master, label, label, ...)."""
    s = np.uint64(master & MASK64)
    for lab in labels:
        s = np.uint64(derive_seed_nb(s, np.uint64(lab & MASK64)))
    return int(s)


@dataclass(frozen=True)
class Instruction:
    k: int
    steps: tuple[Site, ...]


@dataclass(frozen=True)
class InstructionStacks:
    master_seed: int
    d: int
    law: OffspringLaw

    def __post_init__(self):
        check_dim(self.d)
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master_seed must be a 64-bit unsigned word")

    @classmethod
    def create(cls, master_seed: int, d: int, law: OffspringLaw | str = "binary") -> "InstructionStacks":
        if not isinstance(law, OffspringLaw):
            law = make_law(law)
        return cls(int(master_seed), int(d), law)

    def replica(self, index: int) -> "InstructionStacks":
        return InstructionStacks(derive_seed(self.master_seed, index), self.d, self.law)


def instruction_at(stacks: InstructionStacks, x: Site, j: int) -> Instruction:
    """The j-th instruction (j >= 1) of the stack at site x."""
    if j < 1:
        raise ValueError("stack indices start at 1")
    if len(x) != stacks.d:
        raise ValueError("site dimension does not match the stacks")
    dirs = np.empty(stacks.law.max_children, dtype=np.int64)
    k = _instruction(
        np.uint64(stacks.master_seed),
        np.asarray(x, dtype=np.int64),
        j,
        stacks.law.code,
        stacks.law.cdf,
        2 * stacks.d,
        dirs,
    )
    units = unit_vectors(stacks.d)
    return Instruction(int(k), tuple(units[m] for m in dirs[:k]))


def fresh_stream(stacks: InstructionStacks, stream_id: int) -> np.random.Generator:
    """Independent Philox stream keyed by (master_seed, stream_id)."""
    key = np.array([stacks.master_seed & MASK64, stream_id & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# stream ids reserved for non-stack randomness
STREAM_BARRIER = 1
STREAM_PLACEMENT = 2
STREAM_POLICY = 3
