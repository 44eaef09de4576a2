"""Critical offspring distributions.

Every law must be critical (mean 1), have positive variance and a finite
exponential moment. Built-in families: fair binary on {0, 2}, geometric(1/2)
on {0, 1, 2, ...} and Poisson(1). Finite pmfs can be given explicitly.

Sampling is a pure function of one uniform 64-bit word so that instruction
stacks can be regenerated bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numba as nb
import numpy as np

BINARY, GEOMETRIC, POISSON, TABLE = 0, 1, 2, 3
MAX_CHILDREN = 64  # hard cap on k per instruction; sizes the kernels' log headroom
TOL = 1e-12
POISSON_TAIL = 1e-15

_U53 = 1.0 / 9007199254740992.0  # 2**-53


class OffspringLawError(ValueError):
    pass


@dataclass(frozen=True)
class OffspringLaw:
    name: str
    pmf: tuple[float, ...]  # pmf[k] = nu(k); truncated for Poisson(1), see POISSON_TAIL
    mean: float
    variance_sigma2: float
    exp_moment_certificate: bool
    code: int
    cdf: np.ndarray = field(repr=False, compare=False)

    @property
    def max_children(self) -> int:
        return MAX_CHILDREN if self.code in (GEOMETRIC, POISSON) else len(self.pmf) - 1

    def descriptor(self) -> str:
        if self.code == TABLE:
            return "pmf:" + ",".join(repr(p) for p in self.pmf)
        return self.name


def _cdf(pmf: Sequence[float]) -> np.ndarray:
    c = np.cumsum(np.asarray(pmf, dtype=np.float64))
    c[-1] = 1.0
    return c


def _poisson_table() -> tuple[float, ...]:
    p, k, out, tail = math.exp(-1.0), 0, [], 1.0
    while True:
        out.append(p)
        tail -= p
        if tail < POISSON_TAIL:
            return tuple(out)
        k += 1
        p /= k


def _validate(pmf: Sequence[float]) -> tuple[float, float]:
    if len(pmf) == 0:
        raise OffspringLawError("empty pmf")
    if len(pmf) - 1 > MAX_CHILDREN:
        raise OffspringLawError(f"support must lie in [0, {MAX_CHILDREN}]")
    if any((not math.isfinite(p)) or p < 0 for p in pmf):
        raise OffspringLawError("negative or non-finite probability")
    total = math.fsum(pmf)
    if abs(total - 1.0) > TOL:
        raise OffspringLawError(f"probabilities sum to {total!r}, not 1")
    mean = math.fsum(k * p for k, p in enumerate(pmf))
    if abs(mean - 1.0) > TOL:
        raise OffspringLawError(f"law is not critical: mean {mean!r}")
    var = math.fsum((k - 1) ** 2 * p for k, p in enumerate(pmf))
    if var <= 0:
        raise OffspringLawError("offspring variance must be positive")
    return mean, var


def make_law(spec: str | Sequence[float] | Mapping[int, float] = "binary") -> OffspringLaw:
    """Build a validated law.

    ``spec`` is one of ``"binary"``, ``"geometric"``, ``"poisson"``, a string
    ``"pmf:p0,p1,..."``, a sequence ``[p0, p1, ...]`` or a mapping ``{k: p}``.
    """
    if isinstance(spec, str):
        key = spec.strip().lower()
        if key in ("binary", "binary-fair"):
            return OffspringLaw("binary", (0.5, 0.0, 0.5), 1.0, 1.0, True, BINARY, _cdf((0.5, 0.0, 0.5)))
        if key in ("geometric", "geometric-1/2", "geometric(1/2)"):
            table = tuple(0.5 ** (k + 1) for k in range(MAX_CHILDREN + 1))
            return OffspringLaw("geometric", table, 1.0, 2.0, True, GEOMETRIC, _cdf(table))
        if key in ("poisson", "poisson(1)", "poisson-1"):
            table = _poisson_table()
            return OffspringLaw("poisson", table, 1.0, 1.0, True, POISSON, _cdf(table))
        if key.startswith("pmf:"):
            try:
                values = [float(v) for v in key[4:].split(",")]
            except ValueError as exc:
                raise OffspringLawError(f"bad pmf descriptor {spec!r}") from exc
            return make_law(values)
        raise OffspringLawError(f"unknown offspring law {spec!r}")
    if isinstance(spec, Mapping):
        if any(int(k) < 0 for k in spec):
            raise OffspringLawError("offspring counts must be nonnegative")
        top = max(int(k) for k in spec)
        values = [0.0] * (top + 1)
        for k, p in spec.items():
            values[int(k)] = float(p)
        spec = values
    pmf = tuple(float(p) for p in spec)
    while len(pmf) > 1 and pmf[-1] == 0.0:
        pmf = pmf[:-1]
    mean, var = _validate(pmf)
    # finite support always has every exponential moment
    return OffspringLaw("pmf", pmf, mean, var, True, TABLE, _cdf(pmf))


@nb.njit(cache=True, inline="always")
def _ctz64(w):
    if w == np.uint64(0):
        return 64
    k = 0
    while (w & np.uint64(1)) == np.uint64(0):
        w = w >> np.uint64(1)
        k += 1
    return k


@nb.njit(cache=True)
def sample_k(code, cdf, w):
    """Number of children encoded by the uniform 64-bit word ``w``."""
    if code == BINARY:
        return 2 if (w >> np.uint64(63)) == np.uint64(1) else 0
    if code == GEOMETRIC:
        # P(trailing zeros = k) = 2^-(k+1)
        return _ctz64(w)
    u = np.float64(w >> np.uint64(11)) * _U53
    if code == POISSON:
        p = np.exp(-1.0)
        cum = p
        k = 0
        while u >= cum and k < MAX_CHILDREN:
            k += 1
            p /= k
            cum += p
        return k
    k = 0
    n = cdf.shape[0]
    while k < n - 1 and u >= cdf[k]:
        k += 1
    return k


@nb.njit(cache=True)
def _sample_many(code, cdf, words):
    out = np.empty(words.shape[0], dtype=np.int64)
    for i in range(words.shape[0]):
        out[i] = sample_k(code, cdf, words[i])
    return out


def sample_offspring(law: OffspringLaw, word: int) -> int:
    """k distributed as the law, as a deterministic function of a 64-bit word."""
    return int(sample_k(law.code, law.cdf, np.uint64(word)))


def sample_offspring_many(law: OffspringLaw, words: np.ndarray) -> np.ndarray:
    return _sample_many(law.code, law.cdf, np.ascontiguousarray(words, dtype=np.uint64))
