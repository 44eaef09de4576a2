"""Integer-lattice geometry: sites, Euclidean balls, exterior boundaries.

Sites are plain tuples of ints. Ball membership is decided on squared norms
with exact rational thresholds, so radii such as ``n - n**0.6`` never suffer
from floating-point boundary errors.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Iterator

import numpy as np

Site = tuple[int, ...]

MAX_DIM = 6
DEFAULT_ENUMERATION_CAP = 5_000_000


class DimensionError(ValueError):
    pass


def check_dim(d: int) -> int:
    if not isinstance(d, (int, np.integer)) or not 1 <= d <= MAX_DIM:
        raise DimensionError(f"dimension must be an integer in [1, {MAX_DIM}], got {d!r}")
    return int(d)


def origin(d: int) -> Site:
    return (0,) * check_dim(d)


def sqnorm(z: Iterable[int]) -> int:
    return sum(c * c for c in z)


def norm(z: Iterable[int]) -> float:
    return math.sqrt(sqnorm(z))


def unit_vectors(d: int) -> list[Site]:
    """The 2d neighbours of the origin, ordered (+e_0, -e_0, +e_1, -e_1, ...)."""
    out = []
    for a in range(check_dim(d)):
        for s in (1, -1):
            v = [0] * d
            v[a] = s
            out.append(tuple(v))
    return out


def neighbors(z: Site) -> Iterator[Site]:
    for a in range(len(z)):
        for s in (1, -1):
            y = list(z)
            y[a] += s
            yield tuple(y)


def sq_threshold(radius) -> int:
    """Smallest integer T such that ``s < radius**2  <=>  s < T`` for integers s >= 0.

    Radius <= 0 gives 0 (empty ball). The comparison is exact for any float or
    Fraction radius.
    """
    r = Fraction(radius)
    if r <= 0:
        return 0
    return math.ceil(r * r)


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def volume_radius(t: float, d: int) -> float:
    """Radius r with unit_ball_volume(d) * r**d == t."""
    check_dim(d)
    if t < 0:
        raise ValueError("volume must be nonnegative")
    if t == 0:
        return 0.0
    return (t / unit_ball_volume(d)) ** (1.0 / d)


def _box_points(half: int, d: int) -> np.ndarray:
    """All integer points of [-half, half]^d as an (m, d) array in lexicographic order."""
    axes = [np.arange(-half, half + 1, dtype=np.int64)] * d
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1)


def ball_array(radius, d: int, center: Site | None = None) -> np.ndarray:
    """Sites of the open ball as an (m, d) int array, lexicographic order."""
    check_dim(d)
    thr = sq_threshold(radius)
    if thr == 0:
        return np.zeros((0, d), dtype=np.int64)
    half = math.isqrt(thr - 1)
    if (2 * half + 1) ** d > DEFAULT_ENUMERATION_CAP * 4:
        raise ValueError(f"ball of radius {radius} in d={d} too large to enumerate")
    pts = _box_points(half, d)
    pts = pts[(pts * pts).sum(axis=1) < thr]
    if center is not None:
        pts = pts + np.asarray(center, dtype=np.int64)
    return pts


def ball_sites(radius, d: int) -> list[Site]:
    """Sites z with ||z|| < radius, lexicographic order."""
    if not math.isfinite(float(radius)):
        raise ValueError("radius must be finite")
    return [tuple(int(c) for c in row) for row in ball_array(radius, d)]


@dataclass(frozen=True)
class Ball:
    radius: float
    center: Site | None = None

    def contains(self, z: Site) -> bool:
        c = self.center or (0,) * len(z)
        return sqnorm(a - b for a, b in zip(z, c)) < sq_threshold(self.radius)

    def __contains__(self, z: Site) -> bool:
        return self.contains(z)


@dataclass
class FiniteDomain:
    """A finite region K of Z^d given by a membership predicate.

    ``sites()`` enumerates K in lexicographic order (cached). When the domain is
    a ball centred at the origin, ``ball_radius`` is set and the fast kernels
    use the squared-norm threshold directly.
    """

    d: int
    contains: Callable[[Site], bool]
    _enumerate: Callable[[], list[Site]] = field(repr=False)
    ball_radius: float | None = None
    cap: int = DEFAULT_ENUMERATION_CAP
    _cache: list[Site] | None = field(default=None, init=False, repr=False)

    @classmethod
    def ball(cls, radius, d: int) -> "FiniteDomain":
        check_dim(d)
        thr = sq_threshold(radius)
        return cls(
            d=d,
            contains=lambda z: sqnorm(z) < thr,
            _enumerate=lambda: ball_sites(radius, d),
            ball_radius=radius,
        )

    @classmethod
    def from_sites(cls, sites: Iterable[Site], d: int | None = None) -> "FiniteDomain":
        members = sorted({tuple(int(c) for c in s) for s in sites})
        if d is None:
            if not members:
                raise ValueError("cannot infer dimension of an empty domain")
            d = len(members[0])
        check_dim(d)
        if any(len(s) != d for s in members):
            raise DimensionError("all sites must have the same dimension")
        lookup = frozenset(members)
        return cls(d=d, contains=lookup.__contains__, _enumerate=lambda: list(members))

    def sites(self) -> list[Site]:
        if self._cache is None:
            pts = self._enumerate()
            if len(pts) > self.cap:
                raise ValueError(f"domain has {len(pts)} sites, above the cap {self.cap}")
            self._cache = pts
        return self._cache

    def __contains__(self, z: Site) -> bool:
        return self.contains(z)

    def __len__(self) -> int:
        return len(self.sites())

    def radius_bound(self) -> int:
        """Max sup-norm over K (0 for the empty domain)."""
        pts = self.sites()
        return max((max(abs(c) for c in z) for z in pts), default=0)


def exterior_boundary(K: FiniteDomain | Iterable[Site]) -> list[Site]:
    """{y not in K : y ~ x for some x in K}, each once, lexicographic order."""
    if isinstance(K, FiniteDomain):
        pts, inside = K.sites(), K.contains
    else:
        pts = list(K)
        members = set(pts)
        inside = members.__contains__
    out = {y for x in pts for y in neighbors(x) if not inside(y)}
    return sorted(out)


def signed_permutations(d: int) -> Iterator[np.ndarray]:
    """All 2^d * d! signed permutation matrices of Z^d."""
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            m = np.zeros((d, d), dtype=np.int64)
            for i, (p, s) in enumerate(zip(perm, signs)):
                m[i, p] = s
            yield m
