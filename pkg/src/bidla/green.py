"""Green's functions of simple random walk killed on leaving a finite domain.

G_K(x, y) is the expected number of visits to y before the walk from x
leaves K. With the sum running up to and including the exit time, for
y on the exterior boundary G_K(x, y) is the probability of exiting at y;
those values form ``hit``. G solves (I - P_K) G = I with P_K the walk's
step matrix restricted to K.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import FiniteDomain, Site, exterior_boundary, neighbors

DEFAULT_CAP = 20_000
RESIDUAL_TOL = 1e-10
JACOBI_MAX_ITER = 10**6


class GreenError(RuntimeError):
    pass


@dataclass
class GreenTable:
    """G_K and exit distributions, with columns solved on demand and cached."""

    domain: FiniteDomain
    sites: list[Site]
    boundary: list[Site]
    method: str = "direct"
    _index: dict = field(default_factory=dict, repr=False)
    _bindex: dict = field(default_factory=dict, repr=False)
    _A: sp.csc_matrix | None = field(default=None, repr=False)
    _E: sp.csc_matrix | None = field(default=None, repr=False)
    _lu: object = field(default=None, repr=False)
    _cols: dict = field(default_factory=dict, repr=False)
    _hits: dict = field(default_factory=dict, repr=False)

    # -- linear algebra -----------------------------------------------------
    def _solve(self, b: np.ndarray) -> np.ndarray:
        if self.method == "jacobi":
            x = _jacobi(self._A, b)
        else:
            x = self._lu.solve(b)
        res = np.max(np.abs(self._A @ x - b)) if len(b) else 0.0
        if res >= RESIDUAL_TOL:
            raise GreenError(f"linear solve residual {res:.3e} above {RESIDUAL_TOL}")
        return x

    def column(self, y: Site) -> np.ndarray:
        """G(., y) over the domain sites (also the row G(y, .), by symmetry)."""
        y = tuple(y)
        if y not in self._cols:
            b = np.zeros(len(self.sites))
            b[self._index[y]] = 1.0
            # (I - P) is symmetric, so the column for y is also G(y, .)
            self._cols[y] = self._solve(b)
        return self._cols[y]

    def exit_column(self, z: Site) -> np.ndarray:
        """P(walk from x exits K at z), for every x in K."""
        z = tuple(z)
        if z not in self._bindex:
            raise ValueError(f"{z} is not on the exterior boundary")
        if z not in self._hits:
            b = np.asarray(self._E[:, self._bindex[z]].todense()).ravel()
            self._hits[z] = self._solve(b)
        return self._hits[z]

    # -- lookups ----------------------------------------------------------------
    def G(self, x: Site, y: Site) -> float:
        """G_K(x, y) for x in K and y in K or on the exterior boundary."""
        x, y = tuple(x), tuple(y)
        if x not in self._index:
            raise ValueError(f"{x} is not in the domain")
        if y in self._index:
            return float(self.column(y)[self._index[x]])
        if y in self._bindex:
            return float(self.exit_column(y)[self._index[x]])
        return 0.0

    def boundary_hit(self, x: Site, z: Site) -> float:
        return float(self.exit_column(z)[self._index[tuple(x)]])

    def values(self) -> np.ndarray:
        """Dense |K| x |K| table of G (rows x, columns y)."""
        return np.column_stack([self.column(y) for y in self.sites]) if self.sites else np.zeros((0, 0))

    def hit_matrix(self) -> np.ndarray:
        """Dense |K| x |boundary| table of exit probabilities."""
        if not self.sites:
            return np.zeros((0, len(self.boundary)))
        return np.column_stack([self.exit_column(z) for z in self.boundary])

    def index(self, x: Site) -> int:
        return self._index[tuple(x)]

    def dump_csv(self, path, include_boundary: bool = True) -> None:
        """Write rows (x, y, value) for y in K and, optionally, y on the boundary."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "value"])
            targets = list(self.sites) + (list(self.boundary) if include_boundary else [])
            for y in targets:
                col = self.column(y) if y in self._index else self.exit_column(y)
                for x, v in zip(self.sites, col):
                    w.writerow([" ".join(map(str, x)), " ".join(map(str, y)), repr(float(v))])


def _jacobi(A: sp.csc_matrix, b: np.ndarray, max_iter: int = JACOBI_MAX_ITER) -> np.ndarray:
    # A = I - P with unit diagonal, so Jacobi is x <- b + P x
    P = sp.identity(A.shape[0], format="csr") - A.tocsr()
    x = b.copy()
    for _ in range(max_iter):
        nxt = b + P @ x
        if np.max(np.abs(nxt - x)) < RESIDUAL_TOL * 1e-2:
            x = nxt
            if np.max(np.abs(A @ x - b)) < RESIDUAL_TOL:
                return x
        x = nxt
    raise GreenError("Jacobi iteration did not converge")


def solve_green(K: FiniteDomain, method: str = "direct", cap: int = DEFAULT_CAP) -> GreenTable:
    """Set up G_K; ``method`` is ``direct`` (sparse LU) or ``jacobi``."""
    if method not in ("direct", "jacobi"):
        raise ValueError(f"unknown method {method!r}")
    sites = K.sites()
    if len(sites) > cap:
        raise GreenError(f"domain has {len(sites)} sites, above the cap {cap}")
    boundary = exterior_boundary(K)
    index = {z: i for i, z in enumerate(sites)}
    bindex = {z: i for i, z in enumerate(boundary)}
    n, q = len(sites), 2 * K.d
    rows, cols, erows, ecols = [], [], [], []
    for i, x in enumerate(sites):
        for y in neighbors(x):
            if y in index:
                rows.append(i)
                cols.append(index[y])
            else:
                erows.append(i)
                ecols.append(bindex[y])
    P = sp.csc_matrix((np.full(len(rows), 1.0 / q), (rows, cols)), shape=(n, n))
    A = (sp.identity(n, format="csc") - P).tocsc()
    E = sp.csc_matrix((np.full(len(erows), 1.0 / q), (erows, ecols)), shape=(n, len(boundary)))
    table = GreenTable(K, sites, boundary, method, index, bindex, A, E)
    if method == "direct" and n:
        table._lu = spla.splu(A)
    return table


def green_ball(R, d: int, method: str = "direct") -> GreenTable:
    return solve_green(FiniteDomain.ball(R, d), method)


def second_moment_rhs(table: GreenTable, x: Site, z: Site, sigma2: float) -> float:
    """G(x, z) + sigma2 * sum_y G(x, y) G(y, z)^2 for z on the exterior boundary."""
    z = tuple(z)
    if z not in table._bindex:
        raise ValueError(f"{z} is not on the exterior boundary of the domain")
    h = table.exit_column(z)
    gx = table.column(x)  # G(x, .) by symmetry
    return float(h[table.index(x)] + sigma2 * math.fsum(gx * h * h))


def harmonic_defect(table: GreenTable, z: Site) -> float:
    """| |K| G(0, z) - sum_y G(y, z) | for z on the exterior boundary."""
    h = table.exit_column(z)
    o = (0,) * table.domain.d
    return abs(len(table.sites) * float(h[table.index(o)]) - math.fsum(h))
