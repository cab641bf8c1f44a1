"""Discrete flat tori, twisted Hermitian bundles, connections and curvature.

Conventions used throughout the package
---------------------------------------
* The base is the unit torus T^{2m} (m = 1 or 2) sampled on an n^{2m} grid
  with spacing ``h = 1/n``.  Real directions are indexed ``mu = 0..2m-1`` and
  the complex coordinates are ``z_j = x_{2j} + i x_{2j+1}`` (0-based).
* A section of the rank-k bundle is an array of shape ``(*grid, k)``; a family
  of N sections is stored as ``(*grid, k, N)`` so that ``E(x)`` is the k x N
  evaluation matrix at each point.
* A connection is a set of link matrices ``U_mu(x)`` (parallel transport from
  ``x + mu`` back to ``x``) together with a pointwise correction ``a_mu(x)``.
  The forward covariant derivative is

      D_mu s(x) = (U_mu(x) s(x + mu) - s(x)) / h + a_mu(x) s(x).

* Metrics are k x k Hermitian matrices with ``<u, v>_h = v^dagger h u``
  (conjugate-linear in the second argument).
* Two-forms are arrays ``F[mu, nu, *grid, k, k]`` with ``F[mu, nu] = -F[nu, mu]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional, Sequence, Tuple

import numpy as np


class GeometryError(ValueError):
    """Raised for inconsistent grids, bundle data or field shapes."""


# ---------------------------------------------------------------------------
# grid and bundle data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeGrid:
    """Unit flat torus T^{2m} sampled with n points per axis."""

    m: int
    n: int

    def __post_init__(self):
        if self.m not in (1, 2):
            raise GeometryError(f"complex dimension m must be 1 or 2, got {self.m}")
        if self.n < 4:
            raise GeometryError(f"need at least 4 points per axis, got n={self.n}")

    @property
    def dim(self) -> int:
        return 2 * self.m

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def npoints(self) -> int:
        return self.n ** self.dim

    @property
    def h_spacing(self) -> float:
        return 1.0 / self.n

    @property
    def weight(self) -> float:
        """Quadrature weight of one grid point (the torus has unit volume)."""
        return 1.0 / self.npoints

    volume = 1.0

    def coords(self) -> np.ndarray:
        """Coordinates, shape ``(2m, *grid)``, values in {0, 1/n, ..., (n-1)/n}."""
        ax = np.arange(self.n) / self.n
        return np.stack(np.meshgrid(*([ax] * self.dim), indexing="ij"))

    def integrate(self, f: np.ndarray) -> np.ndarray:
        """Riemann sum over the grid axes (the leading ``2m`` axes of ``f``)."""
        f = np.asarray(f)
        return f.reshape((self.npoints,) + f.shape[self.dim:]).sum(axis=0) * self.weight


@dataclass(frozen=True)
class BundleConfig:
    """Rank, topological twist and subspace dimension of the bundle data."""

    k: int
    twist: np.ndarray
    N: int

    def __post_init__(self):
        tw = np.asarray(self.twist)
        if tw.ndim != 2 or tw.shape[0] != tw.shape[1]:
            raise GeometryError(f"twist must be a square matrix, got shape {tw.shape}")
        if not np.all(np.equal(np.round(tw), tw)):
            raise GeometryError("twist entries must be integers")
        tw = tw.astype(np.int64)
        if np.any(tw != -tw.T):
            raise GeometryError("twist matrix must be antisymmetric")
        if self.k < 1 or self.N < 1:
            raise GeometryError("rank k and N must be positive")
        object.__setattr__(self, "twist", tw)

    @classmethod
    def from_pairs(cls, m: int, k: int, N: int, pairs: Sequence[Tuple[int, int, int]] = ()):
        """Build from ``(mu, nu, c)`` triples with 0-based directions."""
        tw = np.zeros((2 * m, 2 * m), dtype=np.int64)
        for mu, nu, c in pairs:
            tw[mu, nu] += c
            tw[nu, mu] -= c
        return cls(k=k, twist=tw, N=N)

    def check_grid(self, grid: LatticeGrid):
        if self.twist.shape != (grid.dim, grid.dim):
            raise GeometryError(
                f"twist has shape {self.twist.shape}, grid needs {(grid.dim, grid.dim)}")


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


def _herm(a: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(a, -1, -2))


@dataclass
class MetricField:
    """Pointwise Hermitian metric h(x), optionally with its covariant jet.

    ``grad`` (shape ``(2m, *grid, k, k)``) holds the forward covariant
    derivative of h with respect to the link transport.  Metrics produced
    by pulling back the universal metric carry an exact jet; without one the
    finite-difference derivative is used.
    """

    grid: LatticeGrid
    values: np.ndarray
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape[: self.grid.dim] != self.grid.shape or self.values.shape[-1] != self.values.shape[-2]:
            raise GeometryError(f"metric has shape {self.values.shape}")

    @property
    def k(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def identity(cls, grid: LatticeGrid, k: int) -> "MetricField":
        vals = np.broadcast_to(np.eye(k, dtype=complex), grid.shape + (k, k)).copy()
        return cls(grid, vals, np.zeros((grid.dim,) + vals.shape, dtype=complex))

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(self.values - _herm(self.values))))

    def min_eigenvalue(self) -> float:
        h = 0.5 * (self.values + _herm(self.values))
        return float(np.min(np.linalg.eigvalsh(h)))

    def validate(self, tol: float = 1e-14):
        scale = max(1.0, float(np.max(np.abs(self.values))))
        if self.hermiticity_defect() > tol * scale:
            raise GeometryError(
                f"metric is not Hermitian (defect {self.hermiticity_defect():.3e})")
        if self.min_eigenvalue() <= 0:
            raise GeometryError("metric is not positive definite")


@dataclass
class ConnectionField:
    """Link matrices U_mu(x) and pointwise correction a_mu(x).

    Both arrays have shape ``(2m, *grid, k, k)``.
    """

    grid: LatticeGrid
    cfg: BundleConfig
    links: np.ndarray
    corr: np.ndarray

    def __post_init__(self):
        self.cfg.check_grid(self.grid)
        want = (self.grid.dim,) + self.grid.shape + (self.cfg.k, self.cfg.k)
        if self.links.shape != want or self.corr.shape != want:
            raise GeometryError(
                f"connection arrays must have shape {want}, got {self.links.shape}, {self.corr.shape}")

    @property
    def k(self) -> int:
        return self.cfg.k

    def with_corr(self, corr: np.ndarray) -> "ConnectionField":
        return replace(self, corr=np.asarray(corr, dtype=complex))

    def dbar_corr(self) -> np.ndarray:
        """(0,1) part alpha_j = (a_{2j} + i a_{2j+1}) / 2, shape ``(m, *grid, k, k)``."""
        return 0.5 * (self.corr[0::2] + 1j * self.corr[1::2])

    def del_corr(self) -> np.ndarray:
        """(1,0) part beta_j = (a_{2j} - i a_{2j+1}) / 2."""
        return 0.5 * (self.corr[0::2] - 1j * self.corr[1::2])


def corr_from_types(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Reassemble real-direction corrections from (0,1) and (1,0) parts."""
    m = alpha.shape[0]
    out = np.empty((2 * m,) + alpha.shape[1:], dtype=complex)
    out[0::2] = alpha + beta
    out[1::2] = (alpha - beta) / 1j
    return out


@dataclass
class GaugeTransform:
    """Pointwise invertible matrices u(x), shape ``(*grid, k, k)``."""

    grid: LatticeGrid
    values: np.ndarray
    unitary: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.unitary:
            k = self.values.shape[-1]
            defect = np.max(np.abs(_herm(self.values) @ self.values - np.eye(k)))
            if defect > 1e-12:
                raise GeometryError(f"gauge flagged unitary but |u^dag u - I| = {defect:.3e}")

    @classmethod
    def identity(cls, grid: LatticeGrid, k: int) -> "GaugeTransform":
        return cls(grid, np.broadcast_to(np.eye(k, dtype=complex), grid.shape + (k, k)).copy())


# ---------------------------------------------------------------------------
# lattice transport
# ---------------------------------------------------------------------------


def shift(f: np.ndarray, mu: int, j: int = 1) -> np.ndarray:
    """Return g with g(x) = f(x + j e_mu); grid axes lead."""
    return np.roll(f, -j, axis=mu)


def transport_fwd(links: np.ndarray, mu: int, f: np.ndarray) -> np.ndarray:
    """(T_+ f)(x) = U_mu(x) f(x + mu) for f of shape ``(*grid, k, r)``."""
    return links[mu] @ shift(f, mu, 1)


def transport_bwd(links: np.ndarray, mu: int, f: np.ndarray, inv_links=None) -> np.ndarray:
    """(T_- f)(x) = U_mu(x - mu)^{-1} f(x - mu)."""
    inv = np.linalg.inv(links[mu]) if inv_links is None else inv_links[mu]
    return shift(inv @ f, mu, -1)


def _as_family(s: np.ndarray, grid: LatticeGrid, k: int) -> Tuple[np.ndarray, bool]:
    s = np.asarray(s, dtype=complex)
    if s.shape == grid.shape + (k,):
        return s[..., None], True
    if s.shape[: grid.dim] == grid.shape and s.ndim == grid.dim + 2 and s.shape[grid.dim] == k:
        return s, False
    raise GeometryError(
        f"section field of shape {s.shape} does not match grid {grid.shape} and rank {k}")


def build_reference_connection(grid: LatticeGrid, cfg: BundleConfig) -> ConnectionField:
    """Constant-curvature links realizing the twist as a factor of automorphy.

    For every pair mu < nu with c = twist[mu, nu] the phase of the first fibre
    component is modified by

        U_nu(x) *= exp(-2 pi i c x_mu h)          (all x)
        U_mu(x) *= exp(+2 pi i c x_nu)            (x_mu = (n-1) h only)

    so that every elementary plaquette holonomy equals exp(-2 pi i c h^2).
    """
    cfg.check_grid(grid)
    x = grid.coords()
    h = grid.h_spacing
    phase = np.ones((grid.dim,) + grid.shape, dtype=complex)
    for mu, nu in combinations(range(grid.dim), 2):
        c = int(cfg.twist[mu, nu])
        if c == 0:
            continue
        phase[nu] *= np.exp(-2j * np.pi * c * x[mu] * h)
        last = [slice(None)] * grid.dim
        last[mu] = grid.n - 1
        phase[mu][tuple(last)] *= np.exp(2j * np.pi * c * x[nu][tuple(last)])
    k = cfg.k
    links = np.broadcast_to(np.eye(k, dtype=complex), (grid.dim,) + grid.shape + (k, k)).copy()
    links[..., 0, 0] = phase
    corr = np.zeros_like(links)
    return ConnectionField(grid, cfg, links, corr)


def _fd_weights(order: int):
    if order == 2:
        return [(1, 0.5)]
    if order == 4:
        return [(1, 2.0 / 3.0), (2, -1.0 / 12.0)]
    if order == 6:
        return [(1, 0.75), (2, -0.15), (3, 1.0 / 60.0)]
    raise GeometryError(f"unsupported difference order {order}")


def covariant_derivative(conn: ConnectionField, s: np.ndarray, scheme: str = "forward",
                         order: int = 2) -> np.ndarray:
    """Covariant derivative D_mu s for all real directions.

    Returns an array with a leading direction axis of length 2m.  ``s`` may be
    a single section ``(*grid, k)`` or a family ``(*grid, k, N)``.  The
    central scheme supports orders 2, 4 and 6 using multi-link transport.
    """
    grid = conn.grid
    fam, single = _as_family(s, grid, conn.k)
    h = grid.h_spacing
    out = np.empty((grid.dim,) + fam.shape, dtype=complex)
    if scheme == "forward":
        for mu in range(grid.dim):
            out[mu] = (transport_fwd(conn.links, mu, fam) - fam) / h + conn.corr[mu] @ fam
    elif scheme == "central":
        inv = np.linalg.inv(conn.links)
        for mu in range(grid.dim):
            fwd, bwd = fam, fam
            acc = np.zeros_like(fam)
            weights = dict(_fd_weights(order))
            for j in range(1, max(weights) + 1):
                fwd = transport_fwd(conn.links, mu, fwd)
                bwd = transport_bwd(conn.links, mu, bwd, inv)
                if j in weights:
                    acc += weights[j] * (fwd - bwd)
            out[mu] = acc / h + conn.corr[mu] @ fam
    else:
        raise GeometryError(f"unknown difference scheme {scheme!r}")
    return out[..., 0] if single else out


def dbar_parts(D: np.ndarray) -> np.ndarray:
    """(0,1) components (D_{2j} + i D_{2j+1}) / 2 from real-direction derivatives."""
    return 0.5 * (D[0::2] + 1j * D[1::2])


def del_parts(D: np.ndarray) -> np.ndarray:
    """(1,0) components (D_{2j} - i D_{2j+1}) / 2."""
    return 0.5 * (D[0::2] - 1j * D[1::2])


def dbar(conn: ConnectionField, s: np.ndarray, scheme: str = "forward") -> np.ndarray:
    return dbar_parts(covariant_derivative(conn, s, scheme))


def delp(conn: ConnectionField, s: np.ndarray, scheme: str = "forward") -> np.ndarray:
    return del_parts(covariant_derivative(conn, s, scheme))


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------


def loop_holonomy(links: np.ndarray, steps: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Ordered product of link matrices along a closed path based at every x.

    ``steps`` is a list of ``(mu, +1|-1)``.  A forward step contributes
    ``U_mu(y)``, a backward step ``U_mu(y - mu)^{-1}``.
    """
    dim = links.shape[0]
    k = links.shape[-1]
    grid_shape = links.shape[1:1 + dim]
    inv = None
    prod = np.broadcast_to(np.eye(k, dtype=complex), grid_shape + (k, k)).copy()
    off = [0] * dim
    for mu, sgn in steps:
        if sgn > 0:
            mat = np.roll(links[mu], [-o for o in off], axis=tuple(range(dim)))
            off[mu] += 1
        else:
            if inv is None:
                inv = np.linalg.inv(links)
            off[mu] -= 1
            mat = np.roll(inv[mu], [-o for o in off], axis=tuple(range(dim)))
        prod = prod @ mat
    return prod


def _matrix_log(u: np.ndarray) -> np.ndarray:
    k = u.shape[-1]
    if k == 1:
        return np.log(u)
    w, v = np.linalg.eig(u)
    return v @ (np.log(w)[..., None] * np.linalg.inv(v))


def _plaquette_log(links: np.ndarray, mu: int, nu: int) -> np.ndarray:
    """Clover average of the logarithms of the four plaquettes touching x."""
    loops = [
        [(mu, 1), (nu, 1), (mu, -1), (nu, -1)],
        [(nu, 1), (mu, -1), (nu, -1), (mu, 1)],
        [(mu, -1), (nu, -1), (mu, 1), (nu, 1)],
        [(nu, -1), (mu, 1), (nu, 1), (mu, -1)],
    ]
    return sum(_matrix_log(loop_holonomy(links, lp)) for lp in loops) / 4.0


def _transport_endo_fwd(links, inv, mu, a):
    return links[mu] @ shift(a, mu, 1) @ inv[mu]


def _transport_endo_bwd(links, inv, mu, a):
    return shift(inv[mu] @ a @ links[mu], mu, -1)


def curvature(conn: ConnectionField) -> np.ndarray:
    """Curvature two-form F[mu, nu, *grid, k, k] with central differences.

    The link part is the clover-averaged plaquette logarithm; the correction
    contributes D_mu a_nu - D_nu a_mu + [a_mu, a_nu] with covariant central
    differences.  Antisymmetry is exact by construction.
    """
    grid = conn.grid
    h = grid.h_spacing
    dim = grid.dim
    links, a = conn.links, conn.corr
    inv = np.linalg.inv(links)
    da = np.empty((dim, dim) + a.shape[1:], dtype=complex)
    for mu in range(dim):
        for nu in range(dim):
            da[mu, nu] = (_transport_endo_fwd(links, inv, mu, a[nu])
                          - _transport_endo_bwd(links, inv, mu, a[nu])) / (2 * h)
    F = np.zeros((dim, dim) + a.shape[1:], dtype=complex)
    for mu, nu in combinations(range(dim), 2):
        val = _plaquette_log(links, mu, nu) / h ** 2
        val = val + da[mu, nu] - da[nu, mu] + a[mu] @ a[nu] - a[nu] @ a[mu]
        F[mu, nu] = val
        F[nu, mu] = -val
    return F


def trace_curvature_from_dets(grid: LatticeGrid, det_phase: np.ndarray) -> np.ndarray:
    """tr F from the unit-modulus determinants of link matrices.

    ``det_phase[mu]`` is det of the (effective) link at every x.  Plaquette
    angles are exact multiples of 2 pi per unit cell sum, so integrals of the
    result are exact integers times -2 pi i.
    """
    dim = grid.dim
    h = grid.h_spacing
    d = det_phase / np.abs(det_phase)
    out = np.zeros((dim, dim) + grid.shape, dtype=complex)
    for mu, nu in combinations(range(dim), 2):
        hol = d[mu] * shift(d[nu], mu, 1) * np.conj(shift(d[mu], nu, 1)) * np.conj(d[nu])
        val = 1j * np.angle(hol) / h ** 2
        out[mu, nu] = val
        out[nu, mu] = -val
    return out


def link_determinants(conn: ConnectionField) -> np.ndarray:
    """Determinants of the link matrices U_mu(x)."""
    return np.linalg.det(conn.links)


def trace_curvature(conn: ConnectionField) -> np.ndarray:
    """tr F with exact topology, shape ``(2m, 2m, *grid)``.

    The link part comes from determinant plaquette angles (each elementary
    cell contributes an angle in (-pi, pi], so the sum over a coordinate
    2-torus is exactly 2 pi times the twist).  The correction enters
    non-compactly through forward differences of tr a_mu, which telescope to
    zero over the torus, so the integrals are independent of the correction.
    """
    grid = conn.grid
    out = trace_curvature_from_dets(grid, link_determinants(conn))
    tr_a = np.trace(conn.corr, axis1=-2, axis2=-1)
    h = grid.h_spacing
    for mu, nu in combinations(range(grid.dim), 2):
        val = (shift(tr_a[nu], mu, 1) - tr_a[nu]) / h - (shift(tr_a[mu], nu, 1) - tr_a[mu]) / h
        out[mu, nu] += val
        out[nu, mu] -= val
    return out


# ---------------------------------------------------------------------------
# type decomposition and Chern-Weil forms
# ---------------------------------------------------------------------------


def _type_frame(m: int) -> np.ndarray:
    """Matrix T with dx_mu = sum_a T[mu, a] theta_a, theta = (dz_1..dz_m, dzbar_1..dzbar_m)."""
    T = np.zeros((2 * m, 2 * m), dtype=complex)
    for j in range(m):
        T[2 * j, j] = 0.5
        T[2 * j, m + j] = 0.5
        T[2 * j + 1, j] = 0.5 / 1j
        T[2 * j + 1, m + j] = -0.5 / 1j
    return T


def to_complex_frame(F: np.ndarray) -> np.ndarray:
    """Components of a two-form in the (dz, dzbar) frame, same array layout."""
    dim = F.shape[0]
    T = _type_frame(dim // 2)
    return np.einsum("ma,nb,mn...->ab...", T, T, F)


def from_complex_frame(Ft: np.ndarray) -> np.ndarray:
    dim = Ft.shape[0]
    Ti = np.linalg.inv(_type_frame(dim // 2))
    return np.einsum("am,bn,ab...->mn...", Ti, Ti, Ft)


def type_decompose(F: np.ndarray, grid: Optional[LatticeGrid] = None):
    """Split a two-form into its (2,0), (1,1) and (0,2) parts.

    Works for any trailing value shape.  For m = 1 the (2,0) and (0,2)
    parts vanish identically.
    """
    F = np.asarray(F)
    dim = F.shape[0]
    m = dim // 2
    if grid is not None and grid.dim != dim:
        raise GeometryError("two-form does not match grid dimension")
    Ft = to_complex_frame(F)
    hol = np.arange(dim) < m
    mask20 = np.outer(hol, hol)
    mask02 = np.outer(~hol, ~hol)
    mask11 = ~(mask20 | mask02)
    expand = (slice(None), slice(None)) + (None,) * (F.ndim - 2)
    parts = []
    for mask in (mask20, mask11, mask02):
        parts.append(from_complex_frame(Ft * mask[expand]))
    if m == 1:
        parts[0] = np.zeros_like(parts[0])
        parts[2] = np.zeros_like(parts[2])
        parts[1] = F.astype(complex)
    return tuple(parts)


def kahler_contraction(F: np.ndarray) -> np.ndarray:
    """Lambda F = sum_j F[2j, 2j+1] (contraction with omega = sum dx_{2j} ^ dx_{2j+1})."""
    dim = F.shape[0]
    return sum(F[2 * j, 2 * j + 1] for j in range(dim // 2))


def wedge_top(F: np.ndarray) -> np.ndarray:
    """Volume coefficient of tr(F ^ F) on T^4 for an endomorphism-valued F."""

    def tr(a, b):
        return np.trace(a @ b, axis1=-2, axis2=-1) if a.ndim > 2 and a.shape[-1] == a.shape[-2] else a * b

    return 2.0 * (tr(F[0, 1], F[2, 3]) - tr(F[0, 2], F[1, 3]) + tr(F[0, 3], F[1, 2]))


@dataclass
class ChernData:
    """Chern-Weil form and its integrals.

    ``form`` is tr F (shape ``(2m, 2m, *grid)``) for p = 1 and the volume
    coefficient of tr(F ^ F) for p = 2.  ``integrals[mu, nu]`` is the integral
    of tr F_{mu nu} (the pairing with the complementary constant form).
    """

    p: int
    form: np.ndarray
    integrals: np.ndarray
    chern_numbers: np.ndarray
    degree: Optional[float] = None


def chern_forms(conn: ConnectionField, p: int = 1) -> ChernData:
    """Chern-Weil data of a connection.

    For p = 1 the trace form is taken from link-determinant plaquettes, which
    makes the Chern numbers exact integers for any correction field.
    """
    grid = conn.grid
    if p > grid.m or p < 1:
        raise GeometryError(f"p={p} must satisfy 1 <= p <= m={grid.m}")
    if p == 1:
        trF = trace_curvature(conn)
        ints = grid.integrate(np.moveaxis(trF, (0, 1), (-2, -1)))
        chern = np.real(1j / (2 * np.pi) * ints)
        deg = float(sum(chern[2 * j, 2 * j + 1] for j in range(grid.m)))
        return ChernData(1, trF, ints, chern, deg)
    F = curvature(conn)
    top = wedge_top(F)
    total = grid.integrate(top)
    ch2 = np.real(0.5 * (1j / (2 * np.pi)) ** 2 * total)
    return ChernData(2, top, np.asarray(total), np.asarray(ch2))


# ---------------------------------------------------------------------------
# gauge transformations and metric compatibility
# ---------------------------------------------------------------------------


def apply_gauge(h: MetricField, family: Optional[np.ndarray], conn: ConnectionField,
                g: GaugeTransform):
    """Act with a gauge transformation on a (metric, family, connection) triple.

    Sections become ``g^{-1} s``, links ``g(x)^{-1} U_mu(x) g(x + mu)`` and
    corrections ``g^{-1} a g``; the metric becomes ``g^dagger h g``
    (i.e. h(g., g.)), which equals h for h-unitary g.
    """
    grid = conn.grid
    u = g.values
    if u.shape != grid.shape + (conn.k, conn.k):
        raise GeometryError(f"gauge field has shape {u.shape}")
    det = np.abs(np.linalg.det(u))
    if np.min(det) <= 1e-14 * max(1.0, float(np.max(det))):
        raise GeometryError("gauge transformation is singular at some grid point")
    uinv = np.linalg.inv(u)
    links = np.empty_like(conn.links)
    corr = np.empty_like(conn.corr)
    for mu in range(grid.dim):
        links[mu] = uinv @ conn.links[mu] @ shift(u, mu, 1)
        corr[mu] = uinv @ conn.corr[mu] @ u
    new_conn = ConnectionField(grid, conn.cfg, links, corr)
    if g.unitary:
        # unitary means h-unitary: the metric is left untouched
        new_h = MetricField(grid, h.values.copy(), None if h.grad is None else h.grad.copy())
    else:
        uh = _herm(u)
        grad = None if h.grad is None else uh @ h.grad @ u
        new_h = MetricField(grid, uh @ h.values @ u, grad)
    new_fam = None
    if family is not None:
        fam, single = _as_family(family, grid, conn.k)
        new_fam = uinv @ fam
        if single:
            new_fam = new_fam[..., 0]
    return new_h, new_fam, new_conn


def metric_jet(h: MetricField, conn: ConnectionField) -> np.ndarray:
    """Forward covariant derivative of h with respect to the link transport."""
    if h.grad is not None:
        return h.grad
    grid = conn.grid
    inv = np.linalg.inv(conn.links)
    out = np.empty((grid.dim,) + h.values.shape, dtype=complex)
    for mu in range(grid.dim):
        moved = _herm(inv[mu]) @ shift(h.values, mu, 1) @ inv[mu]
        out[mu] = (moved - h.values) / grid.h_spacing
    return out


def compatibility_residual(conn: ConnectionField, h: MetricField) -> float:
    """max over x, mu of the Frobenius norm of nabla_mu h - h a_mu - a_mu^dagger h."""
    jet = metric_jet(h, conn)
    res = jet - h.values @ conn.corr - _herm(conn.corr) @ h.values
    return float(np.max(np.linalg.norm(res, axis=(-2, -1))))


# ---------------------------------------------------------------------------
# seeded smooth fields
# ---------------------------------------------------------------------------


@dataclass
class TrigField:
    """Band-limited trigonometric polynomial sum_q c_q exp(2 pi i q.x).

    Keeps its coefficients so tests can evaluate exact derivatives.
    """

    modes: np.ndarray  # (M, 2m) integer wave vectors
    coeffs: np.ndarray  # (M, *tail)

    def evaluate(self, grid: LatticeGrid, deriv: Sequence[int] = ()) -> np.ndarray:
        x = grid.coords()
        phase = np.exp(2j * np.pi * np.tensordot(self.modes, x, axes=(1, 0)))
        fac = np.ones(len(self.modes), dtype=complex)
        for mu in deriv:
            fac = fac * 2j * np.pi * self.modes[:, mu]
        return np.tensordot(phase * fac[(slice(None),) + (None,) * grid.dim],
                            self.coeffs, axes=(0, 0))


def random_trig_field(grid: LatticeGrid, tail: Tuple[int, ...], rng: np.random.Generator,
                      kmax: int = 1, amplitude: float = 1.0, decay: float = 1.0) -> TrigField:
    """Seeded band-limited field with modes |q_mu| <= kmax."""
    axes = [np.arange(-kmax, kmax + 1)] * grid.dim
    modes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, grid.dim)
    size = (len(modes),) + tuple(tail)
    coeffs = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    damp = np.exp(-decay * np.sum(modes.astype(float) ** 2, axis=1))
    coeffs *= (amplitude * damp / np.sqrt(len(modes)))[(slice(None),) + (None,) * len(tail)]
    return TrigField(modes, coeffs)


def random_antihermitian_corr(grid: LatticeGrid, k: int, rng: np.random.Generator,
                              amplitude: float = 1.0, kmax: int = 1) -> np.ndarray:
    """Smooth anti-Hermitian correction field of shape ``(2m, *grid, k, k)``."""
    tf = random_trig_field(grid, (grid.dim, k, k), rng, kmax=kmax, amplitude=amplitude)
    x = np.moveaxis(tf.evaluate(grid), grid.dim, 0)
    return 0.5 * (x - _herm(x))


def random_unitary_gauge(grid: LatticeGrid, k: int, rng: np.random.Generator,
                         amplitude: float = 1.0, kmax: int = 1) -> GaugeTransform:
    """Smooth pointwise unitary gauge exp(X(x)) with X anti-Hermitian band-limited."""
    tf = random_trig_field(grid, (k, k), rng, kmax=kmax, amplitude=amplitude)
    x = tf.evaluate(grid)
    x = 0.5 * (x - _herm(x))
    w, v = np.linalg.eigh(-1j * x)
    u = v @ (np.exp(1j * w)[..., None] * _herm(v))
    return GaugeTransform(grid, u, unitary=True)
