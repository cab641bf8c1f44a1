"""Section families, L2 Gram structure, the diagonal projection kernel and energies.

A family is stored as ``E`` with shape ``(*grid, k, N)``; column ``a`` is the
section ``s_a``.  Pointwise, ``S(x) = E E^dagger`` and the projection kernel on
the diagonal is ``Pi(x, x) = S(x) h(x)`` (for an L2-orthonormal family).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .geometry import (ConnectionField, GeometryError, LatticeGrid, MetricField, _herm,
                       covariant_derivative, dbar_parts, del_parts, random_trig_field)


class RankDeficiencyError(ValueError):
    """Raised when a family does not span an N-dimensional space."""


class AdmissibilityError(ValueError):
    """Raised when Pi(x, x) fails to be invertible where invertibility is needed."""


@dataclass
class SectionFamily:
    """N sections of a rank-k bundle together with the metric defining L2."""

    grid: LatticeGrid
    values: np.ndarray
    metric: MetricField

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        g = self.grid
        if self.values.ndim != g.dim + 2 or self.values.shape[: g.dim] != g.shape:
            raise GeometryError(f"family array has shape {self.values.shape}, grid is {g.shape}")
        if self.values.shape[g.dim] != self.metric.k:
            raise GeometryError("family fibre dimension does not match metric rank")

    @property
    def k(self) -> int:
        return self.values.shape[-2]

    @property
    def N(self) -> int:
        return self.values.shape[-1]

    def gram(self) -> np.ndarray:
        """G[a, b] = <s_a, s_b>_{L2} = int s_b^dagger h s_a."""
        E = self.values
        return self.grid.integrate(_herm(E) @ self.metric.values @ E).T

    def with_values(self, values: np.ndarray) -> "SectionFamily":
        return SectionFamily(self.grid, values, self.metric)

    def with_metric(self, metric: MetricField) -> "SectionFamily":
        return SectionFamily(self.grid, self.values, metric)


def orthonormalize(family: SectionFamily, cond_max: float = 1e12) -> SectionFamily:
    """Symmetric (Loewdin) orthonormalization: E -> E G^{-1/2}.

    Symmetric orthonormalization leaves an already orthonormal family
    unchanged and does not depend on the ordering of the sections.
    """
    G = family.gram().T  # Hermitian matrix of E^dagger h E
    G = 0.5 * (G + G.conj().T)
    w, v = np.linalg.eigh(G)
    wmax = float(np.max(w))
    if wmax <= 0:
        raise RankDeficiencyError("family is identically zero")
    bad = np.flatnonzero(w <= wmax / cond_max)
    if bad.size:
        raise RankDeficiencyError(
            f"rank-deficient family: Gram eigenvalue {w[bad[0]]:.3e} (index {bad[0]}) "
            f"<= {wmax / cond_max:.3e} = max eigenvalue / {cond_max:.0e}")
    C = (v / np.sqrt(w)) @ v.conj().T
    return family.with_values(family.values @ C)


def random_family(grid: LatticeGrid, k: int, N: int, rng: np.random.Generator,
                  metric: Optional[MetricField] = None, kmax: int = 1,
                  base: Optional[np.ndarray] = None, amplitude: float = 1.0) -> SectionFamily:
    """Seeded band-limited family, orthonormalized.

    ``base`` (shape ``(*grid, k, N)``) is added to the random part; this is
    how families on twisted bundles are generated (the smooth part must be
    multiplied into bundle-compatible sections first by the caller).
    """
    metric = MetricField.identity(grid, k) if metric is None else metric
    tf = random_trig_field(grid, (k, N), rng, kmax=kmax, amplitude=amplitude, decay=0.3)
    vals = tf.evaluate(grid)
    if base is not None:
        vals = vals + base
    return orthonormalize(SectionFamily(grid, vals, metric))


def fourier_family(grid: LatticeGrid, modes: Sequence[Sequence[int]], k: int = 1,
                   metric: Optional[MetricField] = None) -> SectionFamily:
    """Unimodular Fourier modes exp(2 pi i q.x) e_1 (not orthonormalized)."""
    metric = MetricField.identity(grid, k) if metric is None else metric
    x = grid.coords()
    cols = []
    for idx, q in enumerate(modes):
        q = np.asarray(q, dtype=float)
        if q.size != grid.dim:
            raise GeometryError(f"mode {list(q)} has wrong length for T^{grid.dim}")
        col = np.zeros(grid.shape + (k,), dtype=complex)
        col[..., idx % k] = np.exp(2j * np.pi * np.tensordot(q, x, axes=(0, 0)))
        cols.append(col)
    return SectionFamily(grid, np.stack(cols, axis=-1), metric)


# ---------------------------------------------------------------------------
# projection kernel and admissibility
# ---------------------------------------------------------------------------


@dataclass
class ProjectionDiagonal:
    """Pi(x, x) = sum_a s_a(x) <., s_a(x)>_h, shape ``(*grid, k, k)``."""

    grid: LatticeGrid
    values: np.ndarray
    metric: MetricField

    def trace_integral(self) -> float:
        return float(np.real(self.grid.integrate(np.trace(self.values, axis1=-2, axis2=-1))))

    def eigenvalues(self) -> np.ndarray:
        """Pointwise eigenvalues (Pi is h-self-adjoint, so they are real)."""
        L = np.linalg.cholesky(self.metric.values)
        S = self.values @ np.linalg.inv(self.metric.values)
        herm = _herm(L) @ S @ L
        return np.linalg.eigvalsh(0.5 * (herm + _herm(herm)))


def projection_diagonal(family: SectionFamily) -> ProjectionDiagonal:
    E = family.values
    return ProjectionDiagonal(family.grid, E @ _herm(E) @ family.metric.values, family.metric)


@dataclass
class Admissibility:
    min_singular_value: float
    stability_constant: float
    admissible: bool


def admissibility(pd: ProjectionDiagonal, rtol: float = 1e-12) -> Admissibility:
    """Smallest pointwise eigenvalue of Pi(x, x) and max of |Pi^{-1}|_op."""
    w = pd.eigenvalues()
    lo = float(np.min(w))
    hi = float(np.max(w))
    ok = lo > rtol * max(hi, 1e-300)
    return Admissibility(lo, 1.0 / lo if ok else float("inf"), ok)


def require_admissible(family: SectionFamily, what: str = "operation") -> Admissibility:
    adm = admissibility(projection_diagonal(family))
    if not adm.admissible:
        raise AdmissibilityError(
            f"{what} needs an admissible family; min eigenvalue of Pi(x,x) is "
            f"{adm.min_singular_value:.3e}")
    return adm


# ---------------------------------------------------------------------------
# pointwise algebra shared with the Grassmann module
# ---------------------------------------------------------------------------


def evaluation_gram(E: np.ndarray) -> np.ndarray:
    """S(x) = E E^dagger (so that h Pi^{-1} = S^{-1})."""
    return E @ _herm(E)


def canonical_operator(E: np.ndarray, Sinv: Optional[np.ndarray] = None) -> np.ndarray:
    """Operator matrix M = E^dagger S^{-1} E of the canonical projection.

    ``M[b, a] = <s_a, Pi^{-1} s_b>_h``; M is an orthogonal projection of rank k.
    """
    if Sinv is None:
        Sinv = np.linalg.inv(evaluation_gram(E))
    return _herm(E) @ Sinv @ E


def complement_projection(E: np.ndarray, Sinv: Optional[np.ndarray] = None) -> np.ndarray:
    N = E.shape[-1]
    return np.eye(N) - canonical_operator(E, Sinv)


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------


def _hnorm2(V: np.ndarray, hv: np.ndarray) -> np.ndarray:
    """sum over columns of |v|_h^2 for V of shape (..., k, N)."""
    return np.real(np.trace(_herm(V) @ hv @ V, axis1=-2, axis2=-1))


def _lq(grid: LatticeGrid, f: np.ndarray, q: float) -> float:
    if np.isinf(q):
        return float(np.max(np.abs(f)))
    return float(grid.integrate(np.abs(f) ** q) ** (1.0 / q))


@dataclass
class EnergyReport:
    """Energy densities, totals and L^q norms of a (metric, family, connection) triple."""

    e: np.ndarray
    e01: np.ndarray
    e10: np.ndarray
    e01_G: Optional[np.ndarray]
    e01_P: Optional[np.ndarray]
    e10_G: Optional[np.ndarray]
    Phi: float
    Phi01: float
    Phi10: float
    Phi01_G: Optional[float]
    lq: Dict[float, Dict[str, float]] = field(default_factory=dict)

    CSV_COLUMNS = ("q", "norm_e", "norm_e01", "norm_e10", "norm_e01_G", "norm_e01_P")

    def csv_rows(self):
        rows = []
        for q, vals in self.lq.items():
            rows.append([q] + [vals.get(c[5:], float("nan")) for c in self.CSV_COLUMNS[1:]])
        return rows


def type_derivatives(conn: ConnectionField, E: np.ndarray, scheme: str = "forward"):
    D = covariant_derivative(conn, E, scheme)
    return D, dbar_parts(D), del_parts(D)


def energies(h: MetricField, family: SectionFamily, conn: ConnectionField,
             q_list: Sequence[float] = (), split: bool = True) -> EnergyReport:
    """Energy densities with forward differences.

    e^{0,1} = sum_j |dbar_j s|^2, e^{1,0} = sum_j |del_j s|^2 and
    e = e^{0,1} + e^{1,0} = (1/2) sum_mu |D_mu s|^2.  The G-part is
    e^{0,1,G} = sum_j tr(Q (dbar_j E)^dagger h (dbar_j E)) with Q = I - M.
    """
    grid = family.grid
    E = family.values
    hv = h.values
    _, B, A = type_derivatives(conn, E)
    e01 = sum(_hnorm2(B[j], hv) for j in range(grid.m))
    e10 = sum(_hnorm2(A[j], hv) for j in range(grid.m))
    e = e01 + e10
    e01G = e01P = e10G = None
    PhiG = None
    if split:
        require_admissible(family, "the G/P energy split")
        Q = complement_projection(E)
        e01G = sum(np.real(np.trace(Q @ _herm(B[j]) @ hv @ B[j], axis1=-2, axis2=-1))
                   for j in range(grid.m))
        e10G = sum(np.real(np.trace(Q @ _herm(A[j]) @ hv @ A[j], axis1=-2, axis2=-1))
                   for j in range(grid.m))
        e01P = e01 - e01G
        PhiG = float(grid.integrate(e01G))
    lq = {}
    for q in q_list:
        q = float(q)
        d = {"e": _lq(grid, e, q), "e01": _lq(grid, e01, q), "e10": _lq(grid, e10, q)}
        if split:
            d["e01_G"] = _lq(grid, e01G, q)
            d["e01_P"] = _lq(grid, e01P, q)
        lq[q] = d
    return EnergyReport(e, e01, e10, e01G, e01P, e10G, float(grid.integrate(e)),
                        float(grid.integrate(e01)), float(grid.integrate(e10)), PhiG, lq)
