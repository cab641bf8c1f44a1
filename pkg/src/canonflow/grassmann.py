"""Canonical Grassmann map of an admissible family and the induced objects.

All formulas are evaluated pointwise with the k x N evaluation matrix E(x):

* ``S = E E^dagger`` and ``Pi = S h``, hence ``h Pi^{-1} = S^{-1}``;
* the canonical projection has operator matrix ``M = E^dagger S^{-1} E``
  (``M[b, a] = <s_a, Pi^{-1} s_b>``) and ``Q = I - M``;
* the pulled-back metric is ``c_H S^{-1}`` with ``c_H = N / k``;
* the pulled-back connection subtracts ``(D E) E^dagger S^{-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import (ConnectionField, LatticeGrid, MetricField, _herm, corr_from_types,
                       covariant_derivative, dbar_parts, del_parts, kahler_contraction, trace_curvature,
                       type_decompose)
from .sections import (SectionFamily, _hnorm2, complement_projection, evaluation_gram,
                       require_admissible)


@dataclass
class GrassmannField:
    """Pointwise N x N projection V(x) and its complement Q(x) = I - V(x).

    ``V`` is stored as the operator matrix on C^N; in the index convention
    V_ab = <s_a, Pi^{-1} s_b> this array is the transpose, ``V[b, a]``.
    """

    grid: LatticeGrid
    V: np.ndarray
    Q: np.ndarray

    def idempotence_defect(self) -> float:
        return float(np.max(np.abs(self.V @ self.V - self.V)))

    def hermiticity_defect(self) -> float:
        return float(np.max(np.abs(_herm(self.V) - self.V)))

    def trace_defect(self, k: int) -> float:
        return float(np.max(np.abs(np.trace(self.V, axis1=-2, axis2=-1) - k)))


def _pointwise_data(family: SectionFamily, what: str):
    require_admissible(family, what)
    E = family.values
    S = evaluation_gram(E)
    Sinv = np.linalg.inv(S)
    return E, S, Sinv


def canonical_map(h: MetricField, family: SectionFamily) -> GrassmannField:
    E, _, Sinv = _pointwise_data(family, "canonical_map")
    V = _herm(E) @ Sinv @ E
    V = 0.5 * (V + _herm(V))
    return GrassmannField(family.grid, V, np.eye(family.N) - V)


def s_lift(h: MetricField, family: SectionFamily) -> np.ndarray:
    """S_lift(x)[a, b] = <s_b(x), s_a(x)>_h arranged as the matrix E^dagger h E."""
    E = family.values
    return _herm(E) @ h.values @ E


def c_H(family: SectionFamily) -> float:
    return family.N / (family.k * family.grid.volume)


def pullback_metric(h: MetricField, family: SectionFamily,
                    conn: Optional[ConnectionField] = None) -> MetricField:
    """c_H h(., Pi^{-1} .) = c_H S^{-1}.

    When the bundle connection is supplied the exact covariant jet
    -c S^{-1} (delta S) S^{-1} is attached, where delta S is the link
    derivative of S.
    """
    E, S, Sinv = _pointwise_data(family, "pullback_metric")
    c = c_H(family)
    vals = c * Sinv
    vals = 0.5 * (vals + _herm(vals))
    grad = None
    if conn is not None:
        Dl = covariant_derivative(conn.with_corr(np.zeros_like(conn.corr)), E)
        dS = Dl @ _herm(E) + E @ _herm(Dl)
        grad = -c * Sinv @ dS @ Sinv
    return MetricField(family.grid, vals, grad)


def pullback_semiconnection(h: MetricField, family: SectionFamily, conn: ConnectionField,
                            completion: str = "chern") -> ConnectionField:
    """Semiconnection update dbar - dbar s_a <., Pi^{-1} s_a>.

    The new (0,1) correction is alpha - (dbar E) E^dagger S^{-1}; the result
    does not depend on the (0,1) part of the input connection.  The (1,0) part
    is completed to the Chern connection of h (``completion="chern"``) or left
    as it was (``completion="keep"``).
    """
    E, _, Sinv = _pointwise_data(family, "pullback_semiconnection")
    B = dbar_parts(covariant_derivative(conn, E))
    alpha = conn.dbar_corr() - B @ _herm(E) @ Sinv
    if completion == "chern":
        hv = h.values
        beta = -np.linalg.inv(hv) @ _herm(alpha) @ hv
    elif completion == "keep":
        beta = conn.del_corr()
    else:
        raise ValueError(f"unknown completion {completion!r}")
    return conn.with_corr(corr_from_types(alpha, beta))


def pullback_connection(h: MetricField, family: SectionFamily, conn: ConnectionField,
                        scheme: str = "forward") -> ConnectionField:
    """Full connection update d_A - d_A s_a <., Pi^{-1} s_a> in all directions."""
    E, _, Sinv = _pointwise_data(family, "pullback_connection")
    D = covariant_derivative(conn, E, scheme)
    return conn.with_corr(conn.corr - D @ _herm(E) @ Sinv)


@dataclass
class CanonicalCurvatures:
    F: np.ndarray  # (2m, 2m, *grid, k, k)
    F20: np.ndarray
    F11: np.ndarray
    F02: np.ndarray
    phi: np.ndarray  # (*grid, k, k)
    degree: float


def _closed_form(D, E, Q, Sinv, mu, nu):
    return (D[mu] @ Q @ _herm(D[nu]) - D[nu] @ Q @ _herm(D[mu])) @ Sinv


def canonical_curvatures(h: MetricField, family: SectionFamily, conn: ConnectionField,
                         scheme: str = "central", order: int = 2) -> CanonicalCurvatures:
    """Closed-form curvature of the pulled-back connection.

    F_{mu nu} = [D_mu E Q (D_nu E)^dagger - D_nu E Q (D_mu E)^dagger] S^{-1};
    only covariant derivatives of the sections enter, never differences of
    the induced connection.  The degree is evaluated from the trace formula
    (1/pi) int sum_j tr[(del_j E Q del_j E^dagger - dbar_j E Q dbar_j E^dagger) S^{-1}].
    """
    grid = family.grid
    E, _, Sinv = _pointwise_data(family, "canonical_curvatures")
    Q = complement_projection(E, Sinv)
    D = covariant_derivative(conn, E, scheme, order)
    dim = grid.dim
    F = np.zeros((dim, dim) + grid.shape + (family.k, family.k), dtype=complex)
    for mu in range(dim):
        for nu in range(mu + 1, dim):
            val = _closed_form(D, E, Q, Sinv, mu, nu)
            F[mu, nu] = val
            F[nu, mu] = -val
    F20, F11, F02 = type_decompose(F)
    phi = kahler_contraction(F11) / grid.m
    B, A = dbar_parts(D), del_parts(D)
    dens = sum(np.trace((A[j] @ Q @ _herm(A[j]) - B[j] @ Q @ _herm(B[j])) @ Sinv,
                        axis1=-2, axis2=-1) for j in range(grid.m))
    degree = float(np.real(grid.integrate(dens)) / np.pi)
    return CanonicalCurvatures(F, F20, F11, F02, phi, degree)


def f02_closed_form(family: SectionFamily, conn: ConnectionField, scheme: str = "forward"):
    """(0,2) curvature component in the complex frame for m = 2.

    Returns F_{1bar 2bar} = [dbar_1 E Q (del_2 E)^dagger - dbar_2 E Q (del_1 E)^dagger] S^{-1}.
    """
    E, _, Sinv = _pointwise_data(family, "f02_closed_form")
    Q = complement_projection(E, Sinv)
    D = covariant_derivative(conn, E, scheme)
    B, A = dbar_parts(D), del_parts(D)
    return (B[0] @ Q @ _herm(A[1]) - B[1] @ Q @ _herm(A[0])) @ Sinv


def canonical_trace_curvature(h: MetricField, family: SectionFamily,
                               conn: ConnectionField) -> np.ndarray:
    """tr F of the pulled-back connection with exact topology (see
    :func:`canonflow.geometry.trace_curvature`), shape ``(2m, 2m, *grid)``."""
    return trace_curvature(pullback_connection(h, family, conn))


def tension(h: MetricField, family: SectionFamily, conn: ConnectionField,
            bochner: bool = False, order: int = 2):
    """Tension field of the canonical map (operator-matrix form) and its L2 norm.

    With B_j = E^dagger S^{-1} D_j E and C = E^dagger S^{-1} sum_j D_j D_j E,

        tau = sum_j (2 B_j^2 Q + 2 Q (B_j^dagger)^2) - C Q - Q C^dagger.

    ``bochner=True`` drops the second-derivative terms, which is legitimate
    only when the sections satisfy the Bochner identity with a balanced
    connection.  Derivatives use central differences.
    """
    grid = family.grid
    E, _, Sinv = _pointwise_data(family, "tension")
    Q = complement_projection(E, Sinv)
    D = covariant_derivative(conn, E, "central", order)
    Eh = _herm(E) @ Sinv
    tau = np.zeros(grid.shape + (family.N, family.N), dtype=complex)
    for mu in range(grid.dim):
        Bm = Eh @ D[mu]
        tau += 2.0 * (Bm @ Bm @ Q + Q @ _herm(Bm) @ _herm(Bm))
    if not bochner:
        D2 = sum(covariant_derivative(conn, D[mu], "central", order)[mu] for mu in range(grid.dim))
        C = Eh @ D2
        tau -= C @ Q + Q @ _herm(C)
    resid = float(np.sqrt(grid.integrate(np.sum(np.abs(tau) ** 2, axis=(-2, -1)))))
    return tau, resid


def _psd_sqrt(X: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (X + _herm(X)))
    w = np.clip(w, 0.0, None)
    return v @ (np.sqrt(w)[..., None] * _herm(v))


def energy_ES(h: MetricField, family: SectionFamily, conn: ConnectionField) -> float:
    """E_S of the canonical map: int sum_j |S_lift^{1/2} dbar_j i|^2 with
    dbar_j i = E^dagger S^{-1} (dbar_j E) Q (forward differences)."""
    grid = family.grid
    E, _, Sinv = _pointwise_data(family, "energy_ES")
    Q = complement_projection(E, Sinv)
    B = dbar_parts(covariant_derivative(conn, E))
    root = _psd_sqrt(s_lift(h, family))
    dens = 0.0
    for j in range(grid.m):
        X = root @ (_herm(E) @ Sinv @ B[j]) @ Q
        dens = dens + np.sum(np.abs(X) ** 2, axis=(-2, -1))
    return float(grid.integrate(dens))


def balanced_density_gap(h: MetricField, family: SectionFamily, conn: ConnectionField) -> float:
    """max |e^{0,1}(dbar_new) - e^{0,1,G}(dbar_old)| over the grid."""
    from .sections import energies

    new = pullback_semiconnection(h, family, conn)
    e_new = energies(h, family, new, split=False).e01
    e_old = energies(h, family, conn).e01_G
    return float(np.max(np.abs(e_new - e_old)))
