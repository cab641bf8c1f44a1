"""The discrete dynamical systems T^{0,1}, T and T_eps on triples
(metric, section space, connection), with the diagnostics recorded along a flow.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import (ConnectionField, GeometryError, LatticeGrid, MetricField, _herm,
                       corr_from_types, covariant_derivative, curvature, dbar_parts, shift,
                       to_complex_frame, type_decompose)
from .grassmann import (c_H, canonical_trace_curvature, f02_closed_form, pullback_connection,
                        pullback_metric, pullback_semiconnection)
from .sections import (AdmissibilityError, SectionFamily, _hnorm2, admissibility, energies,
                       evaluation_gram, orthonormalize, projection_diagonal)
from .spectral import assemble_laplacian, lowest_eigenpairs


@dataclass
class Triple:
    """A metric, an h-orthonormal family and a connection on the same bundle."""

    h: MetricField
    H: SectionFamily
    A: ConnectionField

    def __post_init__(self):
        if self.H.k != self.A.k or self.h.k != self.A.k:
            raise GeometryError("triple components have inconsistent fibre rank")
        if self.H.grid != self.A.grid:
            raise GeometryError("triple components live on different grids")

    @property
    def grid(self) -> LatticeGrid:
        return self.A.grid


# ---------------------------------------------------------------------------
# subspace selection
# ---------------------------------------------------------------------------


def _cluster_bounds(w: np.ndarray, N: int, rtol: float):
    """Indices [lo, hi) of the eigenvalue cluster containing w[N-1]."""
    ref = w[N - 1]
    tol = rtol * max(1.0, abs(ref))
    lo = N - 1
    while lo > 0 and abs(w[lo - 1] - ref) <= tol:
        lo -= 1
    hi = N
    while hi < len(w) and abs(w[hi] - ref) <= tol:
        hi += 1
    return lo, hi


def minimize_subspace(h: MetricField, conn: ConnectionField, N: int, kind: str = "dbar",
                      previous: Optional[SectionFamily] = None, seed: int = 0,
                      cluster_rtol: float = 1e-8, pad: int = 4) -> SectionFamily:
    """Span of the N lowest eigensections of dbar^* dbar (or d^* d).

    Degenerate clusters straddling the cut are resolved by the largest
    projection onto ``previous``; without a previous family, or on exact ties,
    the eigensolver's ordering is kept.
    """
    op = assemble_laplacian(conn, h, kind)
    count = min(N + pad, op.dim - 1)
    while True:
        spec = lowest_eigenpairs(op, count, seed=seed)
        lo, hi = _cluster_bounds(spec.eigenvalues, N, cluster_rtol)
        if hi < count or count == op.dim - 1:
            break
        count = min(2 * count, op.dim - 1)
    vecs = spec.vectors
    if hi > N:
        cluster = vecs[:, lo:hi]
        need = N - lo
        if previous is not None:
            prev = previous.values.reshape(op.dim, -1)
            overlap = cluster.conj().T @ (op.B @ prev)
            U, sv, _ = np.linalg.svd(overlap)
            chosen = cluster @ U[:, :need]
        else:
            chosen = cluster[:, :need]
        vecs = np.concatenate([vecs[:, :lo], chosen], axis=1)
    else:
        vecs = vecs[:, :N]
    fam = SectionFamily(conn.grid, vecs.reshape(conn.grid.shape + (conn.k, N)), h)
    return orthonormalize(fam)


def smooth_family(h: MetricField, conn: ConnectionField, N: int, rng: np.random.Generator,
                  pool: Optional[int] = None, seed: int = 0) -> SectionFamily:
    """Seeded random combinations of the lowest eigensections of d^* d.

    Gives smooth, generically admissible starting families on any bundle
    (including twisted ones, where periodic arrays are not smooth sections).
    """
    pool = pool or max(2 * N, N + 6)
    op = assemble_laplacian(conn, h, "d")
    spec = lowest_eigenpairs(op, min(pool, op.dim - 1), seed=seed)
    lam = spec.eigenvalues
    weights = 1.0 / np.sqrt(1.0 + lam / max(lam[-1], 1e-12))
    M = (rng.standard_normal((spec.count, N)) + 1j * rng.standard_normal((spec.count, N)))
    M *= weights[:, None]
    vals = spec.sections() @ M
    return orthonormalize(SectionFamily(conn.grid, vals, h))


# ---------------------------------------------------------------------------
# monitors
# ---------------------------------------------------------------------------


@dataclass
class HodgeMonitor:
    """Constant-form data of tr F_can and the inequality chain at one state."""

    avg_trF: np.ndarray
    avg20: np.ndarray
    avg11: np.ndarray
    avg02: np.ndarray
    hodge02_sq: float
    f02_l2: float
    phi01_x_phi: float
    f02_ratio: float
    f02_bound_ratio: float
    lq: Dict[float, Dict[str, float]] = field(default_factory=dict)


def _f02_pointwise_sq(H: SectionFamily, A: ConnectionField) -> np.ndarray:
    """|F^{0,2}_can|^2 = |F_{1bar 2bar}|^2 (dzbar-frame coefficient, h-Hilbert-Schmidt).

    Forms are measured by their coefficients in the (dz, dzbar) frame, the
    same convention in which e^{0,1} = sum_j |dbar_j s|^2.
    """
    X = f02_closed_form(H, A)
    hv = H.metric.values
    return np.real(np.trace(np.linalg.inv(hv) @ _herm(X) @ hv @ X, axis1=-2, axis2=-1))


def obstruction_monitor(triple: Triple, q_list: Sequence[float] = (),
                        report=None) -> HodgeMonitor:
    """Hodge data of the canonical trace curvature plus the (0,2) inequality checks.

    The average of tr F_can is the harmonic representative of its class on
    the flat torus; it is computed with exact topology, so its (0,2) part
    depends only on the twist.  The pointwise check compares |F^{0,2}_can|^2 with
    k N e^{0,1} e.
    """
    grid = triple.grid
    H, A = triple.H, triple.A
    trF = canonical_trace_curvature(triple.h, H, A)
    avg = grid.integrate(np.moveaxis(trF, (0, 1), (-2, -1)))
    a20, a11, a02 = type_decompose(avg)
    m = grid.m
    a02t = to_complex_frame(a02)
    hodge02 = float(sum(abs(a02t[m + j, m + l]) ** 2 for j in range(m) for l in range(j + 1, m)))
    rep = report if report is not None else energies(triple.h, H, A, q_list, split=False)
    phi_prod = rep.Phi01 * rep.Phi
    if grid.m == 2:
        f02 = _f02_pointwise_sq(H, A)
        f02_l2 = float(np.sqrt(grid.integrate(f02)))
        C = H.k * H.N
        denom = rep.e01 * rep.e
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(f02 > 1e-30, f02 / (C * denom), 0.0)
        adm = admissibility(projection_diagonal(H))
        # for h = I: |F_{1bar2bar}| <= |S^{-1}| (|dbar_1 E||del_2 E| + |dbar_2 E||del_1 E|),
        # then Cauchy-Schwarz gives |F^{0,2}|^2 <= |Pi^{-1}|^2 e^{0,1} e^{1,0}
        bound_C = adm.stability_constant ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            bratio = np.where(f02 > 1e-30, f02 / (bound_C * rep.e01 * rep.e10), 0.0)
        ineq = float(np.max(ratio))
        bineq = float(np.max(bratio))
    else:
        f02_l2, ineq, bineq = 0.0, 0.0, 0.0
    return HodgeMonitor(avg, a20, a11, a02, hodge02, f02_l2, phi_prod, ineq, bineq,
                        dict(rep.lq))


# ---------------------------------------------------------------------------
# flow steps
# ---------------------------------------------------------------------------


def state_row(triple: Triple, q_list: Sequence[float] = (), monitors: bool = True) -> Dict:
    """Energies, admissibility and monitor values of a triple."""
    rep = energies(triple.h, triple.H, triple.A, q_list, split=False)
    adm = admissibility(projection_diagonal(triple.H))
    row = {
        "phi01": rep.Phi01, "phi10": rep.Phi10, "phi": rep.Phi,
        "phi01_G": float("nan"), "min_sv": adm.min_singular_value,
        "stability": adm.stability_constant,
    }
    if adm.admissible:
        row["phi01_G"] = energies(triple.h, triple.H, triple.A, split=True).Phi01_G
    if monitors and adm.admissible:
        mon = obstruction_monitor(triple, q_list, rep)
        row.update({
            "f02_l2": mon.f02_l2, "hodge02_sq": mon.hodge02_sq,
            "phi01_x_phi": mon.phi01_x_phi, "f02_ratio": mon.f02_ratio,
            "f02_bound_ratio": mon.f02_bound_ratio,
        })
        iu = np.triu_indices(triple.grid.dim, 1)
        for mu, nu in zip(*iu):
            row[f"trF_{mu}{nu}"] = float(np.imag(mon.avg_trF[mu, nu]))
        for q, vals in rep.lq.items():
            row[f"lq{q:g}_e01"] = vals["e01"]
            row[f"lq{q:g}_e10"] = vals["e10"]
            row[f"lq{q:g}_e"] = vals["e"]
    return row


def step_T01(triple: Triple, seed: int = 0, q_list: Sequence[float] = (),
             monitors: bool = True):
    """One step of T^{0,1}: semiconnection update, then re-selection of H.

    Returns ``(new_triple, row)``; ``row["terminated"]`` is set when the
    re-selected family is not admissible (the flow cannot continue).
    """
    h, H, A = triple.h, triple.H, triple.A
    phi_in = energies(h, H, A, split=False).Phi01
    A_new = pullback_semiconnection(h, H, A)
    H_new = minimize_subspace(h, A_new, H.N, "dbar", previous=H, seed=seed)
    out = Triple(h, H_new, A_new)
    adm = admissibility(projection_diagonal(H_new))
    row = {"phi01_in": phi_in, "terminated": not adm.admissible}
    row.update(state_row(out, q_list, monitors))
    return out, row


def step_T(triple: Triple, seed: int = 0, q_list: Sequence[float] = (), monitors: bool = True):
    """One step of T: connection and metric pulled back, H re-selected by d^* d."""
    h, H, A = triple.h, triple.H, triple.A
    phi_in = energies(h, H, A, split=False).Phi01
    A_new = pullback_connection(h, H, A)
    h_new = pullback_metric(h, H, A)
    H_re = orthonormalize(H.with_metric(h_new))
    H_new = minimize_subspace(h_new, A_new, H.N, "d", previous=H_re, seed=seed)
    from .geometry import compatibility_residual

    out = Triple(h_new, H_new, A_new)
    adm = admissibility(projection_diagonal(H_new))
    row = {"phi01_in": phi_in, "terminated": not adm.admissible,
           "compat_residual": compatibility_residual(A_new, h_new)}
    row.update(state_row(out, q_list, monitors))
    return out, row


# ---------------------------------------------------------------------------
# regularized system
# ---------------------------------------------------------------------------


def _frame(hv: np.ndarray):
    L = np.linalg.cholesky(hv)
    return L, np.linalg.inv(L)


def _hermitian_pi(H: SectionFamily):
    """Pi in an h-orthonormal frame: Pi_hat = L^dagger S L (Hermitian)."""
    L, Linv = _frame(H.metric.values)
    S = evaluation_gram(H.values)
    P = _herm(L) @ S @ L
    return 0.5 * (P + _herm(P)), L, Linv


def kernel_projector(family: SectionFamily, rtol: float = 1e-10) -> np.ndarray:
    """h-orthogonal projection onto ker Pi(x, x) at every point, shape (*grid, k, k)."""
    P, L, Linv = _hermitian_pi(family)
    w, v = np.linalg.eigh(P)
    scale = max(float(np.max(w)), 1e-300)
    small = (w <= rtol * scale).astype(float)
    Khat = (v * small[..., None, :]) @ _herm(v)
    return _herm(Linv) @ Khat @ _herm(L)


def _pi_eps_power(family: SectionFamily, eps: float, power: float) -> np.ndarray:
    P, L, Linv = _hermitian_pi(family)
    w, v = np.linalg.eigh(P)
    X = (v * (w + eps)[..., None, :] ** power) @ _herm(v)
    return _herm(Linv) @ X @ _herm(L)


@dataclass
class EpsDiagnostics:
    eps: float
    eps_term: np.ndarray  # Pi_eps^{-1/2} (eps F_A) Pi_eps^{-1/2}
    kfk: np.ndarray  # K F_A K
    limit_error: float  # max |eps_term - K F_A K|
    conjugated_curvature: np.ndarray  # Pi_eps^{-1/2} F_{T_eps} Pi_eps^{1/2}


def step_T_eps(triple: Triple, eps: float, seed: int = 0, reselect: bool = True):
    """Regularized step with Pi_eps = Pi + eps I (no admissibility needed).

    The connection update is a - (D E) E^dagger h Pi_eps^{-1}, the metric
    c_H h Pi_eps^{-1}; H is re-orthonormalized and re-selected as in T.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    h, H, A = triple.h, triple.H, triple.A
    grid = triple.grid
    k = H.k
    E = H.values
    hv = h.values
    S = evaluation_gram(E)
    R = np.linalg.inv(S + eps * np.linalg.inv(hv))  # = h Pi_eps^{-1}
    D = covariant_derivative(A, E)
    A_new = A.with_corr(A.corr - D @ _herm(E) @ R)
    c = c_H(H)
    hvals = c * 0.5 * (R + _herm(R))
    h_new = MetricField(grid, hvals)
    H_re = orthonormalize(H.with_metric(h_new))
    if reselect:
        H_new = minimize_subspace(h_new, A_new, H.N, "d", previous=H_re, seed=seed)
    else:
        H_new = H_re

    F_A = curvature(A)
    m_half = _pi_eps_power(H, eps, -0.5)
    p_half = _pi_eps_power(H, eps, 0.5)
    K = kernel_projector(H)
    eps_term = eps * (m_half @ F_A @ m_half)
    kfk = K @ F_A @ K
    limit_error = float(np.max(np.abs(eps_term - kfk)))
    # closed form of the conjugated curvature: eps-term plus the section term
    Rm = _herm(E) @ np.linalg.inv(S + eps * np.linalg.inv(hv)) @ E  # E^dagger h Pi_eps^{-1} E
    Qe = np.eye(H.N) - Rm
    Dc = covariant_derivative(A, E, "central")
    conj = np.zeros_like(F_A)
    for mu in range(grid.dim):
        for nu in range(mu + 1, grid.dim):
            X = Dc[mu] @ Qe @ _herm(Dc[nu]) @ hv - Dc[nu] @ Qe @ _herm(Dc[mu]) @ hv
            val = eps_term[mu, nu] + m_half @ X @ m_half
            conj[mu, nu] = val
            conj[nu, mu] = -val
    diag = EpsDiagnostics(eps, eps_term, kfk, limit_error, conj)
    return Triple(h_new, H_new, A_new), diag


# ---------------------------------------------------------------------------
# gauge solitons
# ---------------------------------------------------------------------------


@dataclass
class SolitonResult:
    value: float
    gauge: np.ndarray
    history: List[float]
    converged: bool
    warning: Optional[str] = None


def _soliton_terms(before: ConnectionField, after: ConnectionField):
    grid = before.grid
    h = grid.h_spacing
    alpha, alpha2 = before.dbar_corr(), after.dbar_corr()
    U, U2 = before.links, after.links
    w = grid.weight

    def J(u):
        tot = 0.0
        for mu in range(grid.dim):
            R = U[mu] @ shift(u, mu, 1) - u @ U2[mu]
            tot += 0.25 / h ** 2 * np.sum(np.abs(R) ** 2)
        for j in range(grid.m):
            R = alpha[j] @ u - u @ alpha2[j]
            tot += np.sum(np.abs(R) ** 2)
        return float(tot * w)

    def grad(u):
        G = np.zeros_like(u)
        for mu in range(grid.dim):
            R = U[mu] @ shift(u, mu, 1) - u @ U2[mu]
            G += 0.25 / h ** 2 * (shift(_herm(U[mu]) @ R, mu, -1) - R @ _herm(U2[mu]))
        for j in range(grid.m):
            R = alpha[j] @ u - u @ alpha2[j]
            G += _herm(alpha[j]) @ R - R @ _herm(alpha2[j])
        return 2.0 * w * G

    return J, grad


def _retract(u: np.ndarray) -> np.ndarray:
    X, _, Yh = np.linalg.svd(u)
    return X @ Yh


def _hessian_preconditioner(grid: LatticeGrid, before: ConnectionField, after: ConnectionField):
    """Inverse of the leading part of the Hessian of J, by sparse LU.

    Near a minimizer, varying u -> u exp(X) changes the link residual by
    u [W X(x+mu) - X W] with W close to the target link U'_mu, so the
    Hessian is 2w [ (1/4h^2) sum_mu |X(x+mu) - W^{-1} X(x) W|^2 + c0 |X|^2 ]
    (adjoint covariant Laplacian), c0 being the mean size of the (0,1)
    corrections.
    """
    from scipy.sparse import csc_matrix, identity, kron as skron
    from scipy.sparse.linalg import splu

    h = grid.h_spacing
    k = before.k
    npts = grid.npoints
    dim = npts * k * k
    idx = np.arange(npts).reshape(grid.shape)
    L = None
    for mu in range(grid.dim):
        W = after.links[mu].reshape(npts, k, k)
        Winv = np.linalg.inv(W)
        # row-major vec(W^{-1} X W) = kron(W^{-1}, W^T) vec(X)
        blocks = np.einsum("pab,pdc->pacbd", Winv, W).reshape(npts, k * k, k * k)
        rows = np.repeat(np.arange(npts), (k * k) ** 2)
        r = (rows * k * k).reshape(npts, -1) + np.repeat(np.arange(k * k), k * k)[None, :]
        c = (np.arange(npts)[:, None] * k * k) + np.tile(np.arange(k * k), k * k)[None, :]
        T = csc_matrix((blocks.reshape(-1), (r.reshape(-1), c.reshape(-1))), shape=(dim, dim))
        nb = np.roll(idx, -1, axis=mu).reshape(-1)
        Sh = csc_matrix((np.ones(npts), (np.arange(npts), nb)), shape=(npts, npts))
        Dm = skron(Sh, identity(k * k), format="csc") - T
        term = (Dm.conj().T @ Dm) / (4.0 * h ** 2)
        L = term if L is None else L + term
    c0 = 0.0
    for a in (before.dbar_corr(), after.dbar_corr()):
        c0 += float(np.mean(np.sum(np.abs(a) ** 2, axis=(0, -2, -1))))
    L = 2.0 * grid.weight * (L + max(c0, 1.0) * identity(dim, format="csc"))
    lu = splu(csc_matrix(L))
    shape = grid.shape + (k, k)

    def apply(X):
        Y = lu.solve(X.reshape(-1)).reshape(shape)
        return 0.5 * (Y - _herm(Y))

    return apply


def soliton_residual(before: Triple, after: Triple, max_steps: int = 200, tol: float = 1e-20,
                     init: Optional[np.ndarray] = None) -> SolitonResult:
    """Minimize the gauge-fitting functional over pointwise unitary gauges.

    J(u) = int [ (1/4h^2) sum_mu |U_mu u(x+mu) - u U'_mu|^2 + sum_j |alpha_j u - u alpha'_j|^2 ]
    measures how far dbar_{A'} is from u^{-1} o dbar_A o u (stencil
    coefficients of the two difference operators).  Riemannian gradient
    descent on U(k)^{grid}, started from the identity: the Lie-algebra
    gradient is preconditioned by the inverse adjoint covariant Laplacian, trial
    steps are Barzilai-Borwein, and Armijo backtracking enforces descent.
    """
    A, A2 = before.A, after.A
    grid = A.grid
    k = A.k
    J, grad = _soliton_terms(A, A2)
    precond = _hessian_preconditioner(grid, A, A2)
    u = np.broadcast_to(np.eye(k, dtype=complex), grid.shape + (k, k)).copy() if init is None else init.copy()
    val = J(u)
    hist = [val]
    step = 1.0
    prev_g = prev_u = None
    converged = val <= tol
    for _ in range(max_steps):
        if converged:
            break
        G = grad(u)
        Xi = _herm(u) @ G
        Xi = 0.5 * (Xi - _herm(Xi))  # gradient in the Lie algebra
        d = precond(Xi)
        slope = float(np.real(np.vdot(Xi, d)))
        if slope <= 0.0:
            converged = val <= tol
            break
        if prev_g is not None:
            s = _herm(prev_u) @ u
            s = 0.5 * (s - _herm(s))
            y = Xi - prev_g
            sy = float(np.real(np.vdot(s, y)))
            if sy > 0:
                step = sy / float(np.real(np.vdot(y, precond(y))))
        t = step
        while True:
            w_, v_ = np.linalg.eigh(1j * d)
            expo = v_ @ (np.exp(1j * t * w_)[..., None] * _herm(v_))  # exp(-t d)
            cand = _retract(u @ expo)
            cval = J(cand)
            if cval <= val - 1e-4 * t * slope or t < 1e-20:
                break
            t *= 0.5
        if cval > val:
            break
        prev_g, prev_u = Xi, u
        u, val = cand, cval
        hist.append(val)
        if val <= tol:
            converged = True
    warn = None if converged else "soliton descent reached the step cap"
    return SolitonResult(val, u, hist, converged, warn)


# ---------------------------------------------------------------------------
# flow orchestration
# ---------------------------------------------------------------------------


@dataclass
class FlowConfig:
    kind: str = "T01"
    max_iters: int = 200
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    eps: float = 1e-3
    seed: int = 0
    q_list: Sequence[float] = ()
    monitors: bool = True
    soliton: bool = False
    config_hash: str = ""


@dataclass
class FlowTrace:
    rows: List[Dict] = field(default_factory=list)
    timings: List[float] = field(default_factory=list)
    converged: bool = False
    terminated: bool = False
    final: Optional[Triple] = None

    BASE_COLUMNS = ("iteration", "seed", "config_hash", "phi01_in", "phi01", "phi10", "phi",
                    "phi01_G", "min_sv", "stability", "f02_l2", "hodge02_sq", "phi01_x_phi",
                    "f02_ratio", "f02_bound_ratio", "soliton_residual",
                    "compat_residual", "terminated")

    def columns(self) -> List[str]:
        extra = sorted({key for r in self.rows for key in r} - set(self.BASE_COLUMNS))
        return list(self.BASE_COLUMNS) + extra

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)


class FlowStepError(RuntimeError):
    pass


def run_flow(triple: Triple, cfg: FlowConfig) -> FlowTrace:
    """Iterate the chosen system, recording one row per step."""
    trace = FlowTrace()
    state = triple
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        try:
            if cfg.kind == "T01":
                new, row = step_T01(state, cfg.seed, cfg.q_list, cfg.monitors)
            elif cfg.kind == "T":
                new, row = step_T(state, cfg.seed, cfg.q_list, cfg.monitors)
            elif cfg.kind == "T_eps":
                new, _ = step_T_eps(state, cfg.eps, cfg.seed)
                row = {"phi01_in": energies(state.h, state.H, state.A, split=False).Phi01}
                adm = admissibility(projection_diagonal(new.H))
                row["terminated"] = False
                row.update(state_row(new, cfg.q_list, cfg.monitors and adm.admissible))
            else:
                raise ValueError(f"unknown flow kind {cfg.kind!r}")
        except (AdmissibilityError, np.linalg.LinAlgError) as exc:
            raise FlowStepError(f"iteration {it}: {exc}") from exc
        if cfg.soliton:
            row["soliton_residual"] = soliton_residual(state, new).value
        row["iteration"] = it
        row["seed"] = cfg.seed
        row["config_hash"] = cfg.config_hash
        trace.rows.append(row)
        trace.timings.append(time.perf_counter() - t0)
        if row.get("terminated"):
            trace.terminated = True
            trace.final = new
            return trace
        prev_phi = row["phi01_in"]
        state = new
        if row["phi01"] < cfg.abs_tol:
            trace.converged = True
            break
        if abs(prev_phi - row["phi01"]) <= cfg.rel_tol * max(abs(prev_phi), 1e-300):
            trace.converged = True
            break
    trace.final = state
    return trace
