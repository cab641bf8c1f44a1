"""Discrete Laplacians, Hermitian eigensolves, heat projections and the
heat-kernel expression for the curvature.

Operators are assembled as sparse matrices on the space of sections,
flattened as ``index = point * k + fibre``.  With ``Hb`` the block-diagonal
metric and ``w`` the quadrature weight, the L2 inner product is
``<u, v> = w v^dagger Hb u`` and every Laplacian has the form
``A = w sum_c C_c^dagger Hb C_c (+ w Hb W)`` so that the eigenproblem is the
generalized Hermitian pencil ``A psi = lambda (w Hb) psi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import ConnectionField, GeometryError, LatticeGrid, MetricField, _herm

DENSE_LIMIT = 2500


class SpectralError(RuntimeError):
    """Eigensolver failures."""


class CutoffError(ValueError):
    """Raised when the retained spectrum cannot resolve the requested heat time."""


def _point_index(grid: LatticeGrid) -> np.ndarray:
    return np.arange(grid.npoints).reshape(grid.shape)


def _block_matrix(rows: np.ndarray, cols: np.ndarray, blocks: np.ndarray, size: int, k: int):
    """Sparse matrix with k x k ``blocks[p]`` at block position (rows[p], cols[p])."""
    i = np.arange(k)
    r = (rows[:, None, None] * k + i[None, :, None]).repeat(k, axis=2)
    c = (cols[:, None, None] * k + i[None, None, :]).repeat(k, axis=1)
    return sp.csr_matrix((blocks.reshape(-1), (r.reshape(-1), c.reshape(-1))), shape=(size, size))


def block_diag_field(grid: LatticeGrid, blocks: np.ndarray):
    k = blocks.shape[-1]
    idx = _point_index(grid).reshape(-1)
    return _block_matrix(idx, idx, blocks.reshape(-1, k, k), grid.npoints * k, k)


def derivative_matrices(conn: ConnectionField) -> List[sp.csr_matrix]:
    """Sparse forward covariant derivatives D_mu (one per real direction)."""
    grid = conn.grid
    k = conn.k
    size = grid.npoints * k
    idx = _point_index(grid)
    eye = sp.identity(size, format="csr", dtype=complex)
    mats = []
    for mu in range(grid.dim):
        nbr = np.roll(idx, -1, axis=mu).reshape(-1)
        T = _block_matrix(idx.reshape(-1), nbr, conn.links[mu].reshape(-1, k, k), size, k)
        Acorr = block_diag_field(grid, conn.corr[mu])
        mats.append(((T - eye) / grid.h_spacing + Acorr).tocsr())
    return mats


@dataclass
class LaplacianOperator:
    """Handle for a discrete Laplacian and its mass matrix."""

    grid: LatticeGrid
    k: int
    kind: str
    A: sp.csr_matrix
    B: sp.csr_matrix
    hvals: np.ndarray

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def apply(self, s: np.ndarray) -> np.ndarray:
        """Matrix-free style application L s = B^{-1} A s to a section field."""
        flat = s.reshape(self.dim, -1)
        As = (self.A @ flat).reshape(self.grid.shape + (self.k, -1))
        hinv = np.linalg.inv(self.hvals)
        out = hinv @ As / self.grid.weight
        return out.reshape(s.shape)

    def inner(self, u: np.ndarray, v: np.ndarray) -> complex:
        uf, vf = u.reshape(-1), v.reshape(-1)
        return complex(np.vdot(vf, self.B @ uf))


def assemble_laplacian(conn: ConnectionField, h: MetricField, kind: str = "dbar",
                       W: Optional[np.ndarray] = None) -> LaplacianOperator:
    """Assemble ``dbar^* dbar`` (kind ``"dbar"``) or ``d^* d`` (kind ``"d"``).

    ``d^* d = sum_mu D_mu^* D_mu`` is the Bochner Laplacian; the adjoints are
    exact with respect to the discrete L2 product, so both are Hermitian PSD.
    ``W`` (shape ``(*grid, k, k)``, h-self-adjoint) adds a potential term.
    """
    grid = conn.grid
    k = conn.k
    w = grid.weight
    Hb = block_diag_field(grid, h.values)
    D = derivative_matrices(conn)
    if kind == "dbar":
        comps = [0.5 * (D[2 * j] + 1j * D[2 * j + 1]) for j in range(grid.m)]
    elif kind == "d":
        comps = D
    else:
        raise GeometryError(f"unknown Laplacian kind {kind!r}")
    A = sum(c.conj().T @ Hb @ c for c in comps) * w
    if W is not None:
        W = np.asarray(W, dtype=complex)
        hW = h.values @ W
        if np.max(np.abs(hW - _herm(hW))) > 1e-12 * max(1.0, np.max(np.abs(hW))):
            raise GeometryError("potential W is not self-adjoint with respect to h")
        A = A + block_diag_field(grid, 0.5 * (hW + _herm(hW))) * w
    A = ((A + A.conj().T) * 0.5).tocsr()
    B = (Hb * w).tocsr()
    return LaplacianOperator(grid, k, kind, A, B, h.values)


@dataclass
class SpectralData:
    """Lowest eigenpairs of a Laplacian; eigensections are L2-orthonormal."""

    grid: LatticeGrid
    k: int
    kind: str
    eigenvalues: np.ndarray
    vectors: np.ndarray  # (dim, count) flattened
    complete: bool = False

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def sections(self) -> np.ndarray:
        """Eigensections as a family array ``(*grid, k, count)``."""
        return self.vectors.reshape(self.grid.shape + (self.k, self.count))

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])


def _dense_solve(op: LaplacianOperator, count: Optional[int]):
    A = op.A.toarray()
    B = op.B.toarray()
    if count is None:
        w, v = sla.eigh(A, B)
    else:
        w, v = sla.eigh(A, B, subset_by_index=[0, count - 1])
    return w, v


def lowest_eigenpairs(op: LaplacianOperator, count: Optional[int] = None, seed: int = 0,
                      dense_limit: int = DENSE_LIMIT, tol: float = 1e-13,
                      maxiter: int = 20000) -> SpectralData:
    """Lowest ``count`` eigenpairs (all of them when ``count`` is None).

    Small problems use a dense generalized Hermitian solve; larger ones are
    reduced to standard form with the block Cholesky factor of the mass
    matrix and solved by implicitly restarted Lanczos (smallest algebraic
    eigenvalues) from a seeded starting vector.
    """
    n = op.dim
    if count is not None and not 0 < count < n:
        raise SpectralError(f"count must satisfy 0 < count < {n}, got {count}")
    if count is None or n <= dense_limit:
        w, v = _dense_solve(op, count)
        return SpectralData(op.grid, op.k, op.kind, w, v, complete=count is None)
    # standard form C = Lb^{-1} A Lb^{-dagger} with the block Cholesky factor of B
    L = np.linalg.cholesky(op.hvals) * np.sqrt(op.grid.weight)
    Linv = block_diag_field(op.grid, np.linalg.inv(L))
    C = (Linv @ op.A @ Linv.conj().T).tocsr()
    C = 0.5 * (C + C.conj().T)
    rng = np.random.default_rng(seed)
    v0 = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    ncv = min(n - 1, max(2 * count + 1, count + 40))
    try:
        w, phi = spla.eigsh(C, k=count, which="SA", v0=v0, tol=tol, ncv=ncv, maxiter=maxiter)
    except spla.ArpackNoConvergence as exc:
        raise SpectralError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(w)
    w, phi = w[order], phi[:, order]
    # Lanczos vectors of a Hermitian matrix: re-orthonormalize for safety
    q, r = np.linalg.qr(phi)
    phi = q * np.sign(np.real(np.diag(r)))[None, :]
    v = Linv.conj().T @ phi
    return SpectralData(op.grid, op.k, op.kind, w, v)


def residuals(op: LaplacianOperator, spec: SpectralData) -> np.ndarray:
    """Relative residual norms |A psi - lambda B psi| / (1 + lambda) in the B^{-1} norm."""
    R = op.A @ spec.vectors - (op.B @ spec.vectors) * spec.eigenvalues
    Binv_R = spla.spsolve(op.B.tocsc(), R) if R.shape[1] > 0 else R
    Binv_R = Binv_R.reshape(R.shape)
    norms = np.sqrt(np.abs(np.sum(R.conj() * Binv_R, axis=0)))
    return norms / (1 + np.abs(spec.eigenvalues))


# ---------------------------------------------------------------------------
# heat projection and curvature
# ---------------------------------------------------------------------------


@dataclass
class HeatProjection:
    t: float
    values: np.ndarray  # (*grid, k, k) diagonal kernel Pi_{N,t}(x, x)
    cutoff: int
    tail: float  # e^{-t lambda_max}

    def normalized_ratio(self, grid: LatticeGrid) -> np.ndarray:
        """(4 pi t)^{n/2} Pi_{N,t}(x, x), which tends to the identity as t -> 0."""
        return (4 * np.pi * self.t) ** (grid.dim / 2) * self.values


def _check_cutoff(spec: SpectralData, t: float, truncation_tol: float):
    if t <= 0:
        raise CutoffError(f"heat time must be positive, got {t}")
    tail = float(np.exp(-t * spec.lambda_max))
    if not spec.complete and tail > truncation_tol:
        raise CutoffError(
            f"spectral cutoff too small for t={t}: e^(-t*lambda_max) = {tail:.3e} "
            f"exceeds truncation tolerance {truncation_tol:.1e} "
            f"(lambda_max = {spec.lambda_max:.4g}, need >= {-np.log(truncation_tol) / t:.4g})")
    return tail


def heat_projection(spec: SpectralData, h: MetricField, t: float,
                    truncation_tol: float = 1e-12) -> HeatProjection:
    """Pi_{N,t}(x, x) = sum_j e^{-t lambda_j} psi_j(x) psi_j(x)^dagger h(x)."""
    tail = _check_cutoff(spec, t, truncation_tol)
    psi = spec.sections()
    wts = np.exp(-t * spec.eigenvalues)
    vals = (psi * wts) @ _herm(psi) @ h.values
    return HeatProjection(t, vals, spec.count, tail)


@dataclass
class HeatCurvature:
    """Heat-kernel curvature data at one time t.

    ``rhs`` is (4 pi t)^{n/2} sum_j e^{-t lambda_j} [D_mu psi (D_nu psi)^dagger h - (mu <-> nu)];
    ``normalized`` replaces the scalar prefactor by Pi_{N,t}^{-1}; ``dropped``
    is the product term that the asymptotic identity discards.
    """

    t: float
    rhs: np.ndarray
    normalized: np.ndarray
    dropped: np.ndarray


def entropy_curvature(spec: SpectralData, conn: ConnectionField, h: MetricField, t: float,
                      scheme: str = "central", truncation_tol: float = 1e-12) -> HeatCurvature:
    from .geometry import covariant_derivative

    _check_cutoff(spec, t, truncation_tol)
    grid = conn.grid
    psi = spec.sections()
    wts = np.exp(-t * spec.eigenvalues)
    D = covariant_derivative(conn, psi, scheme)
    hv = h.values
    Pi = (psi * wts) @ _herm(psi) @ hv
    Pinv = np.linalg.inv(Pi)
    dim = grid.dim
    pref = (4 * np.pi * t) ** (dim / 2)
    shape = (dim, dim) + grid.shape + (conn.k, conn.k)
    rhs = np.zeros(shape, dtype=complex)
    nrm = np.zeros(shape, dtype=complex)
    drop = np.zeros(shape, dtype=complex)
    kd = [(D[mu] * wts) @ _herm(psi) @ hv for mu in range(dim)]
    for mu in range(dim):
        for nu in range(mu + 1, dim):
            X = (D[mu] * wts) @ _herm(D[nu]) @ hv
            Y = (D[nu] * wts) @ _herm(D[mu]) @ hv
            core = X - Y
            rhs[mu, nu] = pref * core
            nrm[mu, nu] = core @ Pinv
            kd_nu = (psi * wts) @ _herm(D[nu]) @ hv
            kd_mu = (psi * wts) @ _herm(D[mu]) @ hv
            drop[mu, nu] = (kd[mu] @ Pinv @ kd_nu - kd[nu] @ Pinv @ kd_mu) @ Pinv
            for arr in (rhs, nrm, drop):
                arr[nu, mu] = -arr[mu, nu]
    return HeatCurvature(t, rhs, nrm, drop)


def lattice_heat_diagonal(n: int, t: float, m: int = 1) -> float:
    """Diagonal of the flat lattice heat kernel from the forward-difference symbol.

    The discrete Laplacian sum_mu D_mu^* D_mu has eigenvalues
    sum_mu (2 sin(pi q_mu / n) / h)^2 on plane waves, so the diagonal of
    e^{-tL} is the symbol sum (1-D factor raised to the real dimension).
    """
    q = np.arange(n)
    lam = (2 * n * np.sin(np.pi * q / n)) ** 2
    one = np.sum(np.exp(-t * lam))
    return float(one ** (2 * m))


def continuum_heat_diagonal(t: float, m: int = 1, vmax: int = 20) -> float:
    """Image sum sum_{v in Z^{2m}} (4 pi t)^{-m} e^{-|v|^2 / 4t} on the unit torus."""
    v = np.arange(-vmax, vmax + 1)
    one = np.sum(np.exp(-(v ** 2) / (4 * t))) / np.sqrt(4 * np.pi * t)
    return float(one ** (2 * m))
