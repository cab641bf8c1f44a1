import numpy as np
import pytest

from canonflow.geometry import (BundleConfig, LatticeGrid, MetricField, apply_gauge,
                                build_reference_connection, random_antihermitian_corr,
                                random_unitary_gauge)
from canonflow.spectral import (CutoffError, SpectralError, assemble_laplacian,
                                continuum_heat_diagonal, entropy_curvature, heat_projection,
                                lattice_heat_diagonal, lowest_eigenpairs, residuals)


def bundle(n, c=0, k=1, m=1):
    g = LatticeGrid(m, n)
    pairs = [(0, 1, c)] if c else []
    A = build_reference_connection(g, BundleConfig.from_pairs(m, k, 1, pairs))
    return g, A, MetricField.identity(g, k)


def forward_symbols(n):
    q = np.arange(n)
    return (np.exp(2j * np.pi * q / n) - 1) * n


def test_flat_dbar_spectrum_matches_symbol():
    # forward dbar = (D_0 + i D_1)/2 acts on plane waves by (s_p + i s_q)/2
    n = 8
    g, A, h = bundle(n)
    s = forward_symbols(n)
    oracle = np.sort((np.abs(s[:, None] + 1j * s[None, :]) ** 2 / 4).ravel())
    spec = lowest_eigenpairs(assemble_laplacian(A, h, "dbar"))
    assert spec.complete
    assert np.max(np.abs(spec.eigenvalues - oracle)) < 1e-9


def test_flat_bochner_spectrum_matches_symbol():
    n = 10
    g, A, h = bundle(n)
    lam = (2 * n * np.sin(np.pi * np.arange(n) / n)) ** 2
    oracle = np.sort((lam[:, None] + lam[None, :]).ravel())
    spec = lowest_eigenpairs(assemble_laplacian(A, h, "d"))
    assert np.max(np.abs(spec.eigenvalues - oracle)) < 1e-9


def test_forward_dbar_has_extra_zero_at_multiples_of_four():
    # the symbol s_p + i s_q also vanishes at (p, q) = (n/4, 3n/4)-type pairs
    spec8 = lowest_eigenpairs(assemble_laplacian(*bundle(8)[1:], "dbar"), 4)
    spec10 = lowest_eigenpairs(assemble_laplacian(*bundle(10)[1:], "dbar"), 4)
    assert np.sum(spec8.eigenvalues < 1e-10) == 2
    assert np.sum(spec10.eigenvalues < 1e-10) == 1


@pytest.mark.parametrize("c", [1, 2, 3])
def test_holomorphic_sections_count_degree(c):
    g, A, h = bundle(16, c)
    spec = lowest_eigenpairs(assemble_laplacian(A, h, "dbar"), c + 2)
    assert np.sum(spec.eigenvalues < 1e-6) == c
    assert spec.eigenvalues[c] > 1.0


def test_lowest_landau_level_of_bochner_laplacian():
    # continuum: lowest eigenvalue 2 pi c with multiplicity c, next level 6 pi c
    c = 2
    g, A, h = bundle(32, c)
    w = lowest_eigenpairs(assemble_laplacian(A, h, "d"), 4).eigenvalues
    assert w[1] - w[0] < 1e-8
    assert w[0] == pytest.approx(2 * np.pi * c, rel=0.02)
    assert w[2] == pytest.approx(6 * np.pi * c, rel=0.05)


def test_operator_is_self_adjoint_and_psd():
    g, A, h = bundle(8, 1, k=2)
    A = A.with_corr(random_antihermitian_corr(g, 2, np.random.default_rng(0)))
    op = assemble_laplacian(A, h, "dbar")
    rng = np.random.default_rng(1)
    u = rng.standard_normal(op.dim) + 1j * rng.standard_normal(op.dim)
    v = rng.standard_normal(op.dim) + 1j * rng.standard_normal(op.dim)
    lhs, rhs = op.inner(op.apply(u), v), op.inner(u, op.apply(v))
    assert abs(lhs - rhs) <= 1e-12 * abs(lhs)
    assert np.real(op.inner(op.apply(u), u)) >= 0


def test_sparse_and_dense_paths_agree():
    g, A, h = bundle(16, 2)
    A = A.with_corr(random_antihermitian_corr(g, 1, np.random.default_rng(2)))
    op = assemble_laplacian(A, h, "d")
    dense = lowest_eigenpairs(op, 6)
    sparse = lowest_eigenpairs(op, 6, dense_limit=0)
    assert np.max(np.abs(dense.eigenvalues - sparse.eigenvalues)) < 1e-9
    assert np.max(residuals(op, sparse)) < 1e-9
    # L2 orthonormality of the returned sections
    V = sparse.vectors
    gram = V.conj().T @ (op.B @ V)
    assert np.max(np.abs(gram - np.eye(6))) < 1e-10


def test_eigen_count_validation():
    g, A, h = bundle(4)
    with pytest.raises(SpectralError):
        lowest_eigenpairs(assemble_laplacian(A, h), 16)


def test_heat_diagonal_equals_lattice_symbol_oracle():
    n, t = 16, 0.01
    g, A, h = bundle(n)
    spec = lowest_eigenpairs(assemble_laplacian(A, h, "d"))
    hp = heat_projection(spec, h, t)
    assert np.max(np.abs(hp.values[..., 0, 0] - lattice_heat_diagonal(n, t))) < 1e-10


def test_lattice_heat_diagonal_tends_to_continuum():
    t = 0.01
    errs = [abs(lattice_heat_diagonal(n, t) / continuum_heat_diagonal(t) - 1) for n in (32, 64)]
    assert errs[1] < errs[0] < 0.02
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


def test_cutoff_violation_names_the_tail():
    g, A, h = bundle(16, 1)
    spec = lowest_eigenpairs(assemble_laplacian(A, h, "d"), 10)
    with pytest.raises(CutoffError, match=r"e\^\(-t\*lambda_max\)"):
        heat_projection(spec, h, 0.01)
    with pytest.raises(CutoffError):
        heat_projection(spec, h, -1.0)


def test_flat_heat_curvature_vanishes():
    g, A, h = bundle(16)
    spec = lowest_eigenpairs(assemble_laplacian(A, h, "d"))
    hc = entropy_curvature(spec, A, h, 0.01)
    assert np.max(np.abs(hc.rhs)) <= 1e-10


def test_heat_curvature_gauge_covariant_and_antihermitian():
    g, A, h = bundle(8, 1, k=2)
    rng = np.random.default_rng(3)
    A = A.with_corr(random_antihermitian_corr(g, 2, rng))
    gt = random_unitary_gauge(g, 2, rng)
    _, _, Ag = apply_gauge(h, None, A, gt)
    t = 0.02
    hc = entropy_curvature(lowest_eigenpairs(assemble_laplacian(A, h, "d")), A, h, t)
    hg = entropy_curvature(lowest_eigenpairs(assemble_laplacian(Ag, h, "d")), Ag, h, t)
    u = gt.values
    assert np.max(np.abs(hg.rhs - np.linalg.inv(u) @ hc.rhs @ u)) < 1e-9
    R = hc.rhs[0, 1]
    assert np.max(np.abs(R + np.conj(np.swapaxes(R, -1, -2)))) < 1e-9


def test_cutoff_robustness():
    g, A, h = bundle(16, 1)
    op = assemble_laplacian(A, h, "d")
    t, tol = 0.1, 1e-12
    a = entropy_curvature(lowest_eigenpairs(op, 100), A, h, t, truncation_tol=tol)
    b = entropy_curvature(lowest_eigenpairs(op, 200), A, h, t, truncation_tol=tol)
    assert np.max(np.abs(a.rhs - b.rhs)) <= 10 * tol
