"""Canonical map, pulled-back objects and their closed-form curvature."""

import numpy as np
import pytest

from canonflow.dynamics import minimize_subspace
from canonflow.geometry import (BundleConfig, LatticeGrid, MetricField,
                                build_reference_connection, compatibility_residual,
                                covariant_derivative, dbar_parts, random_antihermitian_corr)
from canonflow.grassmann import (balanced_density_gap, canonical_curvatures, canonical_map,
                                 canonical_trace_curvature, energy_ES, pullback_connection,
                                 pullback_metric, pullback_semiconnection, tension)
from canonflow.sections import energies, fourier_family, orthonormalize, random_family


def setup(n=16, k=1, N=4, twist=(), seed=0):
    g = LatticeGrid(1, n)
    cfg = BundleConfig.from_pairs(1, k, N, list(twist))
    rng = np.random.default_rng(seed)
    A = build_reference_connection(g, cfg).with_corr(random_antihermitian_corr(g, k, rng))
    h = MetricField.identity(g, k)
    return g, h, A, random_family(g, k, N, rng)


@pytest.mark.parametrize("k,N", [(1, 3), (2, 5)])
def test_projection_invariants(k, N):
    g, h, A, H = setup(k=k, N=N)
    V = canonical_map(h, H)
    assert V.idempotence_defect() < 1e-12
    assert V.hermiticity_defect() < 1e-13
    assert V.trace_defect(k) < 1e-12


def test_canonical_map_independent_of_basis():
    g, h, A, H = setup(k=2, N=4)
    rng = np.random.default_rng(9)
    X = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    W, _ = np.linalg.qr(X)
    V1 = canonical_map(h, H).V
    V2 = canonical_map(h, H.with_values(H.values @ W)).V
    # the projection is equivariant: V2 = W^dagger V1 W
    assert np.max(np.abs(V2 - W.conj().T @ V1 @ W)) < 1e-12


def test_constant_density_family_fixes_metric():
    g = LatticeGrid(1, 16)
    h = MetricField.identity(g, 1)
    H = orthonormalize(fourier_family(g, [[0, 0], [1, 0]]))
    assert np.max(np.abs(pullback_metric(h, H).values - 1.0)) < 1e-13


@pytest.mark.parametrize("seed", [0, 1])
def test_semiconnection_independent_of_starting_connection(seed):
    g, h, A, H = setup(k=2, N=5, seed=seed)
    A2 = A.with_corr(random_antihermitian_corr(g, 2, np.random.default_rng(100 + seed)))
    a1 = pullback_semiconnection(h, H, A).dbar_corr()
    a2 = pullback_semiconnection(h, H, A2).dbar_corr()
    assert np.max(np.abs(a1 - a2)) < 1e-12


def test_semiconnection_kills_span_component():
    g, h, A, H = setup(k=1, N=3)
    new = pullback_semiconnection(h, H, A)
    E = H.values
    B = dbar_parts(covariant_derivative(new, E))
    S = E @ np.conj(np.swapaxes(E, -1, -2))
    proj = B @ np.conj(np.swapaxes(E, -1, -2)) @ np.linalg.inv(S)
    assert np.max(np.abs(proj)) < 1e-10


def test_chern_completion_is_unitary():
    g, h, A, H = setup(k=2, N=4)
    new = pullback_semiconnection(h, H, A)
    a = new.corr
    assert np.max(np.abs(a + np.conj(np.swapaxes(a, -1, -2)))) < 1e-12
    kept = pullback_semiconnection(h, H, A, completion="keep")
    assert np.max(np.abs(kept.del_corr() - A.del_corr())) < 1e-14
    with pytest.raises(ValueError):
        pullback_semiconnection(h, H, A, completion="other")


@pytest.mark.parametrize("k,N", [(1, 3), (2, 4)])
def test_pullback_pair_is_compatible(k, N):
    g, h, A, H = setup(k=k, N=N)
    hn = pullback_metric(h, H, A)
    An = pullback_connection(h, H, A)
    assert compatibility_residual(An, hn) < 1e-10 * max(1.0, np.max(np.abs(hn.grad)))


def test_balanced_density_identity_and_ES_routes():
    g, h, A, H = setup(k=2, N=5, seed=3)
    assert balanced_density_gap(h, H, A) < 1e-10
    phiG = energies(h, H, A).Phi01_G
    assert energy_ES(h, H, A) == pytest.approx(phiG, rel=1e-10)


def test_closed_form_curvature_degree_converges():
    errs = []
    for n in (16, 32):
        g = LatticeGrid(1, n)
        A = build_reference_connection(g, BundleConfig.from_pairs(1, 1, 2, [(0, 1, 2)]))
        h = MetricField.identity(g, 1)
        H = minimize_subspace(h, A, 2, "d")
        errs.append(abs(canonical_curvatures(h, H, A).degree - 2))
        # the trace curvature of the pullback connection is exactly topological
        tr = canonical_trace_curvature(h, H, A)
        assert g.integrate(tr[0, 1]) == pytest.approx(-4j * np.pi, abs=1e-10)
    assert 3.2 <= errs[0] / errs[1] <= 4.8


def test_tension_of_constant_map_vanishes():
    g = LatticeGrid(1, 16)
    h = MetricField.identity(g, 1)
    A = build_reference_connection(g, BundleConfig.from_pairs(1, 1, 1))
    H = fourier_family(g, [[0, 0]])
    assert tension(h, H, A)[1] < 1e-12


def test_tension_of_symmetric_fourier_family_vanishes():
    # d^*d eigenspace of the first nonzero level: exp(+-2 pi i x_mu)
    g = LatticeGrid(1, 16)
    h = MetricField.identity(g, 1)
    A = build_reference_connection(g, BundleConfig.from_pairs(1, 1, 4))
    H = orthonormalize(fourier_family(g, [[1, 0], [-1, 0], [0, 1], [0, -1]]))
    Ab = pullback_connection(h, H, A, scheme="central")
    assert tension(h, H, Ab)[1] < 1e-10
    assert tension(h, H, Ab, bochner=True)[1] < 1e-10
