import numpy as np
import pytest

from canonflow.geometry import (BundleConfig, GaugeTransform, GeometryError, LatticeGrid,
                                MetricField, apply_gauge, build_reference_connection, chern_forms,
                                compatibility_residual, covariant_derivative, curvature, dbar,
                                delp, from_complex_frame, kahler_contraction, loop_holonomy,
                                random_antihermitian_corr, random_trig_field, random_unitary_gauge,
                                to_complex_frame, trace_curvature, type_decompose)


def flat(m=1, n=16, k=1, N=2):
    g = LatticeGrid(m, n)
    return g, build_reference_connection(g, BundleConfig.from_pairs(m, k, N))


def test_grid_basics():
    g = LatticeGrid(2, 6)
    assert g.dim == 4 and g.shape == (6, 6, 6, 6) and g.npoints == 6 ** 4
    assert g.integrate(np.ones(g.shape)) == pytest.approx(1.0)
    x = g.coords()
    assert x.shape == (4, 6, 6, 6, 6)
    assert x[1, 0, 5, 0, 0] == pytest.approx(5 / 6)


@pytest.mark.parametrize("m,n", [(3, 8), (1, 3)])
def test_grid_rejects_bad_sizes(m, n):
    with pytest.raises(GeometryError):
        LatticeGrid(m, n)


def test_bundle_config_validation():
    cfg = BundleConfig.from_pairs(2, 1, 3, [(0, 2, 1)])
    assert cfg.twist[0, 2] == 1 and cfg.twist[2, 0] == -1
    with pytest.raises(GeometryError):
        BundleConfig(k=1, twist=np.array([[0, 1], [1, 0]]), N=1)
    with pytest.raises(GeometryError):
        BundleConfig(k=1, twist=np.array([[0, 0.5], [-0.5, 0]]), N=1)
    with pytest.raises(GeometryError):
        cfg.check_grid(LatticeGrid(1, 8))


def test_forward_derivative_plane_wave_symbol():
    g, A = flat(n=12)
    x = g.coords()
    s = np.exp(2j * np.pi * (2 * x[0] - x[1]))[..., None]
    D = covariant_derivative(A, s)
    h = g.h_spacing
    for mu, q in enumerate((2, -1)):
        sym = (np.exp(2j * np.pi * q * h) - 1) / h
        assert np.max(np.abs(D[mu] - sym * s)) < 1e-12


@pytest.mark.parametrize("order,rate", [(2, 4.0), (4, 16.0), (6, 64.0)])
def test_central_difference_orders(order, rate):
    errs = []
    for n in (16, 32):
        g, A = flat(n=n)
        tf = random_trig_field(g, (1,), np.random.default_rng(3), kmax=2)
        s = tf.evaluate(g)
        exact = tf.evaluate(g, deriv=(0,))
        D = covariant_derivative(A, s, "central", order)
        errs.append(np.max(np.abs(D[0] - exact)))
    assert errs[0] / errs[1] == pytest.approx(rate, rel=0.15)


def test_dbar_of_antiholomorphic_and_holomorphic_modes():
    # exp(2 pi i x) with z = x0 + i x1: in the continuum dbar e^{2 pi i x0} = pi i e^{...}
    # and dbar e^{2 pi i x1} = (i/2)(2 pi i) e = -pi e, del e^{2 pi i x1} = +pi e
    g, A = flat(n=64)
    x = g.coords()
    s = np.exp(2j * np.pi * x[0])[..., None]
    t = np.exp(2j * np.pi * x[1])[..., None]
    assert np.max(np.abs(dbar(A, s, "central")[0] - 1j * np.pi * s)) < 0.01
    assert np.max(np.abs(delp(A, s, "central")[0] - 1j * np.pi * s)) < 0.01
    assert np.max(np.abs(dbar(A, t, "central")[0] + np.pi * t)) < 0.01
    assert np.max(np.abs(delp(A, t, "central")[0] - np.pi * t)) < 0.01


@pytest.mark.parametrize("c", [1, 2, -3])
def test_reference_connection_constant_curvature(c):
    g = LatticeGrid(1, 10)
    A = build_reference_connection(g, BundleConfig.from_pairs(1, 1, 1, [(0, 1, c)]))
    F = curvature(A)
    assert np.max(np.abs(F[0, 1] + 2j * np.pi * c)) < 1e-10
    plaq = loop_holonomy(A.links, [(0, 1), (1, 1), (0, -1), (1, -1)])
    assert np.max(np.abs(plaq - np.exp(-2j * np.pi * c * g.h_spacing ** 2))) < 1e-12


def test_chern_numbers_exact_under_perturbation_and_gauge():
    g = LatticeGrid(2, 6)
    cfg = BundleConfig.from_pairs(2, 2, 3, [(0, 1, 1), (0, 2, -2), (1, 3, 1)])
    A = build_reference_connection(g, cfg)
    rng = np.random.default_rng(0)
    for _ in range(3):
        Ap = A.with_corr(random_antihermitian_corr(g, 2, rng, amplitude=2.0))
        ch = chern_forms(Ap)
        assert np.max(np.abs(ch.chern_numbers - cfg.twist)) < 1e-10
        _, _, Ag = apply_gauge(MetricField.identity(g, 2), None, Ap, random_unitary_gauge(g, 2, rng))
        assert np.max(np.abs(chern_forms(Ag).chern_numbers - cfg.twist)) < 1e-10


def test_trace_curvature_average_is_topological():
    g = LatticeGrid(1, 12)
    A = build_reference_connection(g, BundleConfig.from_pairs(1, 1, 1, [(0, 1, 2)]))
    Ap = A.with_corr(random_antihermitian_corr(g, 1, np.random.default_rng(5), amplitude=3.0))
    tr = trace_curvature(Ap)
    assert g.integrate(tr[0, 1]) == pytest.approx(-4j * np.pi, abs=1e-10)


def test_second_chern_of_product_twist():
    # c_01 = c_23 = 1: the second Chern character integrates to c_01 * c_23
    g = LatticeGrid(2, 6)
    cfg = BundleConfig.from_pairs(2, 1, 1, [(0, 1, 1), (2, 3, 1)])
    ch = chern_forms(build_reference_connection(g, cfg), p=2)
    assert float(ch.chern_numbers) == pytest.approx(1.0, abs=1e-8)


def test_curvature_gauge_covariance():
    g, A = flat(n=10, k=2)
    rng = np.random.default_rng(1)
    A = A.with_corr(random_antihermitian_corr(g, 2, rng))
    gt = random_unitary_gauge(g, 2, rng)
    _, _, Ag = apply_gauge(MetricField.identity(g, 2), None, A, gt)
    u = gt.values
    F = curvature(A)
    assert np.max(np.abs(curvature(Ag) - np.linalg.inv(u) @ F @ u)) < 1e-10


def test_covariant_derivative_gauge_covariance():
    g, A = flat(n=8, k=2)
    rng = np.random.default_rng(2)
    A = A.with_corr(random_antihermitian_corr(g, 2, rng))
    s = random_trig_field(g, (2,), rng).evaluate(g)
    gt = random_unitary_gauge(g, 2, rng)
    _, s2, A2 = apply_gauge(MetricField.identity(g, 2), s, A, gt)
    uinv = np.linalg.inv(gt.values)
    D, D2 = covariant_derivative(A, s), covariant_derivative(A2, s2)
    for mu in range(g.dim):
        assert np.max(np.abs(D2[mu] - (uinv @ D[mu][..., None])[..., 0])) < 1e-12


def test_smooth_curvature_second_order():
    errs = []
    for n in (16, 32):
        g = LatticeGrid(1, n)
        A = build_reference_connection(g, BundleConfig.from_pairs(1, 1, 1))
        tf = random_trig_field(g, (2, 1, 1), np.random.default_rng(4))
        a = np.moveaxis(tf.evaluate(g), g.dim, 0)
        a = 0.5 * (a - np.conj(a))
        d10 = np.moveaxis(tf.evaluate(g, deriv=(0,)), g.dim, 0)
        d01 = np.moveaxis(tf.evaluate(g, deriv=(1,)), g.dim, 0)
        exact = 0.5 * (d10[1] - np.conj(d10[1])) - 0.5 * (d01[0] - np.conj(d01[0]))
        F = curvature(A.with_corr(a))
        errs.append(np.max(np.abs(F[0, 1] - exact)))
    assert 3.2 <= errs[0] / errs[1] <= 4.8


def test_type_decomposition_of_dx0_dx2():
    F = np.zeros((4, 4), dtype=complex)
    F[0, 2], F[2, 0] = 1.0, -1.0
    f20, f11, f02 = type_decompose(F)
    assert np.allclose(f20 + f11 + f02, F)
    Ft = to_complex_frame(f02)
    # only the dzbar_1 ^ dzbar_2 coefficient survives, equal to 1/4
    assert Ft[2, 3] == pytest.approx(0.25)
    mask = np.ones((4, 4), bool)
    mask[2, 3] = mask[3, 2] = False
    assert np.allclose(Ft[mask], 0)
    assert np.allclose(from_complex_frame(to_complex_frame(F)), F)
    # (2,0) and (0,2) parts are complex conjugate for a real form
    assert np.allclose(f20, np.conj(f02))


def test_type_decomposition_kahler_form_is_11():
    F = np.zeros((4, 4))
    F[0, 1], F[1, 0], F[2, 3], F[3, 2] = 1, -1, 1, -1
    f20, f11, f02 = type_decompose(F)
    assert np.allclose(f20, 0) and np.allclose(f02, 0)
    assert kahler_contraction(f11) == pytest.approx(2.0)


def test_metric_validation_and_compatibility():
    g, A = flat(n=8, k=2)
    h = MetricField.identity(g, 2)
    h.validate()
    A = A.with_corr(random_antihermitian_corr(g, 2, np.random.default_rng(0)))
    assert compatibility_residual(A, h) < 1e-12
    bad = MetricField(g, h.values + 0.1j * np.eye(2))
    with pytest.raises(GeometryError, match="not Hermitian"):
        bad.validate()


def test_gauge_must_be_unitary_when_flagged():
    g = LatticeGrid(1, 4)
    with pytest.raises(GeometryError):
        GaugeTransform(g, 2.0 * np.ones(g.shape + (1, 1)))
