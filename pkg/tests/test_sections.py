import numpy as np
import pytest

from canonflow.geometry import (BundleConfig, LatticeGrid, MetricField,
                                build_reference_connection, random_antihermitian_corr)
from canonflow.sections import (AdmissibilityError, EnergyReport, RankDeficiencyError,
                                SectionFamily, admissibility, energies, fourier_family,
                                orthonormalize, projection_diagonal, random_family,
                                require_admissible)


@pytest.fixture
def flat16():
    g = LatticeGrid(1, 16)
    return g, build_reference_connection(g, BundleConfig.from_pairs(1, 1, 3)), MetricField.identity(g, 1)


def test_orthonormalize_gives_identity_gram():
    g = LatticeGrid(1, 8)
    H = random_family(g, 2, 5, np.random.default_rng(0))
    assert np.max(np.abs(H.gram() - np.eye(5))) < 1e-12
    again = orthonormalize(H)
    assert np.max(np.abs(again.values - H.values)) < 1e-12


def test_fourier_modes_are_lattice_orthonormal():
    g = LatticeGrid(1, 8)
    H = fourier_family(g, [[0, 0], [1, 0], [0, -2], [3, 1]])
    assert np.max(np.abs(H.gram() - np.eye(4))) < 1e-12


def test_rank_deficiency_is_reported_with_eigenvalue():
    g = LatticeGrid(1, 8)
    H = fourier_family(g, [[1, 0], [1, 0]])
    with pytest.raises(RankDeficiencyError, match="Gram eigenvalue"):
        orthonormalize(H)


def test_projection_trace_integral_is_N(flat16):
    g, _, h = flat16
    H = random_family(g, 1, 3, np.random.default_rng(1))
    assert projection_diagonal(H).trace_integral() == pytest.approx(3.0, abs=1e-12)


def test_admissibility_of_vanishing_section():
    g = LatticeGrid(1, 8)
    x = g.coords()
    vals = np.sin(2 * np.pi * x[0])[..., None, None] + 0j
    H = orthonormalize(SectionFamily(g, vals, MetricField.identity(g, 1)))
    adm = admissibility(projection_diagonal(H))
    assert not adm.admissible and adm.stability_constant == np.inf
    with pytest.raises(AdmissibilityError, match="min eigenvalue"):
        require_admissible(H)


def test_constant_density_family_is_admissible():
    g = LatticeGrid(1, 8)
    H = fourier_family(g, [[0, 0], [1, 1]])
    adm = admissibility(projection_diagonal(H))
    assert adm.admissible
    assert adm.min_singular_value == pytest.approx(2.0)


def test_plane_wave_energies_match_symbol(flat16):
    g, A, h = flat16
    H = fourier_family(g, [[1, 0], [0, 2], [-1, 1]])
    rep = energies(h, H, A, q_list=(2, np.inf))
    n = g.n
    sym = lambda q: (np.exp(2j * np.pi * q / n) - 1) * n  # noqa: E731
    e01 = sum(abs(sym(p) + 1j * sym(q)) ** 2 / 4 for p, q in [(1, 0), (0, 2), (-1, 1)])
    e10 = sum(abs(sym(p) - 1j * sym(q)) ** 2 / 4 for p, q in [(1, 0), (0, 2), (-1, 1)])
    assert rep.Phi01 == pytest.approx(e01, rel=1e-12)
    assert rep.Phi10 == pytest.approx(e10, rel=1e-12)
    assert rep.lq[np.inf]["e01"] == pytest.approx(e01, rel=1e-12)


def test_energy_identities(flat16):
    g, A, h = flat16
    rng = np.random.default_rng(2)
    A = A.with_corr(random_antihermitian_corr(g, 1, rng))
    H = random_family(g, 1, 3, rng)
    rep = energies(h, H, A, q_list=(1, 2))
    from canonflow.geometry import covariant_derivative

    D = covariant_derivative(A, H.values)
    half = 0.5 * np.sum(np.abs(D) ** 2, axis=(0, -2, -1))
    assert np.max(np.abs(rep.e - half)) < 1e-9
    assert np.max(np.abs(rep.e01_G + rep.e01_P - rep.e01)) < 1e-10
    assert np.min(rep.e01_G) > -1e-10 and np.min(rep.e01_P) > -1e-10
    assert rep.lq[1.0]["e"] == pytest.approx(rep.Phi)


def test_energy_report_csv_rows(flat16):
    g, A, h = flat16
    H = random_family(g, 1, 3, np.random.default_rng(3))
    rep = energies(h, H, A, q_list=(2, 4))
    rows = rep.csv_rows()
    assert len(rows) == 2 and len(rows[0]) == len(EnergyReport.CSV_COLUMNS)
    assert rows[0][0] == 2.0
