import numpy as np
import pytest

from diatherm.couplings import (
    CouplingMatrix,
    compute_couplings,
    coupling_matrix_from_csv,
    coupling_matrix_to_csv,
    detuning_from_com,
    fit_power_law,
    tune_axial_for_alpha,
)
from diatherm.errors import ResonanceError, TuningRangeError
from diatherm.trap import IonChain, solve_equilibrium_positions, transverse_normal_modes

from conftest import spec_with


def uniform_chain(n, spacing=1.0):
    positions = spacing * (np.arange(n) - (n - 1) / 2.0)
    return IonChain(positions, length_scale=1.0)


def reference_point(n_ions=10, omega_axial=0.77e6, sign="FM"):
    spec = spec_with(n_ions=n_ions, omega_axial=omega_axial)
    chain = solve_equilibrium_positions(spec)
    modes = transverse_normal_modes(spec, chain)
    matrix = compute_couplings(modes, spec, detuning_from_com(spec), sign=sign)
    return spec, chain, modes, matrix


class TestDetuning:
    def test_reference_ratio(self, reference_spec):
        mu = detuning_from_com(reference_spec)
        assert mu / reference_spec.omega_transverse == pytest.approx(1.0233, abs=1e-4)

    def test_zero_rabi_gives_com(self):
        spec = spec_with()
        spec = type(spec)(n_ions=10, omega_transverse=4.797e6, omega_axial=0.77e6,
                          recoil=18.5e3, rabi=1e-300)
        assert detuning_from_com(spec) == pytest.approx(spec.omega_transverse)

    def test_arithmetic_identity(self):
        spec = type(spec_with())(n_ions=2, omega_transverse=5e6, omega_axial=1e6,
                                 recoil=5e4, rabi=1e6)
        # eta = sqrt(5e4 / 5e6) = 0.1, so mu = 5 MHz + 3 * 0.1 * 1 MHz
        assert detuning_from_com(spec) == pytest.approx(5.3e6)


class TestComputeCouplings:
    def test_two_ion_analytic(self):
        # Substituting the two analytic modes into the exchange sum:
        # J12 = W^2 nu_R [ (1/2)/(mu^2-wt^2) - (1/2)/(mu^2-wt^2+wz^2) ]
        spec, chain, modes, matrix = reference_point(n_ions=2)
        mu = detuning_from_com(spec)
        wt, wz = spec.omega_transverse, spec.omega_axial
        expected = spec.rabi**2 * spec.recoil * (
            0.5 / (mu**2 - wt**2) - 0.5 / (mu**2 - wt**2 + wz**2)
        )
        assert matrix.values[0, 1] == pytest.approx(expected, rel=1e-12)

    def test_symmetry_and_zero_diagonal(self):
        _, _, _, matrix = reference_point()
        np.testing.assert_allclose(matrix.values, matrix.values.T, atol=1e-20)
        assert np.all(np.diagonal(matrix.values) == 0)

    def test_reflection_symmetry(self):
        _, _, _, matrix = reference_point()
        reflected = matrix.values[::-1, ::-1]
        np.testing.assert_allclose(matrix.values, reflected,
                                   rtol=1e-10, atol=1e-10 * matrix.j0_nn)

    @pytest.mark.parametrize("n", [6, 8, 10, 12])
    @pytest.mark.parametrize("omega_axial", [620e3, 785e3, 880e3])
    def test_sign_uniform_blue_detuned(self, n, omega_axial):
        _, _, _, matrix = reference_point(n_ions=n, omega_axial=omega_axial)
        off = matrix.values[np.triu_indices(n, k=1)]
        assert np.all(off > 0)

    def test_nearest_neighbor_scale_near_1khz(self):
        # Across the experimental axial band, within a factor of 3 of 1 kHz.
        for omega_axial in (620e3, 785e3, 950e3):
            _, _, _, matrix = reference_point(omega_axial=omega_axial)
            assert 1e3 / 3 < matrix.j0_nn < 3e3

    def test_afm_is_global_sign_flip(self):
        _, _, _, fm = reference_point(sign="FM")
        _, _, _, afm = reference_point(sign="AFM")
        np.testing.assert_array_equal(afm.values, -fm.values)
        assert afm.j0_nn == fm.j0_nn
        np.testing.assert_array_equal(fm.flipped().values, afm.values)

    def test_resonance_guard(self):
        spec, chain, modes, _ = reference_point()
        with pytest.raises(ResonanceError, match="mode"):
            compute_couplings(modes, spec, float(modes.frequencies[3]))

    def test_single_ion_has_no_couplings(self):
        spec, chain, modes, matrix = reference_point(n_ions=1)
        assert matrix.values.shape == (1, 1)
        assert matrix.values[0, 0] == 0.0


class TestPowerLawFit:
    def test_recovers_exact_power_law(self):
        n = 10
        chain = uniform_chain(n)
        values = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    values[i, j] = 1.0 / abs(i - j) ** 1.3
        fit = fit_power_law(CouplingMatrix(values=values, sign="FM"), chain)
        assert fit.alpha == pytest.approx(1.3, abs=1e-10)
        assert fit.j0 == pytest.approx(1.0, abs=1e-10)
        assert fit.residual < 1e-10

    def test_uniform_couplings_give_zero_exponent(self):
        n = 8
        values = np.full((n, n), 2.5)
        np.fill_diagonal(values, 0.0)
        fit = fit_power_law(CouplingMatrix(values=values, sign="FM"), uniform_chain(n))
        assert fit.alpha == pytest.approx(0.0, abs=1e-12)
        assert fit.j0 == pytest.approx(2.5, rel=1e-12)

    def test_experimental_band_alpha_range(self):
        for omega_axial in (620e3, 785e3, 950e3):
            _, chain, _, matrix = reference_point(omega_axial=omega_axial)
            fit = fit_power_law(matrix, chain)
            assert 0.6 <= fit.alpha <= 1.3

    def test_index_distance_variant(self):
        _, chain, _, matrix = reference_point()
        physical = fit_power_law(matrix, chain, distance="physical")
        index = fit_power_law(matrix, chain, distance="index")
        assert physical.alpha != index.alpha
        assert abs(physical.alpha - index.alpha) < 0.3

    def test_zero_coupling_excluded_with_warning(self):
        n = 6
        values = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                if i != j:
                    values[i, j] = 1.0 / abs(i - j)
        values[0, n - 1] = values[n - 1, 0] = 0.0
        with pytest.warns(UserWarning, match="zero couplings"):
            fit = fit_power_law(CouplingMatrix(values=values, sign="FM"),
                                uniform_chain(n))
        assert fit.alpha == pytest.approx(1.0, abs=1e-10)

    def test_needs_three_ions(self):
        with pytest.raises(ValueError, match="3 ions"):
            fit_power_law(CouplingMatrix(values=np.zeros((2, 2)), sign="FM"),
                          uniform_chain(2))


class TestAxialTuning:
    def test_fixed_point_round_trip(self):
        spec, chain, _, matrix = reference_point(omega_axial=650e3)
        alpha_650 = fit_power_law(matrix, chain).alpha
        recovered = tune_axial_for_alpha(spec, alpha_650)
        assert recovered == pytest.approx(650e3, rel=5e-3)

    def test_target_alpha_one_round_trip(self, reference_spec):
        omega_axial = tune_axial_for_alpha(reference_spec, 1.0)
        _, chain, _, matrix = reference_point(omega_axial=omega_axial)
        assert fit_power_law(matrix, chain).alpha == pytest.approx(1.0, abs=1e-3)

    def test_alpha_strictly_monotone_in_axial(self, reference_spec):
        # Dense scan oracle: the exponent falls as the axial trap stiffens
        # (the non-COM modes move away from the blue detuning).
        alphas = []
        for omega_axial in np.linspace(400e3, 950e3, 12):
            _, chain, _, matrix = reference_point(omega_axial=omega_axial)
            alphas.append(fit_power_law(matrix, chain).alpha)
        assert np.all(np.diff(alphas) < 0)

    def test_unreachable_target_reports_range(self, reference_spec):
        with pytest.raises(TuningRangeError, match="achievable range"):
            tune_axial_for_alpha(reference_spec, 2.0, bracket=(7.0e5, 8.0e5))

    def test_out_of_bounds_target_rejected(self, reference_spec):
        with pytest.raises(ValueError, match="bounds"):
            tune_axial_for_alpha(reference_spec, 3.0)


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path, reference_spec):
        _, _, _, matrix = reference_point()
        path = tmp_path / "couplings.csv"
        coupling_matrix_to_csv(matrix, path, provenance="config_hash=deadbeef")
        loaded = coupling_matrix_from_csv(path)
        np.testing.assert_array_equal(loaded.values, matrix.values)
        assert loaded.sign == matrix.sign
        assert loaded.j0_nn == pytest.approx(matrix.j0_nn)

    def test_header_checked(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="header"):
            coupling_matrix_from_csv(path)
