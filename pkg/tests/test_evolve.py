import numpy as np
import pytest

from diatherm.couplings import CouplingMatrix, compute_couplings, detuning_from_com, fit_power_law
from diatherm.errors import SnapshotFormatError
from diatherm.evolve import (
    QuantumState,
    RampSchedule,
    aligned_distance,
    converged_evolve,
    crank_nicolson_step,
    evolve,
    initial_state,
    read_state_snapshot,
    write_state_snapshot,
)
from diatherm.spin import SpinBasis, build_hamiltonian, diagonalize_with_symmetries, population_outside_sector
from diatherm.trap import solve_equilibrium_positions, transverse_normal_modes

from conftest import spec_with
from helpers import segment_exact_evolve


def couplings_of(values):
    return CouplingMatrix(values=np.asarray(values, dtype=float), sign="FM")


def trap_system(n, sign="FM", omega_axial=0.77e6):
    spec = spec_with(n_ions=n, omega_axial=omega_axial)
    chain = solve_equilibrium_positions(spec)
    modes = transverse_normal_modes(spec, chain)
    matrix = compute_couplings(modes, spec, detuning_from_com(spec), sign=sign)
    j0 = fit_power_law(matrix, chain).j0 if n >= 3 else matrix.j0_nn
    return matrix, j0


class TestRampSchedule:
    def test_protocol_defaults(self):
        schedule = RampSchedule.from_protocol(1000.0)
        assert schedule.b0 == pytest.approx(5000.0)
        assert schedule.tau == pytest.approx(5e-4)
        assert schedule.t_final == pytest.approx(3e-3)

    def test_explicit_final_time_overrides_tau(self):
        schedule = RampSchedule.from_protocol(1000.0, t_final=6e-3)
        assert schedule.tau == pytest.approx(1e-3)
        assert schedule.t_final == pytest.approx(6e-3)

    def test_field_decay(self):
        schedule = RampSchedule(b0=1.0, tau=2.0, t_final=12.0)
        assert schedule.field(0.0) == 1.0
        assert schedule.field(2.0) == pytest.approx(np.exp(-1.0))

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            RampSchedule(b0=0.0, tau=1.0, t_final=1.0)
        with pytest.raises(ValueError):
            RampSchedule(b0=1.0, tau=-1.0, t_final=1.0)


class TestInitialState:
    def test_single_spin(self):
        state = initial_state(SpinBasis(1))
        np.testing.assert_allclose(state.amplitudes, [2**-0.5, 2**-0.5])

    def test_two_spins(self):
        state = initial_state(SpinBasis(2))
        np.testing.assert_allclose(state.amplitudes, np.full(4, 0.5))

    def test_overlap_with_initial_hamiltonian_ground_state(self):
        # At B = 5 J0 the all-x product state approximates the true ground
        # state well enough to start the protocol in it; the exact overlap
        # at the N=6 alpha=1 point is 0.98786 (diagonalize-and-project).
        matrix, j0 = trap_system(6, omega_axial=827.7e3)  # alpha = 1 for 6 ions
        h = build_hamiltonian(matrix, 5.0 * j0)
        spectrum = diagonalize_with_symmetries(h)
        psi0 = initial_state(h.basis)
        overlap = abs(spectrum.eigenvectors[:, 0] @ psi0.amplitudes)
        assert overlap == pytest.approx(0.98786, abs=2e-4)


class TestCrankNicolsonStep:
    def test_zero_hamiltonian_is_identity(self):
        h = build_hamiltonian(couplings_of(np.zeros((2, 2))), 0.0)
        state = QuantumState(np.array([0.6, 0.8j, 0.0, 0.0]), 0.0)
        stepped = crank_nicolson_step(state, h, 1e-3)
        np.testing.assert_allclose(stepped.amplitudes, state.amplitudes, atol=1e-15)
        assert stepped.time == pytest.approx(1e-3)

    def test_single_spin_rabi_rotation_third_order(self):
        # One step approximates exp(i 2 pi B dt sigma_x) with O(dt^3) error.
        b = 1234.0
        h = build_hamiltonian(couplings_of([[0.0]]), b)
        psi0 = QuantumState(np.array([1.0 + 0j, 0.0]), 0.0)
        errors = []
        for dt in (2e-5, 1e-5, 5e-6):
            theta = 2 * np.pi * b * dt
            exact = np.array([np.cos(theta) * 1.0, 1j * np.sin(theta)])
            stepped = crank_nicolson_step(psi0, h, dt)
            errors.append(np.linalg.norm(stepped.amplitudes - exact))
        assert errors[0] / errors[1] == pytest.approx(8.0, rel=0.05)
        assert errors[1] / errors[2] == pytest.approx(8.0, rel=0.05)

    def test_norm_drift_after_many_steps(self):
        matrix, _ = trap_system(2)
        h = build_hamiltonian(matrix, 900.0)
        rng = np.random.default_rng(3)
        psi = rng.normal(size=4) + 1j * rng.normal(size=4)
        state = QuantumState(psi / np.linalg.norm(psi), 0.0)
        for _ in range(10_000):
            state = crank_nicolson_step(state, h, 2.5e-7)
        assert abs(state.norm() - 1.0) < 1e-10

    def test_coarse_step_uses_gmres_and_stays_unitary(self):
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 5 * j0)
        state = initial_state(h.basis)
        coarse_dt = 0.9 / h.norm_bound()  # contraction factor ~2.8: GMRES path
        stepped = crank_nicolson_step(state, h, coarse_dt)
        assert abs(stepped.norm() - 1.0) < 1e-10


class TestEvolve:
    def test_zero_final_time_returns_initial(self):
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule(b0=5 * j0, tau=1e-4, t_final=0.0)
        psi0 = initial_state(h.basis)
        trajectory = evolve(psi0, h, schedule, 1e-6)
        assert trajectory.n_steps == 0
        np.testing.assert_array_equal(trajectory.final.amplitudes, psi0.amplitudes)

    def test_dt_must_divide_final_time(self):
        matrix, j0 = trap_system(2)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule(b0=5 * j0, tau=1e-4, t_final=6e-4)
        with pytest.raises(ValueError, match="divide"):
            evolve(initial_state(h.basis), h, schedule, 1.7e-7)

    def test_sampling_hooks(self):
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        seen = []
        trajectory = evolve(
            initial_state(h.basis), h, schedule, schedule.tau / 100,
            sample_times=np.linspace(0, schedule.t_final, 5),
            observer=lambda t, state: seen.append(t),
        )
        assert len(trajectory.samples) == 5
        assert seen == [t for t, _ in trajectory.samples]
        assert seen[0] == 0.0
        assert seen[-1] == pytest.approx(schedule.t_final)
        for t, state in trajectory.samples:
            assert state.time == pytest.approx(t)
            assert abs(state.norm() - 1.0) < 1e-10

    def test_unitarity_through_production_style_ramp(self):
        matrix, j0 = trap_system(4)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        trajectory = evolve(initial_state(h.basis), h, schedule, schedule.tau / 2000)
        assert trajectory.max_norm_error < 1e-8
        assert trajectory.max_solver_residual < 1e-12

    @pytest.mark.parametrize("sign", ["FM", "AFM"])
    def test_sector_conservation(self, sign):
        matrix, j0 = trap_system(4, sign=sign)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        outside = []
        evolve(
            initial_state(h.basis), h, schedule, schedule.tau / 1000,
            sample_times=np.linspace(0, schedule.t_final, 13),
            observer=lambda t, state: outside.append(
                population_outside_sector(state.amplitudes, h.basis, (1, 1))
            ),
        )
        assert max(outside) < 1e-6

    def test_matches_segment_exact_oracle(self):
        # Piecewise-constant exact exponentials, aligned fidelity distance.
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        psi0 = initial_state(h.basis)
        trajectory = evolve(psi0, h, schedule, schedule.tau / 8000)
        oracle = segment_exact_evolve(matrix.values, schedule, psi0.amplitudes, 2000)
        infidelity = 1.0 - abs(np.vdot(oracle, trajectory.final.amplitudes)) ** 2
        assert infidelity < 1e-6


class TestConvergedEvolve:
    def test_gate_reports_and_passes(self):
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        trajectory, report = converged_evolve(
            initial_state(h.basis), h, schedule,
            steps_per_tau=250, gate_tol=1e-3, max_halvings=8,
        )
        assert report.gated and report.passed
        assert report.deltas[-1] < 1e-3
        assert report.steps_per_tau >= 500
        assert trajectory.n_steps == 6 * report.steps_per_tau

    def test_gate_disabled(self):
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        trajectory, report = converged_evolve(
            initial_state(h.basis), h, schedule,
            steps_per_tau=300, max_halvings=0,
        )
        assert not report.gated
        assert trajectory.n_steps == 1800

    def test_halving_converges_quadratically(self):
        matrix, j0 = trap_system(3)
        h = build_hamiltonian(matrix, 0.0)
        schedule = RampSchedule.from_protocol(j0)
        _, report = converged_evolve(
            initial_state(h.basis), h, schedule,
            steps_per_tau=500, gate_tol=1e-6, max_halvings=10,
        )
        ratios = [a / b for a, b in zip(report.deltas, report.deltas[1:])]
        assert all(3.0 < r < 5.0 for r in ratios)


class TestAlignedDistance:
    def test_ignores_global_phase(self):
        rng = np.random.default_rng(0)
        psi = rng.normal(size=8) + 1j * rng.normal(size=8)
        psi /= np.linalg.norm(psi)
        assert aligned_distance(psi, np.exp(1j * 0.7) * psi) < 1e-12

    def test_orthogonal_states(self):
        a = np.array([1.0, 0.0], dtype=complex)
        b = np.array([0.0, 1.0], dtype=complex)
        assert aligned_distance(a, b) == pytest.approx(np.sqrt(2.0))


class TestSnapshots:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        psi = rng.normal(size=32) + 1j * rng.normal(size=32)
        psi /= np.linalg.norm(psi)
        state = QuantumState(psi, 1.5e-3)
        path = tmp_path / "state.snap"
        write_state_snapshot(path, state, 5)
        n_spins, amplitudes = read_state_snapshot(path)
        assert n_spins == 5
        np.testing.assert_array_equal(amplitudes, psi)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.snap"
        path.write_bytes(b"NOTASNAP" + b"\x00" * 24)
        with pytest.raises(SnapshotFormatError, match="not a state snapshot"):
            read_state_snapshot(path)

    def test_truncated_payload_rejected(self, tmp_path):
        rng = np.random.default_rng(9)
        psi = rng.normal(size=8) + 1j * rng.normal(size=8)
        state = QuantumState(psi, 0.0)
        path = tmp_path / "state.snap"
        write_state_snapshot(path, state, 3)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(SnapshotFormatError, match="payload"):
            read_state_snapshot(path)
