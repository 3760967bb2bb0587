"""End-to-end experiment pipeline: trap -> couplings -> evolve -> analyze.

A single run is fully deterministic: two executions of the same resolved
configuration produce byte-identical output files.  Every emitted file
carries the configuration hash in a provenance comment.
"""

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .. import __version__
from ..couplings import (
    CouplingMatrix,
    compute_couplings,
    coupling_matrix_from_csv,
    coupling_matrix_to_csv,
    detuning_from_com,
    fit_power_law,
    tune_axial_for_alpha,
)
from ..errors import FitDomainError, NonThermalFitError, SimulationError
from ..evolve import (
    QuantumState,
    RampSchedule,
    converged_evolve,
    initial_state,
    read_state_snapshot,
    write_state_snapshot,
)
from ..obs import (
    EnsembleView,
    binder_cumulant,
    eigenstate_probabilities,
    specific_heat,
    structure_factor,
)
from ..spin import (
    build_hamiltonian,
    diagonalize_with_symmetries,
    population_outside_sector,
)
from ..thermo import (
    ThermalFit,
    diabatic_moments,
    fit_beta_average,
    fit_beta_fluctuation,
    fit_beta_ratio,
    thermal_distribution,
    two_temperature_diagnostic,
)
from ..trap import TrapSpec, solve_equilibrium_positions, transverse_normal_modes
from .config import config_hash, render_config, validate_config
from .emit import fmt, write_table


@dataclass(frozen=True)
class SystemSetup:
    """Trap, mode, and coupling data shared by every run at one (N, alpha, sign)."""

    trap_spec: TrapSpec
    chain: object
    modes: object
    mu: float
    couplings: CouplingMatrix
    j0: float
    alpha: float
    fit_residual: float


def build_system(config):
    """Resolve the trap (tuning the axial frequency if needed) and couplings."""
    validate_config(config)
    omega_axial = config.omega_axial
    probe = TrapSpec(
        n_ions=config.n_ions,
        omega_transverse=config.omega_transverse,
        omega_axial=omega_axial if omega_axial is not None else 0.7e6,
        recoil=config.recoil,
        rabi=config.rabi,
        wavelength=config.wavelength,
    )
    if omega_axial is None:
        omega_axial = tune_axial_for_alpha(probe, config.alpha_target)
        probe = replace(probe, omega_axial=omega_axial)
    chain = solve_equilibrium_positions(probe)
    modes = transverse_normal_modes(probe, chain)
    mu = detuning_from_com(probe)
    matrix = compute_couplings(modes, probe, mu, sign=config.sign)
    fit = fit_power_law(matrix, chain)
    matrix = replace(matrix, alpha_fit=fit.alpha, fit_residual=fit.residual)
    return SystemSetup(
        trap_spec=probe,
        chain=chain,
        modes=modes,
        mu=mu,
        couplings=matrix,
        j0=fit.j0,
        alpha=fit.alpha,
        fit_residual=fit.residual,
    )


def make_schedule(config, j0):
    t_final = None if config.t_f_ms is None else config.t_f_ms * 1e-3
    return RampSchedule.from_protocol(
        j0,
        j0_tau=config.j0_tau,
        b0_over_j0=config.b0_over_j0,
        t_f_over_tau=config.t_f_over_tau,
        t_final=t_final,
    )


@dataclass(frozen=True)
class ResultBundle:
    """Everything a single run produces, spectrum eigenvectors excluded."""

    config: object
    config_hash: str
    system: SystemSetup
    schedule: RampSchedule
    gate: object
    trajectory_summary: tuple          # (t_s, norm_error, outside_population)
    max_norm_error: float
    max_solver_residual: float
    final_state: QuantumState
    energies: np.ndarray
    spatial_parity: np.ndarray
    spin_parity: np.ndarray
    ground_sector: tuple
    p_dia: np.ndarray
    fits: dict                          # method -> ThermalFit
    sector_distributions: dict          # method -> ThermalDistribution (ground sector)
    observables: dict                   # view -> {name: value}
    structure: dict                     # view -> StructureFactorResult
    two_temperature: object
    fit_agreement: float | None
    provenance: dict


def _failed_fit(method, reason):
    return ThermalFit(
        method=method, beta=math.nan, converged=False, residual=math.inf,
        notes=(reason,),
    )


def _run_fits(config, spectrum, state, h_final):
    """The three effective-temperature fits on the configured ensemble."""
    sector_restricted = config.ensemble == "ground_sector"
    if sector_restricted:
        fit_energies = spectrum.energies[spectrum.ground_sector_mask]
    else:
        fit_energies = spectrum.energies
    e_mean, e_var = diabatic_moments(state, h_final)
    fits = {}
    for method in config.fit_methods:
        try:
            if method == "average":
                fit = fit_beta_average(fit_energies, e_mean, sector_restricted)
            elif method == "fluctuation":
                fit = fit_beta_fluctuation(fit_energies, e_var, sector_restricted)
            elif method == "ratio":
                fit = _ratio_fit(spectrum, state)
            else:
                continue
        except FitDomainError as exc:
            fit = _failed_fit(method, str(exc))
        fits[method] = fit
    return fits, e_mean, e_var


#: States closer than this fraction of the spectral span count as one level.
LEVEL_TOL = 1e-3


def ground_sector_levels(spectrum, probabilities, max_levels=2):
    """Cluster the lowest ground-sector states into quasi-degenerate levels.

    Frustrated spectra split excited multiplets by a few Hz, far below the
    energy resolution of a millisecond ramp, so the ratio fit reads level
    populations rather than individual eigenstates.  Returns a list of
    (level energy, level probability) pairs.
    """
    indices = np.nonzero(spectrum.ground_sector_mask)[0]
    span = float(spectrum.energies[-1] - spectrum.energies[0])
    tol = LEVEL_TOL * span
    levels = []
    current = [indices[0]]
    for idx in indices[1:]:
        if float(spectrum.energies[idx] - spectrum.energies[current[-1]]) < tol:
            current.append(idx)
        else:
            levels.append(current)
            if len(levels) >= max_levels:
                break
            current = [idx]
    else:
        levels.append(current)
    return [
        (float(np.mean(spectrum.energies[member])), float(np.sum(probabilities[member])))
        for member in (np.array(level) for level in levels[:max_levels])
    ]


def _ratio_fit(spectrum, state):
    # The first excited state is taken within the ground sector (states
    # outside it stay strictly unpopulated) and at level resolution.
    p = eigenstate_probabilities(state, spectrum)
    levels = ground_sector_levels(spectrum, p)
    if len(levels) < 2:
        raise FitDomainError("ground sector holds fewer than two levels")
    (e_gs, p_gs), (e_1, p_1) = levels
    fit = fit_beta_ratio(p_gs, p_1, e_1 - e_gs)
    return replace(fit, sector_restricted=True)


def analyze(config, system, schedule, spectrum, state, h_final):
    """Probabilities, thermometry, and observables of the final state."""
    p_dia = eigenstate_probabilities(state, spectrum)
    fits, e_mean, e_var = _run_fits(config, spectrum, state, h_final)

    sector_distributions = {}
    for method, fit in fits.items():
        if fit.converged and math.isfinite(fit.beta) and not fit.non_thermal:
            sector_distributions[method] = thermal_distribution(
                spectrum, fit.beta, sector_restricted=True
            )

    staggered = config.sign == "AFM"
    dia_view = EnsembleView.pure(state, spectrum)
    observables = {"dia": _observables_of(dia_view, staggered)}
    structure = {"dia": structure_factor(dia_view)}

    obs_fit = fits.get(config.thermal_fit_for_observables)
    therm_view = None
    if obs_fit is not None and obs_fit.converged and not obs_fit.non_thermal:
        dist = thermal_distribution(
            spectrum, obs_fit.beta,
            sector_restricted=config.ensemble == "ground_sector",
        )
        therm_view = EnsembleView.thermal(dist, spectrum)
        observables["therm"] = _observables_of(therm_view, staggered)
        structure["therm"] = structure_factor(therm_view)
    for view_name, view in (("dia", dia_view), ("therm", therm_view)):
        if view is None:
            continue
        try:
            observables[view_name]["c_v"] = specific_heat(view, obs_fit) if obs_fit else math.nan
        except (NonThermalFitError, AttributeError):
            observables[view_name]["c_v"] = math.nan

    converged_thermal = [
        f for f in fits.values() if f.converged and not f.non_thermal and f.beta > 0
    ]
    fit_agreement = None
    if len(converged_thermal) == len(fits) and len(fits) >= 2:
        temps = np.array([f.temperature for f in converged_thermal])
        mean_t = float(np.mean(temps))
        spread = max(
            abs(a - b) / mean_t for i, a in enumerate(temps) for b in temps[i + 1:]
        )
        fit_agreement = float(spread)

    two_temp = two_temperature_diagnostic(spectrum, p_dia)
    return {
        "p_dia": p_dia,
        "fits": fits,
        "e_mean": e_mean,
        "e_var": e_var,
        "sector_distributions": sector_distributions,
        "observables": observables,
        "structure": structure,
        "two_temperature": two_temp,
        "fit_agreement": fit_agreement,
    }


def _observables_of(view, staggered):
    binder = binder_cumulant(view, staggered)
    sf = structure_factor(view)
    e_mean, e_var = view.energy_moments()
    return {
        "g_s": binder.g_s,
        "g_bar": binder.g_bar,
        "binder_defined": binder.defined,
        "s_k0": sf.at(0.0),
        "s_kpi": sf.at(np.pi),
        "e_mean_hz": e_mean,
        "e_var_hz2": e_var,
    }


def run_experiment(config, out_dir=None, system=None, spectrum_cache=None,
                   steps_override=None):
    """Execute the full pipeline for one configuration.

    ``system`` short-circuits trap and coupling construction (sweep reuse);
    ``spectrum_cache`` is a dict keyed by final field reused across runs
    sharing a final Hamiltonian; ``steps_override`` pins the step count and
    skips the convergence gate (the sweep gates once per group).
    """
    validate_config(config)
    try:
        bundle = _run_experiment_inner(
            config, system, spectrum_cache, steps_override
        )
    except SimulationError as exc:
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "FAILED.txt"), "w", encoding="utf-8") as f:
                f.write(f"{type(exc).__name__}: {exc}\n")
        raise
    if out_dir is not None:
        write_bundle(bundle, out_dir)
    return bundle


def _run_experiment_inner(config, system, spectrum_cache, steps_override):
    if system is None:
        system = build_system(config)
    schedule = make_schedule(config, system.j0)
    h = build_hamiltonian(system.couplings, 0.0)
    psi0 = initial_state(h.basis)
    sample_times = np.linspace(0.0, schedule.t_final, config.n_samples)
    if steps_override is not None:
        trajectory, gate = converged_evolve(
            psi0, h, schedule,
            steps_per_tau=steps_override, max_halvings=0,
            sample_times=sample_times,
        )
    else:
        trajectory, gate = converged_evolve(
            psi0, h, schedule,
            steps_per_tau=config.steps_per_tau,
            gate_tol=config.gate_tol,
            max_halvings=config.max_halvings,
            sample_times=sample_times,
        )
    b_final = schedule.field(schedule.t_final)
    h_final = h.with_field(b_final)
    spectrum = None
    if spectrum_cache is not None:
        spectrum = spectrum_cache.get(b_final)
    if spectrum is None:
        spectrum = diagonalize_with_symmetries(h_final)
        if spectrum_cache is not None:
            spectrum_cache[b_final] = spectrum
    state = trajectory.final
    ground_sector = spectrum.ground_sector
    summary = tuple(
        (t, abs(float(np.linalg.norm(s.amplitudes)) - 1.0),
         float(population_outside_sector(s.amplitudes, h.basis, ground_sector)))
        for t, s in trajectory.samples
    )
    analysis = analyze(config, system, schedule, spectrum, state, h_final)
    digest = config_hash(config)
    provenance = {
        "config_hash": digest,
        "package_version": __version__,
        "n_ions": config.n_ions,
        "sign": config.sign,
        "omega_axial_hz": system.trap_spec.omega_axial,
        "alpha_fit": system.alpha,
        "j0_fit_hz": system.j0,
        "j0_nn_hz": system.couplings.j0_nn,
        "power_fit_residual": system.fit_residual,
        "mu_hz": system.mu,
        "b0_hz": schedule.b0,
        "tau_s": schedule.tau,
        "t_f_s": schedule.t_final,
        "j0_tau": system.j0 * schedule.tau,
        "dt_s": trajectory.dt,
        "n_steps": trajectory.n_steps,
        "steps_per_tau": gate.steps_per_tau,
        "gate_applied": gate.gated,
        "gate_deltas": ";".join(f"{d:.6e}" for d in gate.deltas),
        "max_norm_error": trajectory.max_norm_error,
        "max_solver_residual": trajectory.max_solver_residual,
        "max_outside_sector_population": max((row[2] for row in summary), default=0.0),
        "e_mean_hz": analysis["e_mean"],
        "e_var_hz2": analysis["e_var"],
    }
    return ResultBundle(
        config=config,
        config_hash=digest,
        system=system,
        schedule=schedule,
        gate=gate,
        trajectory_summary=summary,
        max_norm_error=trajectory.max_norm_error,
        max_solver_residual=trajectory.max_solver_residual,
        final_state=state,
        energies=spectrum.energies,
        spatial_parity=spectrum.spatial_parity,
        spin_parity=spectrum.spin_parity,
        ground_sector=ground_sector,
        p_dia=analysis["p_dia"],
        fits=analysis["fits"],
        sector_distributions=analysis["sector_distributions"],
        observables=analysis["observables"],
        structure=analysis["structure"],
        two_temperature=analysis["two_temperature"],
        fit_agreement=analysis["fit_agreement"],
        provenance=provenance,
    )


def _sector_tag(sp, sx):
    return ("+" if sp > 0 else "-") + ("+" if sx > 0 else "-")


def write_bundle(bundle, out_dir):
    """Write the bundle's files; formats are documented in the README."""
    os.makedirs(out_dir, exist_ok=True)
    digest = bundle.config_hash
    tag = f"config_hash={digest}"

    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(f"# resolved configuration, hash {digest}\n")
        f.write(render_config(bundle.config))

    with open(os.path.join(out_dir, "provenance.txt"), "w", encoding="utf-8") as f:
        for key, value in bundle.provenance.items():
            f.write(f"{key} = {fmt(value)}\n")

    coupling_matrix_to_csv(
        bundle.system.couplings, os.path.join(out_dir, "couplings.csv"), provenance=tag
    )

    emit = set(getattr(bundle.config, "emit",
                       ("probabilities", "observables", "structure", "trajectory")))
    spectrum_rows = []
    e0 = float(bundle.energies[0])
    scattered = {}
    for method, dist in bundle.sector_distributions.items():
        full = np.zeros(len(bundle.energies))
        full[dist.indices] = dist.probabilities
        scattered[method] = full
    for n in range(len(bundle.energies)):
        sector = _sector_tag(bundle.spatial_parity[n], bundle.spin_parity[n])
        spectrum_rows.append([
            str(n),
            fmt((bundle.energies[n] - e0) / 1e3),
            fmt(bundle.p_dia[n]),
            fmt(scattered["average"][n] if "average" in scattered else math.nan),
            fmt(scattered["fluctuation"][n] if "fluctuation" in scattered else math.nan),
            fmt(scattered["ratio"][n] if "ratio" in scattered else math.nan),
            sector,
        ])
    if "probabilities" in emit:
        write_table(
            os.path.join(out_dir, "fig1_probabilities.csv"),
            "fig1/v1",
            ["n", "e_minus_e0_khz", "p_dia", "p_therm_avg", "p_therm_fluct", "p_therm_ratio", "sector"],
            spectrum_rows,
            provenance=tag,
        )

    spectrum_path = os.path.join(out_dir, "spectrum.csv")
    lines = [
        f"# provenance: schema=spectrum/v1 n_spins={bundle.config.n_ions} {tag}",
        "n,energy_hz,spatial_parity,spin_parity,p_n",
    ]
    for n in range(len(bundle.energies)):
        lines.append(
            f"{n},{fmt(bundle.energies[n])},{int(bundle.spatial_parity[n])},"
            f"{int(bundle.spin_parity[n])},{fmt(bundle.p_dia[n])}"
        )
    with open(spectrum_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

    obs_rows = []
    for view in ("dia", "therm"):
        record = bundle.observables.get(view)
        if record is None:
            continue
        obs_rows.append([
            view,
            fmt(record["g_s"]),
            fmt(record["g_bar"]),
            fmt(record["s_k0"]),
            fmt(record["s_kpi"]),
            fmt(record.get("c_v", math.nan)),
            fmt(record["e_mean_hz"] / 1e3),
            fmt(record["e_var_hz2"] / 1e6),
        ])
    if "observables" in emit:
        write_table(
            os.path.join(out_dir, "observables.csv"),
            "observables/v1",
            ["view", "g_s", "g_bar", "s_k0", "s_kpi", "c_v", "e_mean_khz", "e_var_khz2"],
            obs_rows,
            provenance=tag,
        )

    sf_dia = bundle.structure["dia"]
    sf_therm = bundle.structure.get("therm")
    sf_rows = []
    for i, k in enumerate(sf_dia.wavenumbers):
        sf_rows.append([
            fmt(k),
            fmt(sf_dia.values[i]),
            fmt(sf_therm.values[i] if sf_therm is not None else math.nan),
        ])
    if "structure" in emit:
        write_table(
            os.path.join(out_dir, "structure_factor.csv"),
            "fig3/v1",
            ["k", "s_dia", "s_therm"],
            sf_rows,
            provenance=tag,
        )

    traj_rows = [
        [fmt(t * 1e3), fmt(norm_err), fmt(outside)]
        for t, norm_err, outside in bundle.trajectory_summary
    ]
    if "trajectory" in emit:
        write_table(
            os.path.join(out_dir, "trajectory.csv"),
            "traj/v1",
            ["t_ms", "norm_error", "outside_sector_population"],
            traj_rows,
            provenance=tag,
        )

    with open(os.path.join(out_dir, "fits.txt"), "w", encoding="utf-8") as f:
        f.write(f"# effective-temperature fits, {tag}\n")
        for method in ("average", "fluctuation", "ratio"):
            fit = bundle.fits.get(method)
            if fit is None:
                continue
            f.write(f"[fit {method}]\n")
            f.write(f"beta_per_khz = {fmt(fit.beta * 1e3 if math.isfinite(fit.beta) else math.nan)}\n")
            t_khz = fit.temperature / 1e3 if math.isfinite(fit.beta) and fit.beta != 0 else math.inf
            f.write(f"t_khz = {fmt(t_khz)}\n")
            f.write(f"converged = {str(fit.converged).lower()}\n")
            f.write(f"residual = {fmt(fit.residual)}\n")
            f.write(f"non_thermal = {str(fit.non_thermal).lower()}\n")
            f.write(f"sector_restricted = {str(fit.sector_restricted).lower()}\n")
            f.write(f"notes = {'; '.join(fit.notes)}\n")
        if bundle.fit_agreement is not None:
            f.write("[diagnostics]\n")
            f.write(f"max_pairwise_temperature_spread = {fmt(bundle.fit_agreement)}\n")
        tt = bundle.two_temperature
        f.write("[two_temperature]\n")
        f.write(f"beta_orbit2_per_khz = {fmt(tt.beta_orbit2 * 1e3 if math.isfinite(tt.beta_orbit2) else math.nan)}\n")
        f.write(f"beta_orbit4_per_khz = {fmt(tt.beta_orbit4 * 1e3 if math.isfinite(tt.beta_orbit4) else math.nan)}\n")
        f.write(f"n_states_orbit2 = {tt.n_states_orbit2}\n")
        f.write(f"n_states_orbit4 = {tt.n_states_orbit4}\n")

    write_state_snapshot(
        os.path.join(out_dir, "state_final.snap"),
        bundle.final_state,
        bundle.config.n_ions,
    )


def read_provenance(bundle_dir):
    provenance = {}
    with open(os.path.join(bundle_dir, "provenance.txt"), encoding="utf-8") as f:
        for line in f:
            if "=" in line:
                key, _, value = line.partition("=")
                provenance[key.strip()] = value.strip()
    return provenance


def replay(bundle_dir, out_dir):
    """Recompute the analysis of a stored bundle from its couplings and state.

    The spectrum is rebuilt deterministically from the stored couplings and
    the recorded final field, so the replayed numbers match the original
    run exactly.
    """
    from .config import load_config

    config = load_config(os.path.join(bundle_dir, "config.txt"))
    validate_config(config)
    provenance = read_provenance(bundle_dir)
    if "config_hash" not in provenance:
        raise SimulationError(f"{bundle_dir}: bundle has no provenance; refusing to replay")
    couplings = coupling_matrix_from_csv(os.path.join(bundle_dir, "couplings.csv"))
    n_spins, amplitudes = read_state_snapshot(os.path.join(bundle_dir, "state_final.snap"))
    if n_spins != config.n_ions:
        raise SimulationError("snapshot size does not match the stored configuration")
    schedule = RampSchedule(
        b0=float(provenance["b0_hz"]),
        tau=float(provenance["tau_s"]),
        t_final=float(provenance["t_f_s"]),
    )
    state = QuantumState(amplitudes, schedule.t_final)
    h = build_hamiltonian(couplings, schedule.field(schedule.t_final))
    spectrum = diagonalize_with_symmetries(h)
    system = SystemSetup(
        trap_spec=None, chain=None, modes=None,
        mu=float(provenance["mu_hz"]),
        couplings=couplings,
        j0=float(provenance["j0_fit_hz"]),
        alpha=float(provenance["alpha_fit"]),
        fit_residual=float(provenance["power_fit_residual"]),
    )
    analysis = analyze(config, system, schedule, spectrum, state, h)
    bundle = ResultBundle(
        config=config,
        config_hash=provenance["config_hash"],
        system=system,
        schedule=schedule,
        gate=None,
        trajectory_summary=(),
        max_norm_error=float(provenance.get("max_norm_error", "nan")),
        max_solver_residual=float(provenance.get("max_solver_residual", "nan")),
        final_state=state,
        energies=spectrum.energies,
        spatial_parity=spectrum.spatial_parity,
        spin_parity=spectrum.spin_parity,
        ground_sector=spectrum.ground_sector,
        p_dia=analysis["p_dia"],
        fits=analysis["fits"],
        sector_distributions=analysis["sector_distributions"],
        observables=analysis["observables"],
        structure=analysis["structure"],
        two_temperature=analysis["two_temperature"],
        fit_agreement=analysis["fit_agreement"],
        provenance={**{k: v for k, v in provenance.items()},
                    "replay_of": provenance["config_hash"]},
    )
    os.makedirs(out_dir, exist_ok=True)
    _write_replay_bundle(bundle, out_dir)
    return bundle


def _write_replay_bundle(bundle, out_dir):
    # A replay has no trajectory; write everything else through the normal path.
    stub = replace(bundle, trajectory_summary=())
    write_bundle(stub, out_dir)
