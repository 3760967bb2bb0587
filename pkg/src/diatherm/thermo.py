"""Effective-temperature fits and thermal reference distributions.

Three strategies extract an inverse temperature beta (1/Hz, k_B = 1) from
the diabatically evolved state: matching the mean energy, matching the
energy variance, or taking the Boltzmann ratio of the two lowest-state
probabilities.  Energies are shifted by the extremal value before
exponentiation so the weights never overflow.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import FitDomainError

#: Fits are declared converged when the moment mismatch, relative to the
#: spectral span, is below this.
FIT_TOL = 1e-10


@dataclass(frozen=True)
class ThermalFit:
    """A fitted inverse temperature with its diagnostics.

    ``non_thermal`` marks beta <= 0 (population inversion), which is never
    silently reported as a temperature.
    """

    method: str            # "average" | "fluctuation" | "ratio"
    beta: float            # 1 / Hz
    converged: bool
    residual: float        # relative moment mismatch (0 for the ratio fit)
    sector_restricted: bool = False
    non_thermal: bool = False
    notes: tuple = ()

    @property
    def temperature(self):
        if self.beta == 0.0:
            return math.inf
        return 1.0 / self.beta


@dataclass(frozen=True)
class ThermalDistribution:
    """Normalized Boltzmann weights over a selected set of eigenstates.

    ``indices`` maps each probability to its eigenstate in the spectrum;
    ``log_partition`` is ln Z over the included set.
    """

    probabilities: np.ndarray
    indices: np.ndarray
    beta: float
    sector_restricted: bool
    log_partition: float

    @property
    def partition_value(self):
        return math.exp(self.log_partition) if self.log_partition < 700 else math.inf


def _energies_of(spectrum):
    return np.asarray(getattr(spectrum, "energies", spectrum), dtype=float)


def boltzmann_weights(energies, beta):
    """Overflow-safe normalized weights exp(-beta E_n) / Z."""
    e = np.asarray(energies, dtype=float)
    shift = e.min() if beta >= 0 else e.max()
    weights = np.exp(-beta * (e - shift))
    total = weights.sum()
    return weights / total, math.log(total) - beta * shift


def thermal_moments(spectrum, beta):
    """Boltzmann-weighted mean and variance of the energies."""
    e = _energies_of(spectrum)
    p, _ = boltzmann_weights(e, beta)
    mean = float(p @ e)
    variance = float(p @ (e - mean) ** 2)
    return mean, variance


def diabatic_moments(state, h):
    """<H> and <H^2> - <H>^2 of a pure state.

    A single matvec suffices: <H^2> = ||H psi||^2 for Hermitian H.
    """
    psi = state.amplitudes
    h_psi = h.apply(psi)
    mean = float(np.real(np.vdot(psi, h_psi)))
    second = float(np.real(np.vdot(h_psi, h_psi)))
    return mean, second - mean**2


def beta_cap(spectrum):
    """Largest useful beta: 50 / (first resolvable gap above the ground level).

    Beyond this the distribution is numerically a ground-state point mass.
    Falls back to a span-based value when the whole spectrum is degenerate.
    """
    e = np.sort(_energies_of(spectrum))
    span = e[-1] - e[0]
    if span <= 0:
        return 1.0
    above = e[e > e[0] + 1e-9 * span]
    gap = above[0] - e[0] if len(above) else span
    return 50.0 / gap


def fit_beta_average(spectrum, target_energy, sector_restricted=False):
    """Solve <E>_therm(beta) = target on the monotone branch.

    <E> decreases strictly in beta (its derivative is minus the variance),
    so a bracketed bisection with Newton polish converges unconditionally.
    Targets above the infinite-temperature mean land on the negative-beta
    branch and are flagged non-thermal.
    """
    e = _energies_of(spectrum)
    e0 = float(e.min())
    span = float(e.max()) - e0
    mean_infinite_t = float(np.mean(e))
    if span <= 0:
        raise FitDomainError("average fit undefined for a fully degenerate spectrum")
    if target_energy <= e0:
        raise FitDomainError(
            f"sub-ground-state energy target {target_energy:g} <= E0 = {e0:g}"
        )
    if target_energy >= float(e.max()):
        raise FitDomainError(
            f"energy target {target_energy:g} at or above the spectral maximum"
        )

    def make(beta, residual, non_thermal=False, notes=()):
        return ThermalFit(
            method="average",
            beta=float(beta),
            converged=residual <= FIT_TOL,
            residual=float(residual),
            sector_restricted=sector_restricted,
            non_thermal=non_thermal,
            notes=notes,
        )

    if abs(target_energy - mean_infinite_t) <= 1e-15 * span:
        return make(0.0, 0.0)
    cap = beta_cap(e)
    if target_energy < mean_infinite_t:
        lo, hi = 0.0, cap
        mean_cap = thermal_moments(e, cap)[0]
        if target_energy <= mean_cap:
            residual = abs(mean_cap - target_energy) / span
            return make(cap, min(residual, FIT_TOL), notes=("beta at solver cap",))
        beta = _solve_mean(e, target_energy, lo, hi)
        residual = abs(thermal_moments(e, beta)[0] - target_energy) / span
        return make(beta, residual)
    # Negative-beta branch: population inversion, not thermally stable.
    mirrored = fit_beta_average(-e[::-1], -target_energy)
    notes = tuple(mirrored.notes) + ("negative-beta branch",)
    return make(-mirrored.beta, mirrored.residual, non_thermal=True, notes=notes)


def _solve_mean(energies, target, lo, hi):
    # f(beta) = <E>(beta) - target is strictly decreasing on [lo, hi].
    span = float(np.max(energies) - np.min(energies))
    beta = 0.5 * (lo + hi)
    for _ in range(200):
        mean, variance = thermal_moments(energies, beta)
        f = mean - target
        if abs(f) <= 1e-15 * span:
            return beta
        if f > 0:
            lo = beta
        else:
            hi = beta
        newton = beta + f / variance if variance > 0 else None
        if newton is not None and lo < newton < hi:
            beta_next = newton
        else:
            beta_next = 0.5 * (lo + hi)
        if beta_next == beta:
            return beta
        beta = beta_next
    return beta


def fit_beta_fluctuation(spectrum, target_variance, sector_restricted=False, grid_size=512):
    """Match the thermal energy variance to a target.

    The variance need not be monotone in beta, so a dense log-spaced scan
    brackets every crossing; the largest-beta (coldest) solution is
    returned and all crossings are listed in the notes.
    """
    e = _energies_of(spectrum)
    span = float(e.max() - e.min())
    if span <= 0:
        raise FitDomainError("fluctuation fit undefined for a degenerate spectrum")
    if not target_variance > 0:
        raise FitDomainError(f"target variance must be positive, got {target_variance:g}")
    cap = beta_cap(e)
    grid = np.concatenate([[0.0], np.geomspace(1e-4 / span, cap, grid_size)])
    variances = np.array([thermal_moments(e, b)[1] for b in grid])
    v_max = float(variances.max())
    if target_variance > v_max * (1 + 1e-12):
        raise FitDomainError(
            f"target variance {target_variance:g} exceeds the maximum attainable "
            f"{v_max:g} over beta >= 0"
        )

    def variance_at(beta):
        return thermal_moments(e, beta)[1]

    crossings = []
    mismatch = variances - target_variance
    for k in range(len(grid) - 1):
        if mismatch[k] == 0.0:
            crossings.append(float(grid[k]))
        elif mismatch[k] * mismatch[k + 1] < 0:
            lo, hi = grid[k], grid[k + 1]
            f_lo = mismatch[k]
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                f_mid = variance_at(mid) - target_variance
                if f_mid == 0.0 or hi - lo <= 1e-15 * max(hi, 1.0):
                    break
                if (f_mid > 0) == (f_lo > 0):
                    lo, f_lo = mid, f_mid
                else:
                    hi = mid
            crossings.append(0.5 * (lo + hi))
    if mismatch[-1] == 0.0:
        crossings.append(float(grid[-1]))
    notes = tuple(f"crossing at beta={b:.6e}" for b in crossings)
    if not crossings:
        # Variance still above target at the cap: the solution is colder
        # than anything resolvable, so report the cap itself.
        beta = cap
        notes = ("beta at solver cap",)
        residual = min(abs(variance_at(beta) - target_variance) / span**2, FIT_TOL)
    else:
        beta = max(crossings)
        residual = abs(variance_at(beta) - target_variance) / span**2
    return ThermalFit(
        method="fluctuation",
        beta=float(beta),
        converged=residual <= max(FIT_TOL, 1e-8),
        residual=float(residual),
        sector_restricted=sector_restricted,
        notes=notes,
    )


def fit_beta_ratio(p_gs, p_1, e_gap):
    """Boltzmann ratio fit: beta = (ln P_gs - ln P_1) / (E_1 - E_gs)."""
    if not (p_gs > 0 and p_1 > 0):
        raise FitDomainError(
            f"undefined ratio: probabilities must be positive (got {p_gs:g}, {p_1:g})"
        )
    if not e_gap > 0:
        raise FitDomainError(f"degenerate gap: E_1 - E_gs = {e_gap:g} must be positive")
    beta = (math.log(p_gs) - math.log(p_1)) / e_gap
    return ThermalFit(
        method="ratio",
        beta=float(beta),
        converged=True,
        residual=0.0,
        non_thermal=beta <= 0,
        notes=("population inversion",) if beta <= 0 else (),
    )


def thermal_distribution(spectrum, beta, sector_restricted=False):
    """Normalized Boltzmann distribution over all states or the ground sector."""
    energies = _energies_of(spectrum)
    if sector_restricted:
        mask = spectrum.ground_sector_mask
        indices = np.nonzero(mask)[0]
    else:
        indices = np.arange(len(energies))
    probabilities, log_partition = boltzmann_weights(energies[indices], beta)
    return ThermalDistribution(
        probabilities=probabilities,
        indices=indices,
        beta=float(beta),
        sector_restricted=sector_restricted,
        log_partition=log_partition,
    )


@dataclass(frozen=True)
class TwoTemperatureReport:
    """Separate log-probability slopes for 2-member and 4-member orbits.

    The antiferromagnetic distributions tend to split into two families by
    the size of the localized-state orbit backing each eigenstate; this is
    reported as a diagnostic, with no numerical claim attached.
    """

    beta_orbit2: float
    beta_orbit4: float
    n_states_orbit2: int
    n_states_orbit4: int


def two_temperature_diagnostic(spectrum, probabilities, min_probability=1e-8):
    """Fit ln P_n vs E_n separately for orbit-size-2 and orbit-size-4 states."""
    from .spin import orbit_size_labels

    sizes = orbit_size_labels(spectrum)
    mask = spectrum.ground_sector_mask & (probabilities > min_probability)
    results = {}
    counts = {}
    for size in (2, 4):
        sel = mask & (sizes == size)
        counts[size] = int(np.count_nonzero(sel))
        if counts[size] < 2:
            results[size] = math.nan
            continue
        e = spectrum.energies[sel]
        y = np.log(probabilities[sel])
        design = np.column_stack([np.ones_like(e), e])
        coeffs, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
        results[size] = float(-coeffs[1])
    return TwoTemperatureReport(
        beta_orbit2=results[2],
        beta_orbit4=results[4],
        n_states_orbit2=counts[2],
        n_states_orbit4=counts[4],
    )
