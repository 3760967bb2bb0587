"""Static spin-exchange couplings of the driven chain and their power law.

The exchange matrix is the phonon-mediated mode sum

    J_ij = Omega^2 * nu_R * sum_m b_im b_jm / (mu^2 - omega_m^2),

in Hz, with blue detuning mu above the transverse COM mode so that every
off-diagonal element shares one sign.  The decay with distance is
approximately a power law J ~ J0 / (r/a)^alpha, characterized by a log-log
least-squares fit.
"""

import warnings
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ResonanceError, TuningRangeError, ZigzagInstabilityError
from .trap import lamb_dicke, solve_equilibrium_positions, transverse_normal_modes

#: Reject detunings with |mu^2 - omega_m^2| below this fraction of mu^2.
RESONANCE_GUARD = 1e-6


@dataclass(frozen=True)
class CouplingMatrix:
    """Symmetric spin-exchange matrix with zero diagonal, in Hz.

    ``sign`` records the ferromagnetic (all entries positive) or
    antiferromagnetic (all negative, a global sign flip) convention.
    ``alpha_fit`` and ``fit_residual`` are filled once a power-law fit has
    been attached.
    """

    values: np.ndarray
    sign: str  # "FM" | "AFM"
    j0_nn: float | None = None          # mean nearest-neighbor |J|
    alpha_fit: float | None = None
    fit_residual: float | None = None

    @property
    def n_sites(self):
        return self.values.shape[0]

    def flipped(self):
        """The same magnitudes with the opposite global sign."""
        flipped_values = -self.values
        flipped_values.flags.writeable = False
        new_sign = "AFM" if self.sign == "FM" else "FM"
        return replace(self, values=flipped_values, sign=new_sign)


class PowerLawFit(NamedTuple):
    j0: float        # Hz
    alpha: float
    residual: float  # RMS of the log-log fit


def detuning_from_com(spec):
    """Beat-note detuning mu = omega_COM + 3 * eta * Omega, in Hz."""
    return spec.omega_transverse + 3.0 * lamb_dicke(spec) * spec.rabi


def compute_couplings(modes, spec, mu, sign="FM"):
    """Evaluate the spin-exchange mode sum at detuning ``mu``.

    The antiferromagnetic case is the ferromagnetic matrix with a global
    sign flip; the mode sum itself is always evaluated once.
    """
    if sign not in ("FM", "AFM"):
        raise ValueError(f"sign must be 'FM' or 'AFM', got {sign!r}")
    denom = mu**2 - modes.frequencies**2
    guard = RESONANCE_GUARD * mu**2
    offending = np.nonzero(np.abs(denom) < guard)[0]
    if len(offending):
        m = int(offending[0])
        raise ResonanceError(
            f"detuning resonance: mu={mu:g} Hz is within guard of mode {m} "
            f"at {modes.frequencies[m]:g} Hz"
        )
    b = modes.mode_matrix
    j = spec.rabi**2 * spec.recoil * (b / denom) @ b.T
    j = 0.5 * (j + j.T)
    np.fill_diagonal(j, 0.0)
    if sign == "AFM":
        j = -j
    n = spec.n_ions
    j0_nn = float(np.mean(np.abs(np.diagonal(j, 1)))) if n > 1 else None
    j.flags.writeable = False
    return CouplingMatrix(values=j, sign=sign, j0_nn=j0_nn)


def fit_power_law(couplings, chain, distance="physical"):
    """Least-squares fit of log|J_ij| against log separation over all pairs.

    ``distance="physical"`` uses |R_i - R_j| / a, the contract for the decay
    exponent; ``distance="index"`` uses |i - j| for comparison, since the
    chain is only approximately uniform.
    """
    n = couplings.n_sites
    if n < 3:
        raise ValueError("power-law fit needs at least 3 ions")
    if distance not in ("physical", "index"):
        raise ValueError(f"unknown distance convention {distance!r}")
    i_idx, j_idx = np.triu_indices(n, k=1)
    magnitudes = np.abs(couplings.values[i_idx, j_idx])
    if distance == "physical":
        positions = chain.positions_physical
        separations = np.abs(positions[i_idx] - positions[j_idx]) / chain.mean_spacing
    else:
        separations = (j_idx - i_idx).astype(float)
    keep = magnitudes > 0
    if not np.all(keep):
        warnings.warn(
            f"excluding {np.count_nonzero(~keep)} zero couplings from power-law fit",
            stacklevel=2,
        )
    log_r = np.log(separations[keep])
    log_j = np.log(magnitudes[keep])
    design = np.column_stack([np.ones_like(log_r), log_r])
    coeffs, _, _, _ = np.linalg.lstsq(design, log_j, rcond=None)
    intercept, slope = coeffs
    rms = float(np.sqrt(np.mean((design @ coeffs - log_j) ** 2)))
    return PowerLawFit(j0=float(np.exp(intercept)), alpha=float(-slope), residual=rms)


def with_power_law_fit(couplings, chain, distance="physical"):
    """Return a copy of ``couplings`` with the fitted (J0-adjacent) fields set."""
    fit = fit_power_law(couplings, chain, distance=distance)
    return replace(couplings, alpha_fit=fit.alpha, fit_residual=fit.residual)


def _alpha_at_axial(spec, omega_axial):
    probe = replace(spec, omega_axial=omega_axial)
    chain = solve_equilibrium_positions(probe)
    modes = transverse_normal_modes(probe, chain)
    matrix = compute_couplings(modes, probe, detuning_from_com(probe))
    return fit_power_law(matrix, chain).alpha


def _stable_upper_axial(spec, lo, hi, refinements=24):
    """Largest zigzag-stable axial frequency at or below ``hi``."""
    def stable(wz):
        try:
            _alpha_at_axial(spec, wz)
            return True
        except ZigzagInstabilityError:
            return False

    if stable(hi):
        return hi
    unstable = hi
    while hi > lo:
        hi *= 0.85
        if stable(hi):
            break
        unstable = hi
    else:
        raise TuningRangeError("no zigzag-stable axial frequency inside the bracket")
    for _ in range(refinements):
        mid = 0.5 * (hi + unstable)
        if stable(mid):
            hi = mid
        else:
            unstable = mid
    return 0.995 * hi  # keep a small margin from the instability edge


def tune_axial_for_alpha(
    spec,
    target_alpha,
    bracket=(3.0e5, 2.0e6),
    tol=1e-3,
    alpha_bounds=(0.5, 2.0),
    max_iter=80,
):
    """Bisect the axial COM frequency until the fitted exponent hits target.

    The transverse trap stays fixed.  The exponent varies monotonically with
    the axial frequency over the stable bracket (empirically decreasing:
    stiffer axial confinement widens the transverse band away from the
    blue detuning, making the couplings more uniform); the bisection detects
    the orientation from the bracket endpoints rather than assuming it.
    The upper edge is limited to the zigzag-stable region automatically.
    """
    if not alpha_bounds[0] <= target_alpha <= alpha_bounds[1]:
        raise ValueError(
            f"target_alpha={target_alpha:g} outside configured bounds {alpha_bounds}"
        )
    lo = bracket[0]
    hi = _stable_upper_axial(spec, lo, min(bracket[1], 0.98 * spec.omega_transverse))
    alpha_lo = _alpha_at_axial(spec, lo)
    alpha_hi = _alpha_at_axial(spec, hi)
    alpha_min, alpha_max = sorted((alpha_lo, alpha_hi))
    if not alpha_min <= target_alpha <= alpha_max:
        raise TuningRangeError(
            f"target alpha {target_alpha:g} unreachable: achievable range is "
            f"[{alpha_min:.4f}, {alpha_max:.4f}] for axial in [{lo:g}, {hi:g}] Hz"
        )
    increasing = alpha_hi > alpha_lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        alpha_mid = _alpha_at_axial(spec, mid)
        if abs(alpha_mid - target_alpha) <= tol:
            return mid
        if (alpha_mid < target_alpha) == increasing:
            lo = mid
        else:
            hi = mid
    raise TuningRangeError(
        f"axial tuning did not reach alpha={target_alpha:g} within {max_iter} bisections"
    )


def coupling_matrix_to_csv(couplings, path, provenance=""):
    """Write the upper triangle as (i, j, j_hz) rows with 1-based site labels."""
    n = couplings.n_sites
    lines = [
        f"# provenance: schema=couplings/v1 sign={couplings.sign} n={n}"
        + (f" {provenance}" if provenance else ""),
        "i,j,j_hz",
    ]
    for i in range(n):
        for j in range(i + 1, n):
            lines.append(f"{i + 1},{j + 1},{format(float(couplings.values[i, j]), '.17g')}")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def coupling_matrix_from_csv(path):
    """Rebuild a CouplingMatrix from a file written by coupling_matrix_to_csv."""
    with open(path, encoding="utf-8") as handle:
        lines = [line.strip() for line in handle if line.strip()]
    meta = {}
    if lines and lines[0].startswith("#"):
        for token in lines[0].lstrip("# ").replace("provenance:", "").split():
            if "=" in token:
                key, _, value = token.partition("=")
                meta[key] = value
        lines = lines[1:]
    if not lines or lines[0] != "i,j,j_hz":
        raise ValueError(f"{path}: expected couplings CSV header 'i,j,j_hz'")
    n = int(meta.get("n", 0))
    entries = [line.split(",") for line in lines[1:]]
    if not n:
        n = max(int(j) for _, j, _ in entries)
    values = np.zeros((n, n))
    for i_s, j_s, v_s in entries:
        i, j = int(i_s) - 1, int(j_s) - 1
        values[i, j] = values[j, i] = float(v_s)
    values.flags.writeable = False
    sign = meta.get("sign", "FM")
    j0_nn = float(np.mean(np.abs(np.diagonal(values, 1)))) if n > 1 else None
    return CouplingMatrix(values=values, sign=sign, j0_nn=j0_nn)
