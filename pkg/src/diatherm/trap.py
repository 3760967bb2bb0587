"""Ion equilibrium positions and transverse normal modes of a linear Paul trap.

Lengths are reported in meters, but only dimensionless position ratios feed
the spin-exchange formula downstream; the physical length scale matters for
reporting only.  All frequencies are conventional (cycles/s), matching the
experimental convention used throughout the package.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ZigzagInstabilityError

_PLANCK = 6.62607015e-34          # J s
_E_CHARGE = 1.602176634e-19       # C
_COULOMB_K = 8.9875517873681764e9  # N m^2 / C^2

#: Hard cap for the equilibrium solver; chains longer than this are rejected.
MAX_IONS = 32


@dataclass(frozen=True)
class TrapSpec:
    """Trap and drive parameters for a single linear chain.

    ``omega_transverse`` is the (fixed) transverse center-of-mass frequency,
    ``omega_axial`` the tunable axial COM frequency.  ``recoil`` is the
    two-photon recoil frequency of the drive; it fixes the ion mass together
    with ``wavelength``, which is otherwise metadata.
    """

    n_ions: int
    omega_transverse: float     # Hz
    omega_axial: float          # Hz
    recoil: float               # Hz
    rabi: float                 # Hz
    wavelength: float = 355e-9  # m

    def __post_init__(self):
        if self.n_ions < 1:
            raise ValueError("n_ions must be at least 1")
        for name in ("omega_transverse", "omega_axial", "recoil", "rabi", "wavelength"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.omega_axial < self.omega_transverse:
            raise ValueError(
                "linear-chain regime requires omega_axial < omega_transverse "
                f"(got {self.omega_axial:g} >= {self.omega_transverse:g})"
            )

    @property
    def ion_mass(self):
        """Ion mass in kg, recovered from the recoil frequency."""
        return _PLANCK / (self.recoil * self.wavelength**2)


@dataclass(frozen=True)
class IonChain:
    """Equilibrium chain geometry.

    ``positions_dimensionless`` are strictly increasing and odd-symmetric
    about the trap center; multiplying by ``length_scale`` gives positions
    in meters.
    """

    positions_dimensionless: np.ndarray
    length_scale: float  # m

    @property
    def n_ions(self):
        return len(self.positions_dimensionless)

    @property
    def positions_physical(self):
        return self.length_scale * self.positions_dimensionless

    @property
    def mean_spacing(self):
        """Average nearest-neighbor distance in meters (0 for a single ion)."""
        if self.n_ions < 2:
            return 0.0
        return float(np.mean(np.diff(self.positions_physical)))


@dataclass(frozen=True)
class TransverseModes:
    """Transverse normal modes, sorted by descending frequency.

    Column ``m`` of ``mode_matrix`` is the orthonormal eigenvector of mode
    ``m``; mode 0 is always the center-of-mass mode at the transverse trap
    frequency.
    """

    mode_matrix: np.ndarray  # N x N, columns are modes
    frequencies: np.ndarray  # Hz, descending

    @property
    def n_ions(self):
        return self.mode_matrix.shape[0]


def _force_balance(u):
    # f_i = u_i - sum_{j<i} (u_i-u_j)^-2 + sum_{j>i} (u_i-u_j)^-2
    d = u[:, None] - u[None, :]
    np.fill_diagonal(d, np.inf)
    return u - np.sum(np.sign(d) / d**2, axis=1)


def _force_jacobian(u):
    d = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(d, np.inf)
    off = -2.0 / d**3
    jac = off.copy()
    np.fill_diagonal(jac, 1.0 - np.sum(off, axis=1))
    return jac


def solve_equilibrium_positions(spec, tol=1e-13, max_iter=200):
    """Solve the dimensionless Coulomb force-balance equations.

    Damped Newton iteration from an equally spaced guess.  The ordered-chain
    potential is strictly convex, so the iteration is globally convergent;
    each iterate is re-symmetrized so the reflection symmetry of the trap is
    exact rather than approximate.
    """
    n = spec.n_ions
    if n > MAX_IONS:
        raise ValueError(f"n_ions={n} exceeds configured maximum {MAX_IONS}")
    length_scale = (
        _COULOMB_K * _E_CHARGE**2
        / (spec.ion_mass * (2.0 * np.pi * spec.omega_axial) ** 2)
    ) ** (1.0 / 3.0)
    if n == 1:
        return IonChain(np.zeros(1), length_scale)

    u = np.arange(1, n + 1, dtype=float) - (n + 1) / 2.0
    residual = np.max(np.abs(_force_balance(u)))
    for _ in range(max_iter):
        if residual < tol:
            break
        step = np.linalg.solve(_force_jacobian(u), _force_balance(u))
        damping = 1.0
        while True:
            trial = u - damping * step
            trial = 0.5 * (trial - trial[::-1])  # keep odd symmetry exact
            trial_residual = np.max(np.abs(_force_balance(trial)))
            if trial_residual < residual:
                u, residual = trial, trial_residual
                break
            damping *= 0.5
            if damping < 2.0**-20:
                raise ConvergenceError(
                    f"equilibrium line search stalled at residual {residual:.3e}",
                    residual=residual,
                )
    if residual >= tol:
        raise ConvergenceError(
            f"equilibrium positions did not converge after {max_iter} iterations "
            f"(last residual {residual:.3e})",
            residual=residual,
        )
    if np.any(np.diff(u) <= 0):
        raise ConvergenceError("equilibrium positions are not strictly increasing")
    return IonChain(u, length_scale)


def transverse_normal_modes(spec, chain):
    """Diagonalize the transverse stiffness matrix of the chain.

    Returns modes sorted by descending frequency with a deterministic sign
    convention (first entry of magnitude above 1e-10 made positive).  A
    non-positive stiffness eigenvalue means the chain would buckle into a
    zigzag, which is outside the linear-chain model.
    """
    n = spec.n_ions
    if chain.n_ions != n:
        raise ValueError("chain size does not match trap spec")
    anisotropy2 = (spec.omega_transverse / spec.omega_axial) ** 2
    if n == 1:
        return TransverseModes(np.ones((1, 1)), np.array([spec.omega_transverse]))

    u = chain.positions_dimensionless
    d = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(d, np.inf)
    inv3 = 1.0 / d**3
    stiffness = inv3.copy()
    np.fill_diagonal(stiffness, anisotropy2 - np.sum(inv3, axis=1))

    eigvals, eigvecs = np.linalg.eigh(stiffness)
    if eigvals[0] <= 0:
        raise ZigzagInstabilityError(
            "transverse zigzag instability: softest stiffness eigenvalue "
            f"{eigvals[0]:.3e} <= 0 at omega_axial={spec.omega_axial:g} Hz"
        )
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    for m in range(n):
        col = eigvecs[:, m]
        nonzero = np.nonzero(np.abs(col) > 1e-10)[0]
        if len(nonzero) and col[nonzero[0]] < 0:
            eigvecs[:, m] = -col
    frequencies = spec.omega_axial * np.sqrt(eigvals)
    eigvecs.flags.writeable = False
    frequencies.flags.writeable = False
    return TransverseModes(eigvecs, frequencies)


def lamb_dicke(spec):
    """Lamb-Dicke parameter sqrt(recoil / transverse COM frequency)."""
    return float(np.sqrt(spec.recoil / spec.omega_transverse))
