"""Experiment-style observables for diabatic states and thermal ensembles.

An EnsembleView puts a pure state and a Boltzmann mixture on equal footing
for everything diagonal in the z basis: both reduce to a weight per
computational basis state, so magnetization moments, the Binder cumulant,
and spin-spin correlations are single O(2^N) reductions.  Thermal basis
weights are accumulated per eigenstate (never via a 4^N density matrix).
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonThermalFitError
from .spin import sigma_z_table

#: Number of wavenumber grid points over [-pi, pi]; odd so 0 and +/-pi are exact.
K_GRID_POINTS = 201


def default_k_grid(n_points=K_GRID_POINTS):
    if n_points % 2 == 0:
        n_points += 1  # keep k = 0 on the grid
    # Mirror the positive half so 0 and +/-pi sit on the grid exactly.
    half = np.linspace(0.0, np.pi, (n_points + 1) // 2)
    return np.concatenate([-half[:0:-1], half])


class EnsembleView:
    """Expectation values for either a pure state or a thermal mixture."""

    def __init__(self, kind, basis_weights, energies, energy_probabilities):
        self.kind = kind
        self._basis_weights = basis_weights
        self._energies = energies
        self._energy_probabilities = energy_probabilities

    @classmethod
    def pure(cls, state, spectrum=None):
        """View of a normalized pure state; a spectrum enables energy moments."""
        weights = np.abs(state.amplitudes) ** 2
        energies = energy_p = None
        if spectrum is not None:
            energies = spectrum.energies
            energy_p = eigenstate_probabilities(state, spectrum)
        return cls("pure", weights, energies, energy_p)

    @classmethod
    def thermal(cls, distribution, spectrum):
        """View of a Boltzmann mixture over the given spectral decomposition."""
        vectors = spectrum.eigenvectors[:, distribution.indices]
        weights = np.abs(vectors) ** 2 @ distribution.probabilities
        return cls(
            "thermal",
            weights,
            spectrum.energies[distribution.indices],
            distribution.probabilities,
        )

    @property
    def basis_weights(self):
        """Probability weight of each computational basis state."""
        return self._basis_weights

    @property
    def n_spins(self):
        return int(np.log2(len(self._basis_weights)).round())

    def expectation_diag(self, diagonal_values):
        """<O> for an operator diagonal in the z basis."""
        return float(self._basis_weights @ diagonal_values)

    def energy_moments(self):
        """(<E>, <(Delta E)^2>) of the view."""
        if self._energies is None:
            raise ValueError("pure view needs a spectrum for energy moments")
        mean = float(self._energy_probabilities @ self._energies)
        variance = float(self._energy_probabilities @ (self._energies - mean) ** 2)
        return mean, variance


def eigenstate_probabilities(state, spectrum):
    """P_n = |<n|psi>|^2 over the full spectrum."""
    if len(state.amplitudes) != spectrum.basis.dimension:
        raise ValueError("state dimension does not match the spectrum")
    overlaps = spectrum.eigenvectors.T @ state.amplitudes
    probabilities = np.abs(overlaps) ** 2
    total = probabilities.sum()
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"probabilities sum to {total:.12f}, state not normalized")
    return probabilities


def magnetization_values(n_spins, staggered):
    """Diagonal of the (staggered) magnetization m = (1/N) sum_i s_i sigma_z_i."""
    z = sigma_z_table(n_spins)
    signs = np.ones(n_spins) if not staggered else (-1.0) ** np.arange(n_spins)
    return (z @ signs) / n_spins


def magnetization_moments(view, staggered=False):
    """Raw moments (<m>, <m^2>, <m^4>) of the magnetization."""
    m = magnetization_values(view.n_spins, staggered)
    return (
        view.expectation_diag(m),
        view.expectation_diag(m**2),
        view.expectation_diag(m**4),
    )


@dataclass(frozen=True)
class BinderCumulant:
    g_s: float
    g_bar: float
    central_variance: float
    defined: bool


def binder_cumulant(view, staggered=False):
    """Binder cumulant g = <(m-<m>)^4> / <(m-<m>)^2>^2 and its rescaled form.

    The rescale (g0 - g) / (g0 - 1) with g0 = 3 - 2/N maps the all-x product
    state to 0 and a GHZ state to 1.  A zero central variance leaves the
    ratio undefined, which is reported through the ``defined`` flag.
    """
    n = view.n_spins
    if n < 2:
        raise ValueError("Binder rescale needs at least 2 spins")
    m = magnetization_values(n, staggered)
    mean = view.expectation_diag(m)
    centered = m - mean
    c2 = view.expectation_diag(centered**2)
    c4 = view.expectation_diag(centered**4)
    if c2 <= 0:
        return BinderCumulant(np.nan, np.nan, c2, False)
    g_s = c4 / c2**2
    g0 = 3.0 - 2.0 / n
    g_bar = (g0 - g_s) / (g0 - 1.0)
    return BinderCumulant(float(g_s), float(g_bar), float(c2), True)


@dataclass(frozen=True)
class StructureFactorResult:
    wavenumbers: np.ndarray
    values: np.ndarray        # S(k) >= 0
    correlations: np.ndarray  # C(r), r = 1..N-1

    def at(self, k):
        """S at the grid point closest to k."""
        return float(self.values[np.argmin(np.abs(self.wavenumbers - k))])


def structure_factor(view, k_grid=None):
    """Structure factor S(k) = |sum_r C(r) e^{ikr}| / (N-1).

    C(r) averages the connected correlator over all pairs at separation r;
    r runs 1..N-1, the separations that exist on an open chain.
    """
    n = view.n_spins
    if n < 2:
        raise ValueError("structure factor needs at least 2 spins")
    if k_grid is None:
        k_grid = default_k_grid()
    z = sigma_z_table(n)
    weighted = view.basis_weights[:, None] * z
    single = view.basis_weights @ z                   # <sigma_z_i>
    pair = weighted.T @ z                             # <sigma_z_i sigma_z_j>
    connected = pair - np.outer(single, single)
    separations = np.arange(1, n)
    correlations = np.array(
        [np.mean(np.diagonal(connected, r)) for r in separations]
    )
    phases = np.exp(1j * np.outer(k_grid, separations))
    values = np.abs(phases @ correlations) / (n - 1)
    return StructureFactorResult(np.asarray(k_grid), values, correlations)


def specific_heat(view, fit):
    """Generalized specific heat <(Delta E)^2> / T^2 at the fitted temperature.

    Refuses non-converged or negative-temperature fits: the definition only
    extends to the diabatic state through a positive effective temperature.
    """
    if not fit.converged or fit.non_thermal or fit.beta <= 0:
        raise NonThermalFitError(
            f"specific heat needs a converged positive-temperature fit "
            f"(method={fit.method}, beta={fit.beta:g}, converged={fit.converged})"
        )
    _, variance = view.energy_moments()
    return float(variance * fit.beta**2)
