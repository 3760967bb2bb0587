"""Diabatic state preparation in trapped-ion Ising chains, compared against
thermal distributions.

The pipeline runs trap physics (equilibrium positions, transverse modes),
builds the phonon-mediated spin-exchange matrix, ramps the transverse field
down with Crank-Nicolson evolution, diagonalizes the final Hamiltonian in
parity sectors, and fits effective temperatures to the resulting eigenstate
populations.
"""

__version__ = "0.1.0"

from . import couplings, evolve, harness, obs, spin, thermo, trap  # noqa: F401
from .errors import SimulationError  # noqa: F401
