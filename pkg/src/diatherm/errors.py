"""Exception types shared across the simulation pipeline."""


class SimulationError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SimulationError):
    """Invalid or inconsistent run configuration."""


class ConvergenceError(SimulationError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ZigzagInstabilityError(SimulationError):
    """Transverse confinement too weak for a stable linear chain."""


class ResonanceError(SimulationError):
    """Beat-note detuning too close to a transverse normal mode."""


class TuningRangeError(SimulationError):
    """Requested power-law exponent unreachable within the axial bracket."""


class FitDomainError(SimulationError):
    """Thermometry fit target lies outside the solvable range."""


class NonThermalFitError(SimulationError):
    """Operation requires a converged fit with a positive temperature."""


class ParityLabelError(SimulationError):
    """Eigenvectors could not be resolved into parity sectors."""


class SnapshotFormatError(SimulationError):
    """State snapshot file is malformed or has an unsupported version."""


class SchemaError(SimulationError):
    """CSV table schema tag does not match the expected schema."""
