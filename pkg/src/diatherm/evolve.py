"""Exponential field ramp and norm-preserving Crank-Nicolson evolution.

The protocol starts from the all-x product state (the ground state of the
field term) and decays the transverse field as B_x(t) = B0 exp(-t/tau) over
t_f = 6 tau.  One Crank-Nicolson step solves

    (1 + i pi dt H) psi' = (1 - i pi dt H) psi

with H evaluated at the midpoint field B_x(t + dt/2); the factor 2 pi
converts the frequency-unit Hamiltonian to angular phase and the half-step
factors 1/2 are absorbed into pi dt.  The Cayley transform is unitary,
so the norm is preserved up to the linear-solve residual.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg

from .errors import ConvergenceError, SnapshotFormatError

#: Default time resolution: steps per ramp time constant.
STEPS_PER_TAU = 2000

_SNAPSHOT_MAGIC = b"DTHSNAP1"
_SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class RampSchedule:
    """B_x(t) = b0 * exp(-t / tau) for t in [0, t_final]."""

    b0: float       # Hz
    tau: float      # s
    t_final: float  # s

    def __post_init__(self):
        if not (self.b0 > 0 and self.tau > 0):
            raise ValueError("ramp requires b0 > 0 and tau > 0")
        if self.t_final < 0:
            raise ValueError("t_final must be non-negative")

    @classmethod
    def from_protocol(cls, j0, j0_tau=0.5, b0_over_j0=5.0, t_f_over_tau=6.0, t_final=None):
        """Protocol defaults: b0 = 5 J0, J0 tau = 1/2, t_f = 6 tau.

        If ``t_final`` is given it overrides the derived final time (the
        ramp constant is then tau = t_final / t_f_over_tau when t_final > 0).
        """
        tau = j0_tau / j0
        if t_final is not None and t_final > 0:
            tau = t_final / t_f_over_tau
        elif t_final is None:
            t_final = t_f_over_tau * tau
        return cls(b0=b0_over_j0 * j0, tau=tau, t_final=t_final)

    def field(self, t):
        return self.b0 * math.exp(-t / self.tau)


@dataclass(frozen=True)
class QuantumState:
    amplitudes: np.ndarray  # complex, length 2^N
    time: float             # s

    def norm(self):
        return float(np.linalg.norm(self.amplitudes))


def initial_state(basis):
    """All spins along +x: the uniform superposition, sigma_x = +1 product state."""
    dim = basis.dimension
    amplitudes = np.full(dim, dim**-0.5, dtype=complex)
    return QuantumState(amplitudes, 0.0)


def _solve_cayley(h, rhs, coefficient, tol, max_iter=400):
    """Solve (1 + i c H) x = rhs; returns (x, residual estimate).

    The fixed-point iteration x <- rhs - i c H x contracts at rate
    c * ||H||, which is tiny at production step sizes; a GMRES fallback
    covers coarse steps.  The residual of iterate x equals the next update,
    so convergence monitoring is free.
    """
    contraction = coefficient * h.norm_bound()
    if contraction < 0.75:
        from .spin import _flip_table

        diag = h.diagonal
        b = h.b_field
        table = _flip_table(h.basis.n_spins)
        scale = -1j * coefficient
        x = rhs
        for _ in range(max_iter):
            hx = diag * x
            if b != 0.0:
                hx -= b * x[table].sum(axis=0)
            np.multiply(hx, scale, out=hx)
            np.add(hx, rhs, out=hx)
            hx -= x
            residual = float(np.linalg.norm(hx))
            np.add(hx, x, out=hx)
            x = hx
            if residual < tol:
                return x, residual * min(contraction, 1.0)
        raise ConvergenceError(
            f"Crank-Nicolson linear solve stalled at residual {residual:.3e}",
            residual=residual,
        )
    dim = len(rhs)
    operator = scipy.sparse.linalg.LinearOperator(
        (dim, dim),
        matvec=lambda v: v + 1j * coefficient * h.apply(v),
        dtype=complex,
    )
    x, info = scipy.sparse.linalg.gmres(operator, rhs, rtol=tol, atol=0.0, maxiter=500)
    residual = float(np.linalg.norm(rhs - (x + 1j * coefficient * h.apply(x))))
    if info != 0 or residual > max(tol, 1e-10):
        raise ConvergenceError(
            f"GMRES failed for Crank-Nicolson step (info={info}, residual={residual:.3e})",
            residual=residual,
        )
    return x, residual


def crank_nicolson_step(state, h, dt, solve_tol=1e-12):
    """One Cayley step with H held at the supplied (midpoint-field) value."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    coefficient = math.pi * dt
    psi = state.amplitudes
    rhs = psi - 1j * coefficient * h.apply(psi)
    x, _ = _solve_cayley(h, rhs, coefficient, solve_tol)
    return QuantumState(x, state.time + dt)


@dataclass(frozen=True)
class Trajectory:
    """Sampled states plus the final state of one evolution run."""

    samples: tuple            # of (t, QuantumState)
    final: QuantumState
    dt: float
    n_steps: int
    max_norm_error: float
    max_solver_residual: float


def evolve(state0, h, schedule, dt, sample_times=(), observer=None, solve_tol=1e-12):
    """Integrate the ramp from ``state0.time`` (assumed 0) to t_final.

    ``sample_times`` are snapped to the nearest step boundary; the observer,
    if given, receives (t, state) at each sample.  The norm is checked every
    step and the worst deviation is reported on the trajectory.
    """
    t_final = schedule.t_final
    n_steps = int(round(t_final / dt)) if t_final > 0 else 0
    if n_steps and abs(n_steps * dt - t_final) > 1e-9 * t_final:
        raise ValueError(
            f"dt={dt:g} does not divide t_final={t_final:g} within rounding"
        )
    sample_steps = {}
    for t in sample_times:
        k = min(max(int(round(t / dt)), 0), n_steps) if n_steps else 0
        sample_steps.setdefault(k, k * dt if n_steps else 0.0)
    samples = []
    state = state0
    max_norm_error = abs(state.norm() - 1.0)
    max_residual = 0.0
    if 0 in sample_steps:
        samples.append((0.0, state))
        if observer is not None:
            observer(0.0, state)
    coefficient = math.pi * dt
    midpoint_fields = schedule.b0 * np.exp(
        -(np.arange(n_steps) + 0.5) * dt / schedule.tau
    )
    for k in range(n_steps):
        h_step = h.with_field(midpoint_fields[k])
        psi = state.amplitudes
        rhs = psi - 1j * coefficient * h_step.apply(psi)
        x, residual = _solve_cayley(h_step, rhs, coefficient, solve_tol)
        state = QuantumState(x, (k + 1) * dt)
        max_residual = max(max_residual, residual)
        norm_error = abs(state.norm() - 1.0)
        max_norm_error = max(max_norm_error, norm_error)
        if norm_error > 1e-6:
            raise ConvergenceError(
                f"norm drifted by {norm_error:.3e} at step {k + 1}; "
                "evolution is no longer unitary",
                residual=norm_error,
            )
        if k + 1 in sample_steps:
            samples.append((state.time, state))
            if observer is not None:
                observer(state.time, state)
    return Trajectory(
        samples=tuple(samples),
        final=state,
        dt=dt if n_steps else 0.0,
        n_steps=n_steps,
        max_norm_error=max_norm_error,
        max_solver_residual=max_residual,
    )


@dataclass(frozen=True)
class GateReport:
    """Outcome of the step-size convergence gate."""

    gated: bool
    passed: bool
    steps_per_tau: int
    dt: float
    deltas: tuple  # aligned state distances between successive resolutions


def aligned_distance(a, b):
    """Global-phase-insensitive state distance sqrt(2 (1 - |<a|b>|)).

    The overall dynamical phase carries no physics, so step-size
    convergence is judged after aligning it; every observable difference
    is bounded by a small multiple of this distance.
    """
    overlap = min(abs(np.vdot(a, b)), 1.0)
    return math.sqrt(max(2.0 * (1.0 - overlap), 0.0))


def converged_evolve(
    state0,
    h,
    schedule,
    steps_per_tau=STEPS_PER_TAU,
    gate_tol=3e-5,
    max_halvings=8,
    sample_times=(),
    observer=None,
):
    """Evolve with automatic step halving until the final state stops moving.

    The gate halves dt until the aligned distance between the final states
    of successive resolutions drops below ``gate_tol``; the finer of the
    last pair is returned.  The default tolerance is calibrated so that one
    further halving moves every reported observable by less than 1e-6.
    ``max_halvings=0`` disables the gate and runs once at the requested
    resolution.
    """
    def run(s):
        return evolve(
            state0, h, schedule, schedule.tau / s,
            sample_times=sample_times, observer=None,
        )

    if schedule.t_final <= 0:
        trajectory = run(steps_per_tau)
        report = GateReport(False, True, steps_per_tau, 0.0, ())
        return trajectory, report
    if max_halvings == 0:
        trajectory = run(steps_per_tau)
        if observer is not None:
            for t, state in trajectory.samples:
                observer(t, state)
        report = GateReport(False, True, steps_per_tau, trajectory.dt, ())
        return trajectory, report
    deltas = []
    s = steps_per_tau
    coarse = run(s)
    for _ in range(max_halvings):
        fine = run(2 * s)
        delta = aligned_distance(fine.final.amplitudes, coarse.final.amplitudes)
        deltas.append(delta)
        if delta < gate_tol:
            if observer is not None:
                for t, state in fine.samples:
                    observer(t, state)
            report = GateReport(True, True, 2 * s, fine.dt, tuple(deltas))
            return fine, report
        s *= 2
        coarse = fine
    raise ConvergenceError(
        "step-size gate failed: state differences "
        + ", ".join(f"{d:.3e}" for d in deltas)
        + f" never dropped below {gate_tol:g}",
        residual=deltas[-1],
    )


def write_state_snapshot(path, state, n_spins):
    """Binary snapshot: magic, version (u32 LE), N (u32 LE), then complex pairs."""
    amplitudes = np.ascontiguousarray(state.amplitudes, dtype=np.complex128)
    if len(amplitudes) != 1 << n_spins:
        raise ValueError("state length does not match n_spins")
    with open(path, "wb") as handle:
        handle.write(_SNAPSHOT_MAGIC)
        handle.write(np.array([_SNAPSHOT_VERSION, n_spins], dtype="<u4").tobytes())
        pairs = np.empty(2 * len(amplitudes))
        pairs[0::2] = amplitudes.real
        pairs[1::2] = amplitudes.imag
        handle.write(pairs.astype("<f8").tobytes())


def read_state_snapshot(path):
    """Read a snapshot back; returns (n_spins, amplitudes)."""
    with open(path, "rb") as handle:
        raw = handle.read()
    if len(raw) < len(_SNAPSHOT_MAGIC) + 8 or raw[: len(_SNAPSHOT_MAGIC)] != _SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"{path}: not a state snapshot")
    header = np.frombuffer(raw, dtype="<u4", count=2, offset=len(_SNAPSHOT_MAGIC))
    version, n_spins = int(header[0]), int(header[1])
    if version != _SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported snapshot version {version}")
    dim = 1 << n_spins
    offset = len(_SNAPSHOT_MAGIC) + 8
    expected = offset + 16 * dim
    if len(raw) != expected:
        raise SnapshotFormatError(
            f"{path}: payload is {len(raw) - offset} bytes, expected {16 * dim}"
        )
    pairs = np.frombuffer(raw, dtype="<f8", offset=offset)
    amplitudes = pairs[0::2] + 1j * pairs[1::2]
    return n_spins, amplitudes
