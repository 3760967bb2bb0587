"""Independent oracles shared across test modules.

Everything here is built from first principles (Kronecker products, exact
exponentials via dense diagonalization) so it never shares code paths with
the implementations it checks.
"""

import numpy as np

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]])
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]])
IDENTITY_2 = np.eye(2)


def site_operator(op, site, n):
    """Operator acting on 1-based ``site`` of an n-spin chain.

    Site s lives on bit s-1 (least significant first), so the Kronecker
    chain runs from site n down to site 1.
    """
    mats = [IDENTITY_2] * n
    mats[n - site] = op
    out = mats[0]
    for m in mats[1:]:
        out = np.kron(out, m)
    return out


def kron_hamiltonian(j_matrix, b_field):
    """Dense H = -sum_{i<j} J_ij s_z s_z - B sum_i s_x by explicit products."""
    n = j_matrix.shape[0]
    dim = 2**n
    h = np.zeros((dim, dim))
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            h -= j_matrix[i - 1, j - 1] * (
                site_operator(SIGMA_Z, i, n) @ site_operator(SIGMA_Z, j, n)
            )
        h -= b_field * site_operator(SIGMA_X, i, n)
    return h


def reflection_symmetric_couplings(n, seed):
    """Random symmetric couplings obeying J_ij = J_{n+1-i, n+1-j}."""
    rng = np.random.default_rng(seed)
    j = np.zeros((n, n))
    for i in range(n):
        for k in range(i + 1, n):
            j[i, k] = j[k, i] = rng.normal()
    j = 0.5 * (j + j[::-1, ::-1].copy())
    np.fill_diagonal(j, 0.0)
    return j


def segment_exact_evolve(j_matrix, schedule, psi0, n_segments):
    """Piecewise-constant propagation with exact segment exponentials.

    The field is held at its midpoint value over each of ``n_segments``
    equal slices of [0, t_final]; each slice is advanced with the exact
    unitary exp(-i 2 pi H dt) from a dense eigendecomposition.
    """
    dt = schedule.t_final / n_segments
    psi = psi0.astype(complex)
    for k in range(n_segments):
        b_mid = schedule.field((k + 0.5) * dt)
        h = kron_hamiltonian(j_matrix, b_mid)
        energies, vectors = np.linalg.eigh(h)
        phases = np.exp(-2j * np.pi * energies * dt)
        psi = vectors @ (phases * (vectors.T @ psi))
    return psi


def ghz_state(n):
    dim = 2**n
    psi = np.zeros(dim, dtype=complex)
    psi[0] = psi[dim - 1] = 1.0 / np.sqrt(2.0)
    return psi


def neel_ghz_state(n):
    """Equal superposition of the two Neel-ordered product states."""
    up_down = sum(1 << i for i in range(1, n, 2))
    down_up = up_down ^ (2**n - 1)
    psi = np.zeros(2**n, dtype=complex)
    psi[up_down] = psi[down_up] = 1.0 / np.sqrt(2.0)
    return psi
