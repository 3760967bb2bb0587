"""The 2^N spin system: Hamiltonian, parity symmetries, diagonalization.

Basis encoding: bit i of a basis index (0-based from the least significant
bit) carries site i+1, with sigma_z eigenvalue +1 for bit 0 and -1 for
bit 1.  The Hamiltonian

    H = - sum_{i<j} J_ij sigma_z_i sigma_z_j - B_x sum_i sigma_x_i

is applied matrix-free: a diagonal vector plus N single-bit-flip terms,
O(N 2^N) per matvec.  Both symmetries of the model act as index maps:
spatial reflection is bit reversal, global spin flip is bit complement.

Diagonalization works in the symmetry-adapted orbit basis.  Each orbit of a
computational basis state under {1, reflection, flip, both} has two or four
members; the parity-projected combinations over one orbit are exact
simultaneous eigenvectors of both parity operators, so the Hamiltonian is
block diagonal over the four (spatial, spin) sectors and every eigenvector
comes out with exact parity labels.  At B_x = 0 the Hamiltonian is diagonal
in this basis, so the eigenvectors are the two- or four-term localized
combinations themselves.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import ParityLabelError

#: Default ceiling on the chain length; 2^14 is the largest dense problem
#: this module is expected to handle.
MAX_SPINS = 14


@dataclass(frozen=True)
class SpinBasis:
    """Dimension bookkeeping for an N-spin chain."""

    n_spins: int
    max_spins: int = MAX_SPINS

    def __post_init__(self):
        if not 1 <= self.n_spins <= self.max_spins:
            raise ValueError(
                f"n_spins={self.n_spins} outside supported range 1..{self.max_spins}"
            )

    @property
    def dimension(self):
        return 1 << self.n_spins


@lru_cache(maxsize=16)
def sigma_z_table(n_spins):
    """(2^N, N) array of sigma_z eigenvalues (+/-1) per basis state and site."""
    indices = np.arange(1 << n_spins)
    bits = (indices[:, None] >> np.arange(n_spins)[None, :]) & 1
    table = 1.0 - 2.0 * bits
    table.flags.writeable = False
    return table


@lru_cache(maxsize=16)
def _bit_reversal_permutation(n_spins):
    indices = np.arange(1 << n_spins)
    reversed_indices = np.zeros_like(indices)
    for i in range(n_spins):
        reversed_indices |= ((indices >> i) & 1) << (n_spins - 1 - i)
    reversed_indices.flags.writeable = False
    return reversed_indices


@lru_cache(maxsize=16)
def _flip_table(n_spins):
    # Row i holds the index with bit i flipped; one gather per site beats
    # strided reshape views by ~5x at these dimensions.
    indices = np.arange(1 << n_spins)
    table = np.empty((n_spins, 1 << n_spins), dtype=np.intp)
    for i in range(n_spins):
        table[i] = indices ^ (1 << i)
    table.flags.writeable = False
    return table


@dataclass(frozen=True)
class ParityOperator:
    """A permutation involution on basis indices (P^2 = 1)."""

    name: str
    permutation: np.ndarray

    def apply(self, vec):
        return vec[self.permutation]

    def dense(self):
        dim = len(self.permutation)
        matrix = np.zeros((dim, dim))
        matrix[np.arange(dim), self.permutation] = 1.0
        return matrix

    def expectation(self, vec):
        # Real for an involution represented by a symmetric permutation.
        return float(np.real(np.vdot(vec, self.apply(vec))))


def spatial_reflection_operator(basis):
    """Site i -> N+1-i, i.e. bit-order reversal of basis indices."""
    return ParityOperator("spatial_reflection", _bit_reversal_permutation(basis.n_spins))


def spin_parity_operator(basis):
    """Global spin flip prod_i sigma_x_i, i.e. bit complement of indices."""
    dim = 1 << basis.n_spins
    perm = np.arange(dim) ^ (dim - 1)
    perm.flags.writeable = False
    return ParityOperator("spin_parity", perm)


@dataclass(frozen=True)
class IsingHamiltonian:
    """Matrix-free H = diag(zz part) - B_x * (sum of single-bit flips)."""

    diagonal: np.ndarray  # Hz, length 2^N
    b_field: float        # Hz
    basis: SpinBasis
    diag_max: float = None  # cached max |diagonal|

    def __post_init__(self):
        if self.diag_max is None:
            object.__setattr__(self, "diag_max", float(np.max(np.abs(self.diagonal))))

    def with_field(self, b_field):
        """Same couplings, different transverse field; shares the diagonal."""
        return IsingHamiltonian(self.diagonal, float(b_field), self.basis, self.diag_max)

    def norm_bound(self):
        """Cheap upper bound on the spectral norm."""
        return self.diag_max + self.basis.n_spins * abs(self.b_field)

    def apply(self, vec):
        """H @ vec for a vector (2^N,) or a block of columns (2^N, k)."""
        if vec.ndim == 1:
            out = self.diagonal * vec
            if self.b_field != 0.0:
                out -= self.b_field * vec[_flip_table(self.basis.n_spins)].sum(axis=0)
            return out
        # The bit-flip writes below go through C-order reshape views.
        vec = np.ascontiguousarray(vec)
        out = self.diagonal[:, None] * vec
        if self.b_field != 0.0:
            b = self.b_field
            tail = vec.shape[1]
            for i in range(self.basis.n_spins):
                blocks_in = vec.reshape(-1, 2, (1 << i) * tail)
                blocks_out = out.reshape(-1, 2, (1 << i) * tail)
                blocks_out[:, 0, :] -= b * blocks_in[:, 1, :]
                blocks_out[:, 1, :] -= b * blocks_in[:, 0, :]
        return out

    def dense(self):
        dim = self.basis.dimension
        matrix = np.diag(self.diagonal.astype(float))
        if self.b_field != 0.0:
            indices = np.arange(dim)
            for i in range(self.basis.n_spins):
                matrix[indices, indices ^ (1 << i)] -= self.b_field
        return matrix


def build_hamiltonian(couplings, b_field, max_spins=MAX_SPINS):
    """Assemble the Ising diagonal from a coupling matrix. O(N^2 2^N)."""
    j = np.asarray(couplings.values, dtype=float)
    n = j.shape[0]
    if j.shape != (n, n):
        raise ValueError("coupling matrix must be square")
    basis = SpinBasis(n, max_spins)
    z = sigma_z_table(n)
    # J is symmetric with zero diagonal, so the full bilinear form double
    # counts i<j pairs exactly once.
    diagonal = -0.5 * np.einsum("bi,bi->b", z @ j, z)
    diagonal.flags.writeable = False
    return IsingHamiltonian(diagonal, float(b_field), basis)


@dataclass(frozen=True)
class SectorBasis:
    spatial_parity: int
    spin_parity: int
    matrix: scipy.sparse.csc_matrix  # 2^N x (sector dimension)


@lru_cache(maxsize=16)
def symmetry_adapted_basis(n_spins):
    """Orthonormal parity-projected orbit combinations, grouped by sector.

    Deterministic: orbits are visited in order of their smallest member.
    """
    dim = 1 << n_spins
    mask = dim - 1
    reverse = _bit_reversal_permutation(n_spins)
    visited = np.zeros(dim, dtype=bool)
    columns = {(1, 1): [], (1, -1): [], (-1, 1): [], (-1, -1): []}
    inv_sqrt2 = 1.0 / np.sqrt(2.0)
    for b in range(dim):
        if visited[b]:
            continue
        p, x, px = int(reverse[b]), b ^ mask, int(reverse[b]) ^ mask
        members = sorted({b, p, x, px})
        visited[members] = True
        if len(members) == 4:
            for sp in (1, -1):
                for sx in (1, -1):
                    columns[(sp, sx)].append(
                        ([b, p, x, px], [0.5, 0.5 * sp, 0.5 * sx, 0.5 * sp * sx])
                    )
        elif p == b:
            # Reflection-fixed (palindromic) orbit {b, ~b}: spatial parity +1.
            for sx in (1, -1):
                columns[(1, sx)].append(([b, x], [inv_sqrt2, sx * inv_sqrt2]))
        else:
            # Reflection maps onto the complement: combos have equal parities.
            for s in (1, -1):
                columns[(s, s)].append(([b, x], [inv_sqrt2, s * inv_sqrt2]))
    sectors = []
    for sp, sx in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        cols = columns[(sp, sx)]
        data, rows, indptr = [], [], [0]
        for indices, coeffs in cols:
            rows.extend(indices)
            data.extend(coeffs)
            indptr.append(len(rows))
        matrix = scipy.sparse.csc_matrix(
            (np.array(data, dtype=float), np.array(rows, dtype=np.int64),
             np.array(indptr, dtype=np.int64)),
            shape=(dim, len(cols)),
        )
        sectors.append(SectorBasis(sp, sx, matrix))
    return tuple(sectors)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Full spectrum with exact parity labels, energies ascending."""

    energies: np.ndarray          # Hz
    eigenvectors: np.ndarray      # columns, orthonormal
    spatial_parity: np.ndarray    # +/-1 per eigenstate
    spin_parity: np.ndarray       # +/-1 per eigenstate
    basis: SpinBasis

    @property
    def ground_sector(self):
        return (int(self.spatial_parity[0]), int(self.spin_parity[0]))

    def sector_mask(self, spatial, spin):
        return (self.spatial_parity == spatial) & (self.spin_parity == spin)

    @property
    def ground_sector_mask(self):
        return self.sector_mask(*self.ground_sector)


def diagonalize_with_symmetries(h):
    """Simultaneously diagonalize energy, spatial parity, and spin parity.

    The Hamiltonian is projected into the four parity sectors of the orbit
    basis and each block diagonalized separately; parity labels are then
    exact by construction.  Requires a reflection-symmetric coupling
    diagonal, which trap-derived couplings always satisfy.
    """
    basis = h.basis
    n = basis.n_spins
    reverse = _bit_reversal_permutation(n)
    diag_scale = max(float(np.max(np.abs(h.diagonal))), 1e-300)
    asymmetry = float(np.max(np.abs(h.diagonal - h.diagonal[reverse])))
    if asymmetry > 1e-9 * diag_scale:
        raise ParityLabelError(
            "couplings break spatial reflection symmetry "
            f"(diagonal asymmetry {asymmetry:.3e} vs scale {diag_scale:.3e})"
        )
    energy_blocks, vector_blocks, label_blocks = [], [], []
    for sector in symmetry_adapted_basis(n):
        k = sector.matrix.shape[1]
        if k == 0:
            continue
        q_dense = sector.matrix.toarray()
        h_block = sector.matrix.T @ h.apply(q_dense)
        h_block = 0.5 * (h_block + h_block.T)
        block_energies, block_vectors = scipy.linalg.eigh(h_block, check_finite=False)
        energy_blocks.append(block_energies)
        vector_blocks.append(q_dense @ block_vectors)
        label_blocks.append((sector.spatial_parity, sector.spin_parity, k))
    energies = np.concatenate(energy_blocks)
    vectors = np.concatenate(vector_blocks, axis=1)
    spatial = np.concatenate([np.full(k, sp) for sp, _, k in label_blocks])
    spin = np.concatenate([np.full(k, sx) for _, sx, k in label_blocks])
    # Stable sort keeps the sector order (++, +-, -+, --) on exact ties.
    order = np.argsort(energies, kind="stable")
    energies = energies[order]
    vectors = vectors[:, order]
    spatial = spatial[order].astype(int)
    spin = spin[order].astype(int)
    for col in range(vectors.shape[1]):
        pivot = int(np.argmax(np.abs(vectors[:, col])))
        if vectors[pivot, col] < 0:
            vectors[:, col] = -vectors[:, col]
    for arr in (energies, vectors, spatial, spin):
        arr.flags.writeable = False
    return SpectralDecomposition(energies, vectors, spatial, spin, basis)


def sector_populations(state_amplitudes, basis):
    """Population of each (spatial, spin) parity sector of a state."""
    reflect = spatial_reflection_operator(basis)
    flip = spin_parity_operator(basis)
    p_mean = reflect.expectation(state_amplitudes)
    x_mean = flip.expectation(state_amplitudes)
    px_mean = float(
        np.real(np.vdot(state_amplitudes, state_amplitudes[reflect.permutation][flip.permutation]))
    )
    norm2 = float(np.real(np.vdot(state_amplitudes, state_amplitudes)))
    populations = {}
    for sp in (1, -1):
        for sx in (1, -1):
            populations[(sp, sx)] = 0.25 * (
                norm2 + sp * p_mean + sx * x_mean + sp * sx * px_mean
            )
    return populations


def population_outside_sector(state_amplitudes, basis, sector):
    """1 - population inside the given (spatial, spin) sector."""
    populations = sector_populations(state_amplitudes, basis)
    total = sum(populations.values())
    return total - populations[sector]


def basis_orbit(index, n_spins):
    """The orbit of a basis index under reflection and spin flip (2 or 4 states)."""
    mask = (1 << n_spins) - 1
    reverse = _bit_reversal_permutation(n_spins)
    p = int(reverse[index])
    return tuple(sorted({index, p, index ^ mask, p ^ mask}))


def orbit_size_labels(spectrum):
    """Size (2 or 4) of the localized-state orbit hosting each eigenvector.

    An eigenvector is assigned the orbit of its largest-amplitude basis
    state; at B_x = 0 this is the exact support of the eigenvector.
    """
    n = spectrum.basis.n_spins
    dominant = np.argmax(np.abs(spectrum.eigenvectors), axis=0)
    return np.array([len(basis_orbit(int(b), n)) for b in dominant])


def spectrum_to_csv(spectrum, path, probabilities=None, provenance=""):
    """Write (n, energy_hz, spatial_parity, spin_parity[, p_n]) rows."""
    header = "n,energy_hz,spatial_parity,spin_parity"
    if probabilities is not None:
        header += ",p_n"
    lines = [
        f"# provenance: schema=spectrum/v1 n_spins={spectrum.basis.n_spins}"
        + (f" {provenance}" if provenance else ""),
        header,
    ]
    for i, energy in enumerate(spectrum.energies):
        row = (
            f"{i},{format(float(energy), '.17g')},"
            f"{int(spectrum.spatial_parity[i])},{int(spectrum.spin_parity[i])}"
        )
        if probabilities is not None:
            row += f",{format(float(probabilities[i]), '.17g')}"
        lines.append(row)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")
