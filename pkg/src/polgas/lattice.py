"""Number-conserving Fock bases and sparse operators for the discretized gas.

The continuum field on a segment of length L becomes M bosonic sites with
spacing ``a``: hopping J = hbar/(2 m a^2) (angular-frequency units), on-site
complex coupling U = g_tilde/(hbar a), per-site two-body loss
kappa2 = -Im U, per-site linear loss kappa1 and a per-bond derivative loss
kappa_d with jump operator (b_{j+1} - b_j)/a.  Open chains place hard walls
one spacing beyond the end sites (a = L/(M+1)), which keeps the uniform 2J
on-site stencil and restores the continuum box spectrum at second order in
1/M; rings use a = L/M.

Losses only remove particles, so everything is organized in fixed-number
sectors; density matrices stay block diagonal across them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .params import DerivedParams, HBAR

MAX_SECTOR_DIM = 200_000

_BOUNDARIES = ("open", "periodic")


@dataclass(frozen=True)
class LatticeParams:
    """Discretized model: geometry, couplings and loss rates.

    ``hop`` and ``u`` are angular frequencies (rad/s); ``spacing`` is in
    meters and defaults to 1 for dimensionless work.  ``u.imag`` must be
    non-positive; the per-site two-body loss rate is ``kappa2 = -u.imag``.
    """

    m_sites: int
    n_max: int
    hop: float
    u: complex = 0.0
    kappa1: float = 0.0
    kappa_d: float = 0.0
    spacing: float = 1.0
    boundary: str = "open"

    def __post_init__(self):
        if self.m_sites < 1:
            raise ValueError("m_sites must be >= 1")
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")
        if self.boundary not in _BOUNDARIES:
            raise ValueError(f"boundary must be one of {_BOUNDARIES}")
        if self.hop < 0:
            raise ValueError("hop must be non-negative")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.kappa1 < 0 or self.kappa_d < 0:
            raise ValueError("loss rates must be non-negative")
        u = complex(self.u)
        if u.imag > 0:
            raise ValueError("u.imag must be <= 0 (two-body loss, not gain)")
        object.__setattr__(self, "u", u)

    @classmethod
    def dimensionless(cls, m_sites: int, n_max: int, hop: float = 1.0,
                      u_re: float = 0.0, kappa2: float = 0.0,
                      kappa1: float = 0.0, kappa_d: float = 0.0,
                      boundary: str = "periodic") -> "LatticeParams":
        """Build directly from dimensionless couplings (spacing = 1)."""
        if kappa2 < 0:
            raise ValueError("kappa2 must be non-negative")
        return cls(m_sites=m_sites, n_max=n_max, hop=hop,
                   u=complex(u_re, -kappa2), kappa1=kappa1, kappa_d=kappa_d,
                   spacing=1.0, boundary=boundary)

    @property
    def kappa2(self) -> float:
        """Per-site two-body loss rate, -Im(u)."""
        return -self.u.imag

    @property
    def n_spacings(self) -> int:
        """Number of lattice spacings spanned by the physical length."""
        return self.m_sites if self.boundary == "periodic" else self.m_sites + 1

    @property
    def length(self) -> float:
        return self.spacing * self.n_spacings

    @property
    def g_param(self) -> complex:
        """Dimensionless interaction parameter U*(L/a)/(2 J n_max)."""
        return self.u * self.n_spacings / (2.0 * self.hop * self.n_max)

    @property
    def site_positions(self) -> np.ndarray:
        """Site coordinates in meters (walls at 0 and L for open chains)."""
        if self.boundary == "periodic":
            return self.spacing * np.arange(self.m_sites)
        return self.spacing * np.arange(1, self.m_sites + 1)

    def bonds(self) -> list[tuple[int, int]]:
        pairs = [(j, j + 1) for j in range(self.m_sites - 1)]
        if self.boundary == "periodic" and self.m_sites > 1:
            pairs.append((self.m_sites - 1, 0))
        return pairs


def to_lattice(d: DerivedParams, m_sites: int,
               boundary: str = "open") -> LatticeParams:
    """Discretize the effective continuum model onto ``m_sites`` sites.

    Requires a positive effective mass; for the convention used here that
    means ``delta < 0``.  The exact identity
    ``g_complex = u * (L/a) / (2 hop n_photons)`` holds by construction.
    """
    if boundary not in _BOUNDARIES:
        raise ValueError(f"boundary must be one of {_BOUNDARIES}")
    if d.mass_eff <= 0:
        raise ValueError(
            "effective mass is not positive (delta >= 0); flip the sign of "
            "delta to get a normal quadratic band")
    n_spac = m_sites if boundary == "periodic" else m_sites + 1
    a = d.physical.length / n_spac
    hop = HBAR / (2.0 * d.mass_eff * a * a)
    u = d.g_tilde / (HBAR * a)
    return LatticeParams(
        m_sites=m_sites,
        n_max=d.physical.n_photons,
        hop=hop,
        u=u,
        kappa1=d.kappa1,
        kappa_d=d.kappa_d,
        spacing=a,
        boundary=boundary,
    )


def lattice_cutoff_bound(d: DerivedParams, lp: LatticeParams) -> float:
    """Validity horizon evaluated at the lattice cutoff pi/a (seconds)."""
    from .params import max_evolution_time
    return max_evolution_time(d.physical, k_max=math.pi / lp.spacing)


class FockBasis:
    """Deterministically ordered occupation basis of one number sector.

    States are enumerated in descending lexicographic order of the
    occupation vector: (n,0,...,0), (n-1,1,0,...), ..., (0,...,0,n).
    """

    def __init__(self, m_sites: int, n_total: int,
                 occupations: np.ndarray):
        self.m_sites = m_sites
        self.n_total = n_total
        self.occupations = occupations
        self._index = {occupations[i].tobytes(): i
                       for i in range(occupations.shape[0])}

    @classmethod
    def build(cls, m_sites: int, n_total: int,
              max_dim: int = MAX_SECTOR_DIM) -> "FockBasis":
        if m_sites < 1 or n_total < 0:
            raise ValueError("need m_sites >= 1 and n_total >= 0")
        dim = math.comb(n_total + m_sites - 1, n_total)
        if dim > max_dim:
            raise ValueError(
                f"sector dimension {dim} exceeds the cap {max_dim}; reduce "
                "the particle number or the lattice size")
        occ = np.zeros((dim, m_sites), dtype=np.int16)
        state = np.zeros(m_sites, dtype=np.int16)
        state[0] = n_total
        for row in range(dim):
            occ[row] = state
            # successor in descending lexicographic order
            nz = np.nonzero(state[:-1])[0] if m_sites > 1 else []
            if len(nz) == 0:
                break
            k = nz[-1]
            carry = int(state[k + 1:].sum()) + 1
            state[k] -= 1
            state[k + 1:] = 0
            state[k + 1] = carry
        return cls(m_sites, n_total, occ)

    @property
    def dim(self) -> int:
        return self.occupations.shape[0]

    def index_of(self, occ) -> int:
        key = np.asarray(occ, dtype=np.int16).tobytes()
        return self._index[key]

    def __repr__(self):
        return (f"FockBasis(m_sites={self.m_sites}, n_total={self.n_total}, "
                f"dim={self.dim})")


def build_basis(m_sites: int, n_total: int,
                max_dim: int = MAX_SECTOR_DIM) -> FockBasis:
    """Convenience wrapper around :meth:`FockBasis.build`."""
    return FockBasis.build(m_sites, n_total, max_dim)


@dataclass
class SectorOperator:
    """Sparse operator with number-sector bookkeeping."""

    matrix: sp.csr_matrix
    n_from: int
    n_to: int
    hermitian: bool = False

    def check_hermitian(self, tol: float = 1e-12) -> bool:
        if self.n_from != self.n_to:
            return False
        diff = (self.matrix - self.matrix.conj().T)
        scale = max(1.0, abs(self.matrix).max())
        return abs(diff).max() <= tol * scale


def lowering_map(src: FockBasis, dst: FockBasis, site: int) -> sp.csr_matrix:
    """Matrix of the annihilation operator b_site from sector n to n-1."""
    if dst.n_total != src.n_total - 1 or dst.m_sites != src.m_sites:
        raise ValueError("dst must be the same lattice with one particle fewer")
    if not (0 <= site < src.m_sites):
        raise ValueError("site out of range")
    occ = src.occupations
    rows_src = np.nonzero(occ[:, site] > 0)[0]
    data = np.sqrt(occ[rows_src, site].astype(float))
    targets = occ[rows_src].copy()
    targets[:, site] -= 1
    rows_dst = np.fromiter(
        (dst._index[targets[i].tobytes()] for i in range(targets.shape[0])),
        dtype=np.int64, count=targets.shape[0])
    return sp.csr_matrix((data, (rows_dst, rows_src)),
                         shape=(dst.dim, src.dim), dtype=np.complex128)


def build_hermitian_hamiltonian(lp: LatticeParams,
                                basis: FockBasis) -> SectorOperator:
    """Hopping + on-site interaction (real part of U) in one sector.

    H = sum_bonds [-J (b_j^dag b_k + h.c.)] + 2J sum_j n_j
        + (Re U / 2) sum_j n_j (n_j - 1)
    """
    if basis.m_sites != lp.m_sites:
        raise ValueError("basis does not match the lattice size")
    occ = basis.occupations
    dim = basis.dim
    diag = (2.0 * lp.hop * occ.sum(axis=1)
            + 0.5 * lp.u.real * (occ * (occ - 1)).sum(axis=1))
    rows, cols, vals = [], [], []
    for (j, k) in lp.bonds():
        src = np.nonzero(occ[:, k] > 0)[0]
        if len(src) == 0:
            continue
        amp = np.sqrt(occ[src, k].astype(float)
                      * (occ[src, j] + 1.0))
        tgt = occ[src].copy()
        tgt[:, k] -= 1
        tgt[:, j] += 1
        dst = np.fromiter(
            (basis._index[tgt[i].tobytes()] for i in range(tgt.shape[0])),
            dtype=np.int64, count=tgt.shape[0])
        rows.extend(dst)
        cols.extend(src)
        vals.extend(-lp.hop * amp)
    hopm = sp.csr_matrix((vals, (rows, cols)), shape=(dim, dim),
                         dtype=np.complex128)
    h = hopm + hopm.conj().T + sp.diags(diag.astype(np.complex128))
    return SectorOperator(matrix=h.tocsr(), n_from=basis.n_total,
                          n_to=basis.n_total, hermitian=True)


class JumpChannel(NamedTuple):
    """One Lindblad channel: jump operator, rate and bookkeeping."""

    op: sp.csr_matrix      # maps sector n -> n - dn
    rate: float
    kind: str              # "one_body" | "derivative" | "two_body"
    location: int          # site index, or bond index for "derivative"
    dn: int


def build_jump_operators(lp: LatticeParams, basis: FockBasis,
                         targets: dict[int, FockBasis] | None = None
                         ) -> list[JumpChannel]:
    """All loss channels acting on one sector, in a fixed deterministic order.

    Order: one-body sites 0..M-1, derivative bonds in ``lp.bonds()`` order,
    two-body sites 0..M-1.  Channels with zero rate are omitted.  ``targets``
    may supply pre-built lower sectors (keyed by particle number); missing
    ones are built on the fly.
    """
    n = basis.n_total
    targets = dict(targets or {})

    def sector(k: int) -> FockBasis:
        if k not in targets:
            targets[k] = FockBasis.build(basis.m_sites, k)
        return targets[k]

    channels: list[JumpChannel] = []
    if n >= 1 and (lp.kappa1 > 0 or lp.kappa_d > 0):
        below = sector(n - 1)
        lowers = [lowering_map(basis, below, j) for j in range(lp.m_sites)]
        if lp.kappa1 > 0:
            for j in range(lp.m_sites):
                channels.append(JumpChannel(op=lowers[j], rate=lp.kappa1,
                                            kind="one_body", location=j, dn=1))
        if lp.kappa_d > 0:
            for bidx, (j, k) in enumerate(lp.bonds()):
                op = ((lowers[k] - lowers[j]) / lp.spacing).tocsr()
                channels.append(JumpChannel(op=op, rate=lp.kappa_d,
                                            kind="derivative", location=bidx,
                                            dn=1))
    if n >= 2 and lp.kappa2 > 0:
        mid = sector(n - 1)
        below2 = sector(n - 2)
        for j in range(lp.m_sites):
            op = (lowering_map(mid, below2, j)
                  @ lowering_map(basis, mid, j)).tocsr()
            channels.append(JumpChannel(op=op, rate=lp.kappa2,
                                        kind="two_body", location=j, dn=2))
    return channels


def effective_hamiltonian(lp: LatticeParams, basis: FockBasis,
                          channels: list[JumpChannel] | None = None
                          ) -> SectorOperator:
    """Non-hermitian generator H_herm - (i/2) sum_channels rate c^dag c.

    The anti-hermitian part is assembled from the jump operators themselves,
    so rates and stencils cannot drift out of sync with the channel list.
    """
    h = build_hermitian_hamiltonian(lp, basis).matrix.copy()
    if channels is None:
        channels = build_jump_operators(lp, basis)
    for ch in channels:
        h = h - 0.5j * ch.rate * (ch.op.conj().T @ ch.op)
    return SectorOperator(matrix=h.tocsr(), n_from=basis.n_total,
                          n_to=basis.n_total, hermitian=False)


class BasisTower:
    """Cache of Fock bases and lowering maps across number sectors."""

    def __init__(self, m_sites: int, max_dim: int = MAX_SECTOR_DIM):
        self.m_sites = m_sites
        self.max_dim = max_dim
        self._bases: dict[int, FockBasis] = {}
        self._lowers: dict[tuple[int, int], sp.csr_matrix] = {}

    def basis(self, n: int) -> FockBasis:
        if n not in self._bases:
            self._bases[n] = FockBasis.build(self.m_sites, n, self.max_dim)
        return self._bases[n]

    def adopt(self, basis: FockBasis) -> None:
        """Register an externally built basis so it is reused, not rebuilt."""
        self._bases.setdefault(basis.n_total, basis)

    def lower(self, n: int, site: int) -> sp.csr_matrix:
        """Annihilation operator b_site from sector n to n-1."""
        key = (n, site)
        if key not in self._lowers:
            self._lowers[key] = lowering_map(self.basis(n),
                                             self.basis(n - 1), site)
        return self._lowers[key]


def single_particle_hamiltonian(lp: LatticeParams) -> np.ndarray:
    """Dense one-particle hopping matrix (M x M), kinetic part only."""
    m = lp.m_sites
    h = 2.0 * lp.hop * np.eye(m)
    for (j, k) in lp.bonds():
        h[j, k] -= lp.hop
        h[k, j] -= lp.hop
    return h
