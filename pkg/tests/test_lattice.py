"""Discretization, Fock bases, sparse operators, jump channels."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from polgas import (HBAR, LatticeParams, build_basis, build_hermitian_hamiltonian,
                    build_jump_operators, derive, effective_hamiltonian,
                    lowering_map, single_particle_hamiltonian, to_lattice)
from polgas.lattice import BasisTower, FockBasis, lattice_cutoff_bound
from conftest import draw_physical


def ring(m, n, **kw):
    return LatticeParams.dimensionless(m_sites=m, n_max=n,
                                       boundary="periodic", **kw)


def chain(m, n, **kw):
    return LatticeParams.dimensionless(m_sites=m, n_max=n, boundary="open",
                                       **kw)


# ---------------------------------------------------------------------------
# parameters and geometry

def test_dimensionless_constructor():
    lp = ring(4, 2, u_re=1.5, kappa2=0.7)
    assert lp.u == pytest.approx(1.5 - 0.7j)
    assert lp.kappa2 == pytest.approx(0.7)
    with pytest.raises(ValueError):
        ring(4, 2, kappa2=-1.0)
    with pytest.raises(ValueError):
        LatticeParams(m_sites=4, n_max=2, hop=1.0, u=1.0 + 0.5j)


def test_geometry_bookkeeping():
    lp = chain(5, 2)
    assert lp.n_spacings == 6
    assert lp.length == pytest.approx(6.0)
    np.testing.assert_allclose(lp.site_positions, np.arange(1, 6))
    assert lp.bonds() == [(0, 1), (1, 2), (2, 3), (3, 4)]

    rp = ring(5, 2)
    assert rp.n_spacings == 5
    np.testing.assert_allclose(rp.site_positions, np.arange(5))
    assert rp.bonds()[-1] == (4, 0)

    # no self-bond on a one-site ring
    assert ring(1, 2).bonds() == []


def test_g_param_identity():
    lp = ring(8, 2, hop=1.3, u_re=0.9, kappa2=0.4)
    g = lp.u * 8 / (2 * 1.3 * 2)
    assert lp.g_param == pytest.approx(g, rel=1e-15)
    lc = chain(8, 2, hop=1.3, u_re=0.9)
    assert lc.g_param == pytest.approx(lc.u * 9 / (2 * 1.3 * 2), rel=1e-15)


def test_to_lattice_matches_continuum(rng):
    for boundary in ("open", "periodic"):
        p = draw_physical(rng)
        d = derive(p)
        m = 12
        lp = to_lattice(d, m, boundary)
        n_spac = m if boundary == "periodic" else m + 1
        a = p.length / n_spac
        assert lp.spacing == pytest.approx(a, rel=1e-15)
        assert lp.hop == pytest.approx(HBAR / (2 * d.mass_eff * a * a),
                                       rel=1e-12)
        assert lp.u == pytest.approx(d.g_tilde / (HBAR * a), rel=1e-12)
        assert lp.kappa1 == pytest.approx(d.kappa1, rel=1e-15)
        assert lp.kappa_d == pytest.approx(d.kappa_d, rel=1e-15)
        # the dimensionless interaction parameter survives discretization
        assert lp.g_param == pytest.approx(d.g_complex, rel=1e-12)
        assert lattice_cutoff_bound(d, lp) > 0


def test_to_lattice_rejects_negative_mass(rng):
    p = draw_physical(rng, delta=3e8)   # positive detuning: inverted band
    with pytest.raises(ValueError, match="mass"):
        to_lattice(derive(p), 8)


# ---------------------------------------------------------------------------
# Fock bases

def test_basis_enumeration():
    b = build_basis(3, 3)
    assert b.dim == math.comb(3 + 3 - 1, 3) == 10
    np.testing.assert_array_equal(b.occupations[0], [3, 0, 0])
    np.testing.assert_array_equal(b.occupations[-1], [0, 0, 3])
    # strictly descending lexicographic order
    rows = [tuple(r) for r in b.occupations]
    assert rows == sorted(rows, reverse=True)
    # index round trip
    for i, occ in enumerate(b.occupations):
        assert b.index_of(occ) == i
    # every row sums to the sector number
    assert (b.occupations.sum(axis=1) == 3).all()


def test_basis_dims_sweep(rng):
    for _ in range(10):
        m = int(rng.integers(1, 7))
        n = int(rng.integers(0, 5))
        assert build_basis(m, n).dim == math.comb(n + m - 1, n)


def test_basis_dimension_cap():
    with pytest.raises(ValueError, match="cap"):
        build_basis(50, 10)


def test_tower_reuse():
    tower = BasisTower(4)
    b2 = tower.basis(2)
    assert tower.basis(2) is b2
    ext = FockBasis.build(4, 3)
    tower.adopt(ext)
    assert tower.basis(3) is ext
    low = tower.lower(2, 1)
    assert tower.lower(2, 1) is low


# ---------------------------------------------------------------------------
# operators

def test_lowering_map_amplitudes():
    src = build_basis(2, 2)
    dst = build_basis(2, 1)
    b0 = lowering_map(src, dst, 0)
    # <1,0| b_0 |2,0> = sqrt(2) ; <0,1| b_0 |1,1> = 1
    assert b0[dst.index_of([1, 0]), src.index_of([2, 0])] == pytest.approx(
        math.sqrt(2))
    assert b0[dst.index_of([0, 1]), src.index_of([1, 1])] == pytest.approx(1.0)
    # number operator from the map itself
    num = (b0.conj().T @ b0).diagonal().real
    np.testing.assert_allclose(num, src.occupations[:, 0])


def test_single_particle_spectrum():
    # two open sites: eigenvalues J and 3J around the 2J offset
    lp = chain(2, 1, hop=1.0)
    w = np.linalg.eigvalsh(single_particle_hamiltonian(lp))
    np.testing.assert_allclose(w, [1.0, 3.0], atol=1e-12)
    # ring dispersion 2J(1 - cos k)
    m = 7
    lr = ring(m, 1, hop=0.8)
    w = np.sort(np.linalg.eigvalsh(single_particle_hamiltonian(lr)))
    k = 2 * np.pi * np.arange(m) / m
    np.testing.assert_allclose(w, np.sort(2 * 0.8 * (1 - np.cos(k))),
                               atol=1e-12)


def test_hermitian_hamiltonian_manual():
    # M=2 open, n=2, basis order (2,0), (1,1), (0,2)
    lp = chain(2, 2, hop=1.0, u_re=0.6)
    b = build_basis(2, 2)
    h = build_hermitian_hamiltonian(lp, b)
    assert h.check_hermitian()
    expected = np.array([
        [4.0 + 0.6, -math.sqrt(2), 0.0],
        [-math.sqrt(2), 4.0, -math.sqrt(2)],
        [0.0, -math.sqrt(2), 4.0 + 0.6],
    ])
    np.testing.assert_allclose(h.matrix.toarray().real, expected, atol=1e-12)
    np.testing.assert_allclose(h.matrix.toarray().imag, 0.0, atol=1e-15)


def test_single_particle_sector_matches_dense():
    lp = ring(6, 1, hop=1.1)
    b = build_basis(6, 1)
    h = build_hermitian_hamiltonian(lp, b).matrix.toarray().real
    # descending-lex n=1 basis indexes sites in order, so the matrices
    # agree elementwise, not just spectrally
    np.testing.assert_allclose(h, single_particle_hamiltonian(lp),
                               atol=1e-12)


def test_jump_channel_order_and_rates():
    lp = LatticeParams(m_sites=3, n_max=2, hop=1.0, u=-0.5j, kappa1=0.2,
                       kappa_d=0.3, spacing=0.5, boundary="open")
    b = build_basis(3, 2)
    chans = build_jump_operators(lp, b)
    kinds = [c.kind for c in chans]
    assert kinds == (["one_body"] * 3 + ["derivative"] * 2 + ["two_body"] * 3)
    assert [c.rate for c in chans] == [0.2] * 3 + [0.3] * 2 + [0.5] * 3
    assert [c.dn for c in chans] == [1] * 5 + [2] * 3
    # zero-rate channels are dropped entirely
    lp0 = ring(3, 2)
    assert build_jump_operators(lp0, b) == []


def test_derivative_channel_stencil():
    # (b_{j+1} - b_j)/a acting on a single particle
    a = 0.25
    lp = LatticeParams(m_sites=2, n_max=1, hop=1.0, kappa_d=1.0, spacing=a,
                       boundary="open")
    b1 = build_basis(2, 1)
    chans = build_jump_operators(lp, b1)
    assert len(chans) == 1 and chans[0].kind == "derivative"
    op = chans[0].op.toarray()
    b0v = np.zeros(b1.dim, dtype=complex)
    b0v[b1.index_of([1, 0])] = 1.0
    out = op @ b0v
    # |1,0> -> -(1/a)|vac>, |0,1> -> +(1/a)|vac>
    assert out[0] == pytest.approx(-1.0 / a)
    b1v = np.zeros(b1.dim, dtype=complex)
    b1v[b1.index_of([0, 1])] = 1.0
    assert (op @ b1v)[0] == pytest.approx(1.0 / a)


def test_effective_hamiltonian_factor_audit():
    # reassemble H_eff from raw lowering maps and compare elementwise
    lp = LatticeParams(m_sites=3, n_max=2, hop=0.9, u=0.4 - 0.6j, kappa1=0.15,
                       kappa_d=0.35, spacing=0.5, boundary="periodic")
    b2 = build_basis(3, 2)
    b1 = build_basis(3, 1)
    b0 = build_basis(3, 0)
    heff = effective_hamiltonian(lp, b2).matrix.toarray()

    lowers = [lowering_map(b2, b1, j) for j in range(3)]
    lowers_mid = [lowering_map(b1, b0, j) for j in range(3)]
    anti = sp.csr_matrix((b2.dim, b2.dim), dtype=complex)
    for j in range(3):
        anti = anti + lp.kappa1 * (lowers[j].conj().T @ lowers[j])
    for (j, k) in lp.bonds():
        d = (lowers[k] - lowers[j]) / lp.spacing
        anti = anti + lp.kappa_d * (d.conj().T @ d)
    for j in range(3):
        two = lowers_mid[j] @ lowers[j]
        anti = anti + lp.kappa2 * (two.conj().T @ two)
    expected = (build_hermitian_hamiltonian(lp, b2).matrix
                - 0.5j * anti).toarray()
    np.testing.assert_allclose(heff, expected, atol=1e-13)


def test_effective_hamiltonian_antihermitian_part_is_negative():
    lp = ring(4, 2, kappa2=0.8, kappa1=0.1)
    b = build_basis(4, 2)
    h = effective_hamiltonian(lp, b).matrix.toarray()
    gamma = 1j * (h - h.conj().T)   # = sum_k rate_k c_k^dag c_k, hermitian
    w = np.linalg.eigvalsh(gamma)
    assert w.min() >= -1e-13   # positive semidefinite: pure decay, no gain
    assert w.max() > 0.1       # and actually lossy
