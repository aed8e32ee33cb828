"""Measurements on pure states and on sector-block density matrices.

Every function accepts either a state-like object (attributes ``basis`` and
``amplitudes``) or a blocks-like object (attributes ``bases`` and ``blocks``,
dictionaries keyed by particle number).  Pure states are treated as
conditional states: expectations are divided by the squared norm.  Block
density matrices are used as-is, their total trace carrying the meaning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .lattice import BasisTower, LatticeParams


def _is_state(obj) -> bool:
    return hasattr(obj, "amplitudes")


def _state_weight(state) -> float:
    return float(np.vdot(state.amplitudes, state.amplitudes).real)


def total_number(obj) -> float:
    """Expectation of the total particle number."""
    if _is_state(obj):
        occ = obj.basis.occupations
        w = np.abs(obj.amplitudes) ** 2
        return float((w * occ.sum(axis=1)).sum() / w.sum())
    out = 0.0
    for n, rho in obj.blocks.items():
        out += n * float(np.trace(rho).real)
    return out


def density(obj) -> np.ndarray:
    """Per-site occupation <n_j>."""
    if _is_state(obj):
        occ = obj.basis.occupations
        w = np.abs(obj.amplitudes) ** 2
        return (w @ occ) / w.sum()
    some = next(iter(obj.bases.values()))
    out = np.zeros(some.m_sites)
    for n, rho in obj.blocks.items():
        occ = obj.bases[n].occupations
        out += np.real(np.diagonal(rho)) @ occ
    return out


def one_body_density_matrix(obj, tower: BasisTower | None = None) -> np.ndarray:
    """Hermitian positive matrix <b_i^dag b_j>, trace = <N>."""
    if _is_state(obj):
        basis = obj.basis
        m = basis.m_sites
        if basis.n_total == 0:
            return np.zeros((m, m), dtype=complex)
        tower = tower or BasisTower(m)
        tower.adopt(basis)
        cols = [tower.lower(basis.n_total, j) @ obj.amplitudes
                for j in range(m)]
        v = np.column_stack(cols)
        return v.conj().T @ v / _state_weight(obj)
    some = next(iter(obj.bases.values()))
    m = some.m_sites
    tower = tower or BasisTower(m)
    out = np.zeros((m, m), dtype=complex)
    for n, rho in obj.blocks.items():
        if n == 0:
            continue
        tower.adopt(obj.bases[n])
        lowers = [tower.lower(n, j) for j in range(m)]
        xs = [lo @ rho for lo in lowers]  # b_j rho
        for i in range(m):
            li = lowers[i].toarray()
            for j in range(m):
                # <b_i^dag b_j> = tr(b_j rho b_i^dag)
                out[i, j] += np.sum(xs[j] * li.conj())
    return out


def pair_correlation(obj, tower: BasisTower | None = None,
                     density_floor: float = 1e-12
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Pair density and its normalized form.

    Returns ``(G2, g2)`` where ``G2[i, j] = <b_i^dag b_j^dag b_j b_i>`` and
    ``g2 = G2 / (<n_i><n_j>)``.  Entries where either density is at or below
    ``density_floor`` are marked NaN in ``g2`` (undefined, not zero).
    """
    if _is_state(obj):
        basis = obj.basis
        m = basis.m_sites
        g2n = np.zeros((m, m))
        if basis.n_total >= 2:
            tower = tower or BasisTower(m)
            tower.adopt(basis)
            n = basis.n_total
            for i in range(m):
                u = tower.lower(n, i) @ obj.amplitudes
                for j in range(i, m):
                    w = tower.lower(n - 1, j) @ u
                    g2n[i, j] = g2n[j, i] = np.vdot(w, w).real
            g2n /= _state_weight(obj)
        dens = density(obj)
    else:
        some = next(iter(obj.bases.values()))
        m = some.m_sites
        tower = tower or BasisTower(m)
        g2n = np.zeros((m, m))
        for n, rho in obj.blocks.items():
            if n < 2:
                continue
            tower.adopt(obj.bases[n])
            lowers2 = [tower.lower(n - 1, j).toarray() for j in range(m)]
            for i in range(m):
                li = tower.lower(n, i)
                y = li @ rho @ li.conj().T
                for j in range(i, m):
                    lj = lowers2[j]
                    val = np.sum((lj @ y) * lj.conj()).real
                    g2n[i, j] += val
                    if j != i:
                        g2n[j, i] += val
        dens = density(obj)
    denom = np.outer(dens, dens)
    defined = np.outer(dens > density_floor, dens > density_floor)
    g2 = np.where(defined, g2n / np.where(defined, denom, 1.0), np.nan)
    return g2n, g2


class ModeOccupations(NamedTuple):
    """Occupations of the natural single-particle modes."""

    wavenumbers: np.ndarray   # 1/m
    occupations: np.ndarray   # real, sums to <N>


def momentum_distribution(obdm: np.ndarray,
                          lp: LatticeParams) -> ModeOccupations:
    """Project the one-body density matrix on the free lattice modes.

    Rings use plane waves exp(i k z_j)/sqrt(M) with k = 2 pi q/(M a); open
    chains use the hard-wall sine modes sin(q pi j/(M+1)), q = 1..M, reported
    at k = q pi / L.  Occupations sum to the trace of the input.
    """
    m = lp.m_sites
    if obdm.shape != (m, m):
        raise ValueError("one-body density matrix has the wrong shape")
    if lp.boundary == "periodic":
        q = np.arange(m)
        k = 2.0 * np.pi * q / (m * lp.spacing)
        j = np.arange(m)
        modes = np.exp(1j * np.outer(j, k) * lp.spacing) / np.sqrt(m)
    else:
        q = np.arange(1, m + 1)
        k = q * np.pi / lp.length
        j = np.arange(1, m + 1)
        modes = np.sqrt(2.0 / (m + 1)) * np.sin(
            np.pi * np.outer(j, q) / (m + 1)).astype(complex)
    occ = np.einsum("jq,jk,kq->q", modes.conj(), obdm, modes).real
    return ModeOccupations(wavenumbers=k, occupations=occ)


class FriedelSpectrum(NamedTuple):
    frequencies: np.ndarray    # in cycles per system length
    amplitudes: np.ndarray
    dominant_frequency: float
    dominant_amplitude: float


def friedel_spectrum(profile: np.ndarray, lp: LatticeParams,
                     detrend_order: int = 2) -> FriedelSpectrum:
    """Oscillation content of a density profile.

    Removes a low-order polynomial background, projects the residual on
    harmonics exp(-2 pi i m z / L) of the system length, and reports the
    dominant harmonic (m in cycles per length L).
    """
    profile = np.asarray(profile, dtype=float)
    m_sites = lp.m_sites
    if profile.shape != (m_sites,):
        raise ValueError("profile must have one value per site")
    z = lp.site_positions / lp.length
    coeff = np.polynomial.polynomial.polyfit(z, profile, detrend_order)
    resid = profile - np.polynomial.polynomial.polyval(z, coeff)
    ms = np.arange(1, m_sites // 2 + 1)
    phases = np.exp(-2j * np.pi * np.outer(ms, z))
    amps = np.abs(phases @ resid) * 2.0 / m_sites
    if len(ms) == 0:
        return FriedelSpectrum(ms.astype(float), amps, 0.0, 0.0)
    best = int(np.argmax(amps))
    return FriedelSpectrum(frequencies=ms.astype(float), amplitudes=amps,
                           dominant_frequency=float(ms[best]),
                           dominant_amplitude=float(amps[best]))


class DecayCheck(NamedTuple):
    """Finite-difference test of the two-body decay-rate identity."""

    times: np.ndarray          # midpoints where the residual is evaluated
    lhs: np.ndarray            # d<n_j>/dt, centered differences (T-2, M)
    rhs: np.ndarray            # -2 kappa2 g2(j,j) <n_j>^2 at the midpoints
    residual: np.ndarray       # |lhs - rhs| / scale
    max_residual: float


def decay_rate_check(times: np.ndarray, site_density: np.ndarray,
                     g2_diag: np.ndarray, lp: LatticeParams) -> DecayCheck:
    """Check d<n_j>/dt = -2 kappa2 g2(j,j) <n_j>^2 by centered differences.

    ``site_density`` and ``g2_diag`` are (T, M) arrays sampled on ``times``
    (uniform grid).  The residual is scaled by the largest |rhs| so it reads
    as a relative error; it shrinks as O(dt^2) for exact dynamics.
    """
    times = np.asarray(times, dtype=float)
    dens = np.asarray(site_density, dtype=float)
    g2 = np.asarray(g2_diag, dtype=float)
    if len(times) < 3:
        raise ValueError("need at least three samples")
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0.0):
        raise ValueError("time grid must be uniform")
    lhs = (dens[2:] - dens[:-2]) / (2.0 * dt[0])
    rhs = -2.0 * lp.kappa2 * g2[1:-1] * dens[1:-1] ** 2
    scale = np.max(np.abs(rhs))
    if scale == 0.0:
        scale = 1.0
    res = np.abs(lhs - rhs) / scale
    return DecayCheck(times=times[1:-1], lhs=lhs, rhs=rhs, residual=res,
                      max_residual=float(res.max()))


@dataclass
class ObservableReport:
    """Bundle of standard measurements for one state."""

    total_number: float
    density: np.ndarray
    g2_numerator: np.ndarray
    g2: np.ndarray
    obdm: np.ndarray
    modes: ModeOccupations
    friedel: FriedelSpectrum


def report(obj, lp: LatticeParams,
           tower: BasisTower | None = None) -> ObservableReport:
    """Compute the full observable bundle for a state or block set."""
    tower = tower or BasisTower(lp.m_sites)
    dens = density(obj)
    g2n, g2 = pair_correlation(obj, tower)
    obdm = one_body_density_matrix(obj, tower)
    modes = momentum_distribution(obdm, lp)
    fried = friedel_spectrum(dens, lp)
    return ObservableReport(total_number=total_number(obj), density=dens,
                            g2_numerator=g2n, g2=g2, obdm=obdm, modes=modes,
                            friedel=fried)
