"""Eigenproblems, conditional evolution, trajectories, master equation,
relaxation, ramps."""

import math

import numpy as np
import pytest

from polgas import (DensityBlocks, LatticeParams, RampSchedule, SectorCache,
                    StateVector, adiabatic_ramp, build_basis, condensate_state,
                    density, derive, dissipative_relax, ensemble_average,
                    evolve_nojump, ground_state, loss_spectrum,
                    lowest_loss_state, master_evolve, mcwf_trajectory,
                    pair_correlation, single_particle_hamiltonian, to_lattice)
from conftest import draw_physical


def ring(m, n, **kw):
    return LatticeParams.dimensionless(m_sites=m, n_max=n,
                                       boundary="periodic", **kw)


# ---------------------------------------------------------------------------
# eigenproblems

def test_ground_state_dense_vs_iterative():
    lp = ring(6, 2, u_re=3.0)
    dense = ground_state(lp)
    sparse = ground_state(lp, dense_cutoff=1)
    assert dense.energy == pytest.approx(sparse.energy, abs=1e-10)
    overlap = abs(np.vdot(dense.state.amplitudes, sparse.state.amplitudes))
    assert overlap == pytest.approx(1.0, abs=1e-9)
    assert dense.residual < 1e-10


def test_ground_state_noninteracting_is_condensate():
    lp = ring(5, 3)
    gs = ground_state(lp)
    # U = 0: all particles in the k = 0 orbital, energy exactly 3 * min band
    w = np.linalg.eigvalsh(single_particle_hamiltonian(lp))
    assert gs.energy == pytest.approx(3 * w[0], abs=1e-10)
    cond = condensate_state(lp)
    assert abs(np.vdot(gs.state.amplitudes, cond.amplitudes)) == \
        pytest.approx(1.0, abs=1e-9)


def test_ground_state_hard_core_limit():
    # U -> inf on a ring fermionizes: E = 2 * 2J(1 - cos(pi/M)) for N = 2
    m = 10
    lp = ring(m, 2, u_re=1e5)
    gs = ground_state(lp)
    e_inf = 4.0 * (1.0 - math.cos(math.pi / m))
    assert gs.energy == pytest.approx(e_inf, rel=2e-3)
    # and the pair correlation develops a hard core
    _, g2 = pair_correlation(gs.state)
    assert np.nanmax(np.abs(np.diagonal(g2))) < 1e-3


def test_ground_state_single_site():
    lp = LatticeParams.dimensionless(m_sites=1, n_max=2, u_re=0.7)
    gs = ground_state(lp)
    # uniform stencil keeps +2J per particle even with no neighbors
    assert gs.energy == pytest.approx(2 * 1.0 * 2 + 0.7, rel=1e-12)


def test_loss_spectrum_uniform_one_body():
    lp = ring(5, 1, kappa1=0.37)
    w = loss_spectrum(lp, 1)
    np.testing.assert_allclose(-2.0 * w.imag, 0.37, atol=1e-12)


def test_lowest_loss_state_beats_condensate():
    lp = ring(4, 2, kappa2=1.0)
    mode = lowest_loss_state(lp, 2)
    assert mode.loss_rate >= -1e-12   # numerically dark is fine
    spec = loss_spectrum(lp, 2)
    assert mode.loss_rate == pytest.approx(-2 * spec.imag.max(), abs=1e-10)
    # the long-lived state avoids double occupancy better than a condensate
    _, g2 = pair_correlation(mode.state)
    assert float(np.nanmean(np.diagonal(g2))) < 0.5


# ---------------------------------------------------------------------------
# no-jump evolution

def test_nojump_uniform_one_body_decay():
    # kappa1 commutes with everything: survival = exp(-kappa1 N t) exactly
    lp = ring(3, 2, u_re=1.2, kappa1=0.4)
    cache = SectorCache(lp)
    init = ground_state(lp, cache=cache).state
    times = np.linspace(0.0, 2.0, 9)
    nj = evolve_nojump(lp, init, times, cache=cache)
    np.testing.assert_allclose(nj.survival, np.exp(-0.4 * 2 * times),
                               rtol=1e-8)
    assert nj.n_steps > 0


def test_nojump_single_site_pair_decay():
    # |2> on one site: survival = exp(-2 kappa2 t)
    lp = LatticeParams.dimensionless(m_sites=1, n_max=2, kappa2=0.9)
    b = build_basis(1, 2)
    init = StateVector(b, np.array([1.0 + 0.0j]))
    times = np.linspace(0.0, 1.5, 7)
    nj = evolve_nojump(lp, init, times, tol=1e-12)
    np.testing.assert_allclose(nj.survival, np.exp(-2 * 0.9 * times),
                               rtol=1e-8)


# ---------------------------------------------------------------------------
# trajectories

def test_trajectory_bookkeeping():
    lp = ring(3, 2, kappa2=0.8)
    init = condensate_state(lp)
    times = np.linspace(0.0, 4.0, 17)
    tr = mcwf_trajectory(lp, init, times, master_seed=3, traj_index=5)
    # particle number only decreases, in steps of 2 here
    assert (np.diff(tr.sectors) <= 0).all()
    assert set(np.unique(tr.sectors)) <= {0, 2}
    # conditional density always sums to the current particle number
    np.testing.assert_allclose(tr.density.sum(axis=1), tr.sectors, atol=1e-9)
    for rec in tr.jumps:
        assert rec.kind == "two_body"
        assert rec.n_before - rec.n_after == 2
        assert times[0] < rec.time <= times[-1]


def test_trajectory_reproducible():
    lp = ring(3, 2, kappa2=0.8)
    init = condensate_state(lp)
    times = np.linspace(0.0, 3.0, 7)
    a = mcwf_trajectory(lp, init, times, master_seed=11, traj_index=0)
    b = mcwf_trajectory(lp, init, times, master_seed=11, traj_index=0)
    np.testing.assert_array_equal(a.density, b.density)
    assert a.jumps == b.jumps
    c = mcwf_trajectory(lp, init, times, master_seed=11, traj_index=1)
    assert a.jumps != c.jumps or not np.array_equal(a.density, c.density)


def test_first_jump_times_are_exponential():
    # single site, |2>: the only channel fires at rate 2 kappa2
    kappa2 = 0.6
    lp = LatticeParams.dimensionless(m_sites=1, n_max=2, kappa2=kappa2)
    b = build_basis(1, 2)
    init = StateVector(b, np.array([1.0 + 0.0j]))
    horizon = 10.0 / kappa2
    n_traj = 4000
    ens = ensemble_average(lp, init, np.array([0.0, horizon]), n_traj,
                           master_seed=42, collect_jumps=True)
    firsts = np.sort([recs[0].time for recs in ens.jump_records if recs])
    assert len(firsts) >= n_traj - 5   # horizon covers ~all of the mass
    lam = 2.0 * kappa2
    cdf = 1.0 - np.exp(-lam * firsts)
    k = np.arange(1, len(firsts) + 1)
    ks_stat = np.max(np.maximum(k / len(firsts) - cdf,
                                cdf - (k - 1) / len(firsts)))
    # 1% critical value of the Kolmogorov distribution
    assert ks_stat < 1.6276 / math.sqrt(len(firsts))


def test_no_jump_fraction_matches_survival():
    lp = ring(3, 2, kappa2=0.8, u_re=0.5)
    cache = SectorCache(lp)
    init = condensate_state(lp, cache=cache)
    times = np.array([0.0, 1.0])
    surv = evolve_nojump(lp, init, times, cache=cache).survival[-1]
    n_traj = 1000
    ens = ensemble_average(lp, init, times, n_traj, master_seed=9,
                           collect_jumps=True, cache=cache)
    frac = sum(1 for recs in ens.jump_records if not recs) / n_traj
    sd = math.sqrt(surv * (1 - surv) / n_traj)
    assert abs(frac - surv) < 3.5 * sd


def test_zero_weight_crossing_raises():
    # white box: build the lossy generator first, then empty the channel
    # list so no jump can be drawn when the threshold is crossed
    lp = ring(2, 2, kappa2=1.0)
    cache = SectorCache(lp)
    init = condensate_state(lp, cache=cache)
    cache.heff(2)
    cache.channels(2).clear()
    with pytest.raises(RuntimeError, match="zero"):
        mcwf_trajectory(lp, init, np.array([0.0, 50.0]), master_seed=0,
                        cache=cache)


# ---------------------------------------------------------------------------
# ensembles vs master equation

def test_ensemble_matches_master():
    lp = ring(3, 2, u_re=1.0, kappa2=0.8, kappa1=0.1)
    cache = SectorCache(lp)
    init = ground_state(lp, cache=cache).state
    times = np.linspace(0.0, 2.5, 11)
    mas = master_evolve(lp, init, times, cache=cache)
    ens = ensemble_average(lp, init, times, n_trajectories=600,
                           master_seed=7, cache=cache)
    z_dens = np.abs(ens.density - mas.density) / ens.density_se
    z_n = np.abs(ens.total_number - mas.total_number) / ens.total_number_se
    z_g2n = np.abs(ens.g2_numerator - mas.g2_numerator) / ens.g2_numerator_se
    assert z_dens.max() < 4.0
    assert z_n.max() < 4.0
    assert z_g2n.max() < 4.5
    assert sum(ens.jump_counts.values()) > 0


def test_ensemble_seed_and_thread_invariance():
    lp = ring(3, 2, kappa2=0.7)
    init = condensate_state(lp)
    times = np.linspace(0.0, 1.5, 5)
    a = ensemble_average(lp, init, times, 64, master_seed=5, threads=1)
    b = ensemble_average(lp, init, times, 64, master_seed=5, threads=3)
    np.testing.assert_array_equal(a.density, b.density)
    np.testing.assert_array_equal(a.g2, b.g2)
    c = ensemble_average(lp, init, times, 64, master_seed=6)
    assert not np.array_equal(a.density, c.density)


def test_ensemble_input_validation():
    lp = ring(2, 2, kappa2=0.5)
    init = condensate_state(lp)
    with pytest.raises(ValueError):
        ensemble_average(lp, init, np.array([0.0, 1.0]), 1)
    with pytest.raises(ValueError):
        ensemble_average(lp, init, np.array([0.0, 1.0]), 8,
                         master_seed=2**64)
    with pytest.raises(ValueError):
        ensemble_average(lp, init, np.array([0.0, -1.0]), 8)


def test_master_two_level_cascade():
    # single site |2>: p2' = -2k p2, exact closed form for <n>(t)
    kappa2 = 0.9
    lp = LatticeParams.dimensionless(m_sites=1, n_max=2, kappa2=kappa2)
    b = build_basis(1, 2)
    init = StateVector(b, np.array([1.0 + 0.0j]))
    times = np.linspace(0.0, 2.0, 9)
    mas = master_evolve(lp, init, times)
    np.testing.assert_allclose(mas.total_number,
                               2.0 * np.exp(-2 * kappa2 * times), rtol=1e-8)
    np.testing.assert_allclose(mas.trace, 1.0, atol=1e-12)


def test_master_conserves_when_closed():
    lp = ring(3, 2, u_re=2.0)
    init = ground_state(lp).state
    times = np.linspace(0.0, 2.0, 5)
    mas = master_evolve(lp, init, times)
    np.testing.assert_allclose(mas.trace, 1.0, atol=1e-12)
    np.testing.assert_allclose(mas.total_number, 2.0, atol=1e-10)
    for blocks in mas.blocks:
        assert blocks.hermiticity_defect() < 1e-12
        assert blocks.min_eigenvalue() > -1e-12


def test_master_from_density_blocks():
    # feeding a mixed initial condition through the same pipeline
    lp = ring(2, 2, kappa2=0.5)
    b2 = build_basis(2, 2)
    b1 = build_basis(2, 1)
    rho2 = np.eye(b2.dim, dtype=complex) / b2.dim * 0.7
    rho1 = np.eye(b1.dim, dtype=complex) / b1.dim * 0.3
    init = DensityBlocks(bases={2: b2, 1: b1}, blocks={2: rho2, 1: rho1})
    times = np.linspace(0.0, 1.0, 3)
    mas = master_evolve(lp, init, times)
    np.testing.assert_allclose(mas.trace, 1.0, atol=1e-10)
    assert mas.total_number[0] == pytest.approx(0.7 * 2 + 0.3 * 1, rel=1e-10)
    assert mas.total_number[-1] < mas.total_number[0]


# ---------------------------------------------------------------------------
# relaxation and ramps

def test_relax_starts_at_condensate_value():
    lp = ring(4, 2, kappa2=1.0)
    times = np.linspace(0.0, 3.0, 61)
    res = dissipative_relax(lp, times)
    assert res.g2_global[0] == pytest.approx(0.5, rel=1e-10)
    assert res.tau_ref == pytest.approx(4 / (2 * 1.0 * 2), rel=1e-12)
    assert res.crossings[1.0] == 0.0       # already below one at t = 0
    assert res.survival[0] == pytest.approx(1.0, rel=1e-12)
    assert (np.diff(res.survival) < 0).all()


def test_relax_crossing_is_interpolated():
    lp = ring(4, 2, kappa2=1.0)
    times = np.linspace(0.0, 3.0, 61)
    res = dissipative_relax(lp, times, thresholds=(0.45,))
    t45 = res.crossings[0.45]
    assert t45 is not None and 0.0 < t45 < 3.0
    # the track really is above/below the threshold around the crossing
    i = np.searchsorted(times, t45)
    assert res.g2_global[i - 1] > 0.45 >= res.g2_global[i]


def test_ramp_adiabatic_limit():
    lp = ring(4, 2)   # final coupling set by the schedule
    target = ground_state(ring(4, 2, u_re=6.0))
    start = ground_state(lp)
    slow = RampSchedule.of_coupling([0.0, 30.0], [0.0, 6.0])
    res = adiabatic_ramp(lp, start.state, slow, np.linspace(0.0, 30.0, 7))
    fid = abs(np.vdot(target.state.amplitudes,
                      res.final_state.normalized().amplitudes)) ** 2
    assert fid > 0.999
    # norm conserved without losses
    np.testing.assert_allclose(res.survival, 1.0, atol=1e-7)

    fast = RampSchedule.of_coupling([0.0, 0.3], [0.0, 6.0])
    res_fast = adiabatic_ramp(lp, start.state, fast,
                              np.linspace(0.0, 0.3, 4))
    fid_fast = abs(np.vdot(target.state.amplitudes,
                           res_fast.final_state.normalized().amplitudes)) ** 2
    assert fid_fast < fid - 0.01


def test_ramp_detuning_schedule_maps_exactly(rng):
    p = draw_physical(rng, delta_omega=0.0)
    d = derive(p)
    lp = to_lattice(d, 6, "periodic")
    times = [0.0, 1.0e-6]
    detunings = [5.0e8, 1.0e8]
    sch = RampSchedule.from_detuning(d, lp, times, detunings)
    for t, delta in ((0.0, 5.0e8), (1.0e-6, 1.0e8), (0.5e-6, 3.0e8)):
        cos2 = d.cos_theta ** 2
        expected = (2.0 * p.length * p.g24**2 * cos2 / lp.spacing
                    / complex(delta - cos2 * p.delta_omega,
                              0.5 * p.gamma42))
        assert sch.u_of(t) == pytest.approx(expected, rel=1e-12)
        assert sch.u_of(t).imag <= 0.0


def test_ramp_schedule_validation():
    with pytest.raises(ValueError, match="increasing"):
        RampSchedule.of_coupling([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError, match="Im"):
        RampSchedule.of_coupling([0.0, 1.0], [0.0, 1.0 + 0.5j])


def test_ramp_with_losses_decays():
    lp = ring(3, 2, kappa2=0.5)
    start = condensate_state(lp)
    sch = RampSchedule.of_coupling([0.0, 2.0], [complex(0, -0.5),
                                                complex(2.0, -0.5)])
    res = adiabatic_ramp(lp, start, sch, np.linspace(0.0, 2.0, 5))
    assert res.survival[-1] < 0.9
    assert (np.diff(res.survival) < 0).all()
