"""Dissipative one-dimensional lattice gas of interacting dark-state polaritons.

The package maps a driven four-level atomic medium onto an effective
one-dimensional Bose gas with a complex contact interaction, discretizes it
onto number-conserving lattice sectors, and provides exact-diagonalization
ground states, quantum-jump trajectories, and block master-equation evolution
together with the observables needed to diagnose the strongly correlated
(Tonks-Girardeau-like) regime that the losses themselves stabilize.
"""

from .params import (HBAR, PhysicalParams, DerivedParams, InteractionStrength,
                     ValidityCheck, ValidityReport, derive,
                     interaction_strength, check_validity, max_evolution_time)
from .lattice import (MAX_SECTOR_DIM, LatticeParams, FockBasis, BasisTower,
                      SectorOperator, JumpChannel, to_lattice,
                      lattice_cutoff_bound, build_basis, lowering_map,
                      build_hermitian_hamiltonian, build_jump_operators,
                      effective_hamiltonian, single_particle_hamiltonian)
from .freefermi import (FermiReference, ff_density, ff_pair_correlation,
                        ff_energy, box_mode_energy, tg_coincidence)
from .observables import (ModeOccupations, FriedelSpectrum, DecayCheck,
                          ObservableReport, total_number, density,
                          one_body_density_matrix, pair_correlation,
                          momentum_distribution, friedel_spectrum,
                          decay_rate_check, report)
from .dynamics import (StateVector, DensityBlocks, SectorCache, GroundState,
                       LossEigenmode, JumpRecord, TrajectoryResult,
                       EnsembleResult, MasterResult, NoJumpResult,
                       RelaxResult, RampSchedule, RampResult, ground_state,
                       loss_spectrum, lowest_loss_state, evolve_nojump,
                       mcwf_trajectory, ensemble_average, master_evolve,
                       condensate_state, dissipative_relax, adiabatic_ramp)

__version__ = "0.1.0"

__all__ = [
    "HBAR", "MAX_SECTOR_DIM", "__version__",
    # parameters
    "PhysicalParams", "DerivedParams", "InteractionStrength", "ValidityCheck",
    "ValidityReport", "derive", "interaction_strength", "check_validity",
    "max_evolution_time",
    # lattice
    "LatticeParams", "FockBasis", "BasisTower", "SectorOperator",
    "JumpChannel", "to_lattice", "lattice_cutoff_bound", "build_basis",
    "lowering_map", "build_hermitian_hamiltonian", "build_jump_operators",
    "effective_hamiltonian", "single_particle_hamiltonian",
    # free-fermion references
    "FermiReference", "ff_density", "ff_pair_correlation", "ff_energy",
    "box_mode_energy", "tg_coincidence",
    # observables
    "ModeOccupations", "FriedelSpectrum", "DecayCheck", "ObservableReport",
    "total_number", "density", "one_body_density_matrix", "pair_correlation",
    "momentum_distribution", "friedel_spectrum", "decay_rate_check", "report",
    # dynamics
    "StateVector", "DensityBlocks", "SectorCache", "GroundState",
    "LossEigenmode", "JumpRecord", "TrajectoryResult", "EnsembleResult",
    "MasterResult", "NoJumpResult", "RelaxResult", "RampSchedule",
    "RampResult", "ground_state", "loss_spectrum", "lowest_loss_state",
    "evolve_nojump", "mcwf_trajectory", "ensemble_average", "master_evolve",
    "condensate_state", "dissipative_relax", "adiabatic_ramp",
]
