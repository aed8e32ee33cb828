"""Microscopic parameters of the driven atomic ensemble and their mapping to
the effective one-dimensional gas.

Inputs are SI (rad/s for rates and Rabi frequencies, meters for lengths).
Internally the package works in "hbar = 1" convention: every energy is an
angular frequency in rad/s, masses are kept in kg and appear only through the
combination m/hbar, and time is in seconds.  The conversion happens once, in
:func:`derive` / :func:`to_lattice`; nothing downstream multiplies by hbar
again.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

HBAR = 1.054571817e-34  # J s


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")


@dataclass(frozen=True)
class PhysicalParams:
    """Parameters of the four-level ensemble coupled to the quantized field.

    Attributes
    ----------
    n_atoms:
        Number of atoms in the interaction volume.
    n_photons:
        Number of dark-state polaritons (photons) confined to the medium.
    length:
        Length of the medium in meters.
    g13, g24:
        Single-photon coupling (Rabi frequency per photon, rad/s) of the
        quantized field on the lambda leg (1-3) and on the interaction leg
        (2-4).
    omega_c:
        Control-field Rabi frequency, rad/s.
    gamma31, gamma32, gamma42:
        Population decay rates out of the excited levels, rad/s.
    delta:
        Detuning controlling the quadratic dispersion of the stationary
        polariton, rad/s.  Negative values give a positive effective mass.
    delta_int:
        Detuning of the interaction leg, rad/s.  Zero makes the two-body
        coupling purely dissipative (up to the band shift, see
        ``DerivedParams.shifted_detuning``).
    delta_omega:
        Frequency mismatch between the two counter-propagating control
        components, rad/s.  Feeds the linear loss channel and the energy
        offset.
    k_max:
        Largest wavenumber (1/m) the run is expected to populate; used for
        the validity horizon.
    c_light:
        Speed of light in the medium's host, m/s.
    """

    n_atoms: int
    n_photons: int
    length: float
    g13: float
    g24: float
    omega_c: float
    gamma31: float
    gamma32: float
    gamma42: float
    delta: float
    delta_int: float = 0.0
    delta_omega: float = 0.0
    k_max: float = 1.0e5
    c_light: float = 2.99792458e8

    def __post_init__(self):
        for name in ("length", "g13", "g24", "omega_c", "gamma31", "gamma32",
                     "gamma42", "delta", "delta_int", "delta_omega", "k_max",
                     "c_light"):
            _require_finite(name, float(getattr(self, name)))
        if self.n_atoms < 1:
            raise ValueError("n_atoms must be a positive integer")
        if self.n_photons < 1:
            raise ValueError("n_photons must be a positive integer")
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.c_light <= 0:
            raise ValueError("c_light must be positive")
        if self.k_max <= 0:
            raise ValueError("k_max must be positive")
        for name in ("g13", "g24", "omega_c", "gamma31", "gamma32", "gamma42"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def gamma_total(self) -> float:
        """Total decay rate out of level 3."""
        return self.gamma31 + self.gamma32


class InteractionStrength(NamedTuple):
    """Dimensionless interaction parameter from the closed-form route.

    ``g`` is the complex value in the slow-light convention; ``g_abs`` is its
    magnitude computed independently through the optical depth, which is the
    form the threshold statements are expressed in.
    """

    g: complex
    g_abs: float


@dataclass(frozen=True)
class DerivedParams:
    """Effective-theory quantities computed from :class:`PhysicalParams`."""

    physical: PhysicalParams
    omega0: float            # collective Rabi scale, rad/s
    sin_theta: float
    cos_theta: float
    gamma_total: float       # rad/s
    mass_eff: float          # kg; positive for delta < 0
    g_tilde: complex         # contact coupling, J m
    od: float                # optical depth (lambda-leg form)
    od_interaction: float    # optical depth (interaction-leg form)
    epsilon_shift: float     # energy offset, rad/s
    shifted_detuning: float  # delta_int - cos^2(theta) * delta_omega, rad/s
    g_complex: complex       # dimensionless interaction parameter (definitional)
    g_abs: float
    kappa1: float            # uniform one-body loss rate, 1/s
    kappa_d: float           # derivative (dispersive) loss rate, m^2/s
    kappa2_cont: float       # continuum two-body loss rate, m/s
    t_max: float             # validity horizon for k up to k_max, s
    relax_timescale: float   # correlation buildup timescale, s

    @property
    def mass_over_hbar(self) -> float:
        """Effective mass divided by hbar, in s/m^2."""
        return self.mass_eff / HBAR


def _mixing(p: PhysicalParams) -> tuple[float, float, float]:
    """Collective Rabi scale and mixing angle (omega0, sin, cos)."""
    omega0 = math.sqrt(p.n_atoms * p.g13**2 + 2.0 * p.omega_c**2)
    if omega0 == 0.0:
        raise ValueError(
            "omega0 = 0 (no couplings at all); the polariton is undefined")
    sin_t = math.sqrt(p.n_atoms) * p.g13 / omega0
    cos_t = math.sqrt(2.0) * p.omega_c / omega0
    return omega0, sin_t, cos_t


def derive(p: PhysicalParams) -> DerivedParams:
    """Map microscopic parameters to the effective gas description.

    Raises
    ------
    ValueError
        If ``delta`` is zero (the effective mass diverges), if the control
        field vanishes (``cos(theta) = 0`` makes the mass undefined), or if
        the contact-coupling denominator vanishes exactly
        (``delta_int = cos^2(theta) delta_omega`` together with
        ``gamma42 = 0``).
    """
    omega0, sin_t, cos_t = _mixing(p)
    if p.omega_c == 0.0:
        raise ValueError(
            "omega_c = 0 gives cos(theta) = 0: the stationary component is "
            "absent and the effective mass is undefined")
    if p.delta == 0.0:
        raise ValueError(
            "delta = 0 makes the effective mass diverge; pick a finite "
            "(preferably negative) detuning")

    gamma = p.gamma_total
    cos2 = cos_t * cos_t
    mass_eff = -HBAR * omega0**2 / (2.0 * p.delta * p.c_light**2 * cos2)

    shifted = p.delta_int - cos2 * p.delta_omega
    denom = complex(shifted, 0.5 * p.gamma42)
    if denom == 0:
        raise ValueError(
            "contact coupling undefined: delta_int - cos^2(theta)*delta_omega "
            "and gamma42 are both zero")
    g_tilde = 2.0 * HBAR * p.length * p.g24**2 * cos2 / denom

    # Optical depth has two equivalent microscopic expressions; they agree
    # only when g13^2/gamma_total = g24^2/gamma42.  The lambda-leg form is
    # authoritative.
    od = 4.0 * p.n_atoms * p.g13**2 * p.length / (p.c_light * gamma)
    od_alt = (4.0 * p.n_atoms * p.g24**2 * p.length / (p.c_light * p.gamma42)
              if p.gamma42 > 0 else math.inf if p.g24 > 0 else od)
    if od > 0 and abs(od_alt - od) > 1e-9 * od:
        warnings.warn(
            "the two optical-depth expressions disagree "
            f"({od:.6g} vs {od_alt:.6g}); using the lambda-leg form",
            stacklevel=2)

    density = p.n_photons / p.length
    g_complex = mass_eff * g_tilde / (HBAR**2 * density)

    kappa1 = gamma * p.delta_omega**2 * cos2 / omega0**2
    kappa_d = gamma * p.c_light**2 * cos2 / omega0**2
    kappa2_cont = -g_tilde.imag / HBAR

    t_max = max_evolution_time(p)
    im = abs(g_tilde.imag)
    relax = HBAR * p.length / (2.0 * im * p.n_photons) if im > 0 else math.inf

    return DerivedParams(
        physical=p,
        omega0=omega0,
        sin_theta=sin_t,
        cos_theta=cos_t,
        gamma_total=gamma,
        mass_eff=mass_eff,
        g_tilde=g_tilde,
        od=od,
        od_interaction=od_alt,
        epsilon_shift=-cos2 * p.delta_omega,
        shifted_detuning=shifted,
        g_complex=g_complex,
        g_abs=abs(g_complex),
        kappa1=kappa1,
        kappa_d=kappa_d,
        kappa2_cont=kappa2_cont,
        t_max=t_max,
        relax_timescale=relax,
    )


def interaction_strength(p: PhysicalParams) -> InteractionStrength:
    """Closed-form dimensionless interaction parameter.

    Two independent evaluations in the slow-light convention: the complex
    value from the raw couplings, and the magnitude routed through the
    optical depth.  The two magnitudes coincide exactly when
    ``g13^2/gamma_total = g24^2/gamma42``.
    """
    if p.delta == 0.0:
        raise ValueError("delta = 0: interaction parameter undefined")
    gamma = p.gamma_total
    g = (-p.n_atoms * p.g13**2 * p.g24**2 * p.length**2
         / (p.delta * p.c_light**2 * complex(p.delta_int, 0.5 * p.gamma42)
            * p.n_photons))
    od = 4.0 * p.n_atoms * p.g13**2 * p.length / (p.c_light * gamma)
    g_abs = (gamma * p.gamma42 * od**2
             / (16.0 * abs(p.delta)
                * math.hypot(p.delta_int, 0.5 * p.gamma42)
                * p.n_atoms * p.n_photons))
    return InteractionStrength(g=g, g_abs=g_abs)


@dataclass(frozen=True)
class ValidityCheck:
    name: str
    lhs: float
    rhs: float
    ratio: float
    passed: bool
    description: str


@dataclass(frozen=True)
class ValidityReport:
    """Outcome of the adiabatic-elimination validity inequalities.

    Each entry compares a quantity that must stay small (``lhs``) against its
    bound (``rhs``); ``ratio = lhs/rhs`` passes when it does not exceed
    ``margin``.
    """

    margin: float
    checks: tuple[ValidityCheck, ...] = field(default_factory=tuple)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[ValidityCheck]:
        return [c for c in self.checks if not c.passed]


def _ratio(lhs: float, rhs: float) -> float:
    if lhs == 0.0:
        return 0.0
    if rhs == 0.0:
        return math.inf
    return lhs / rhs


def check_validity(p: PhysicalParams, margin: float = 0.1) -> ValidityReport:
    """Evaluate every separation-of-scales inequality behind the model.

    ``margin`` is the numerical meaning of "much smaller than": a check
    passes when lhs/rhs <= margin.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    omega0, _, cos_t = _mixing(p)
    cos2 = cos_t * cos_t
    entries = [
        ("two_photon_loss",
         4.0 * p.g24**2 * cos2 * p.n_photons, p.gamma42**2,
         "interaction-leg saturation stays perturbative"),
        ("kinetic_band",
         cos2 * p.c_light**2 * p.k_max**2, omega0**2,
         "kinetic energies stay inside the polariton band"),
        ("mismatch_band",
         cos2 * p.delta_omega**2, omega0**2,
         "control mismatch stays inside the polariton band"),
        ("strong_control_gamma31", p.gamma31, omega0,
         "collective coupling dominates decay of level 3 (to 1)"),
        ("strong_control_gamma32", p.gamma32, omega0,
         "collective coupling dominates decay of level 3 (to 2)"),
        ("strong_control_gamma42", p.gamma42, omega0,
         "collective coupling dominates decay of level 4"),
        ("strong_control_detuning", abs(p.delta), omega0,
         "collective coupling dominates the dispersive detuning"),
        ("slow_light", cos2, 1.0,
         "photonic admixture is small (slow-light regime)"),
    ]
    checks = []
    for name, lhs, rhs, desc in entries:
        r = _ratio(lhs, rhs)
        checks.append(ValidityCheck(name=name, lhs=lhs, rhs=rhs, ratio=r,
                                    passed=(r <= margin), description=desc))
    return ValidityReport(margin=margin, checks=tuple(checks))


def max_evolution_time(p: PhysicalParams, k_max: float | None = None) -> float:
    """Horizon below which the adiabatic elimination stays controlled.

    Returns ``2 omega0^2 / (gamma_total c^2 k^2 cos^2 theta)`` for the given
    wavenumber (default ``p.k_max``).  Infinite when the decay rate or the
    photonic admixture vanishes.
    """
    k = p.k_max if k_max is None else k_max
    if k <= 0:
        raise ValueError("k_max must be positive")
    omega0, _, cos_t = _mixing(p)
    denom = p.gamma_total * p.c_light**2 * k**2 * cos_t**2
    if denom == 0.0:
        return math.inf
    return 2.0 * omega0**2 / denom
