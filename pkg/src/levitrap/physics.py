"""Kinetic-theory damping, quality factor and noise-budget conversions.

All noise densities are one-sided. The scalar conversion helpers avoid
``math``/``numpy`` calls on their arguments so that they also work on
symbolic quantities (the test-suite pushes ``sympy`` units through them to
check dimensions).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .constants import E_CHARGE, HBAR, K_B, M_H2, MBAR, TWO_PI


class InvalidInputError(ValueError):
    """A physical input is outside its domain (negative mass, T <= 0, ...)."""


class Shape(enum.Enum):
    SPHERE = "sphere"
    DUMBBELL = "dumbbell"


class Estimate(NamedTuple):
    value: float
    sigma: float = 0.0

    def relative(self):
        return self.sigma / abs(self.value) if self.value else math.inf


@dataclass(frozen=True)
class ParticleSpec:
    """A trapped nanoparticle.

    ``radius`` is the radius entering the drag formula: the sphere radius for
    ``Shape.SPHERE`` and the cylinder radius for ``Shape.DUMBBELL``. Use
    :func:`cluster_sphere_radius` to build the volume-equivalent radius of a
    small cluster.
    """

    mass: float  # kg
    radius: float  # m
    charge: int = 0  # elementary charges, signed
    shape: Shape = Shape.SPHERE
    accommodation: float = 0.9
    surface_temperature: float = 300.0  # K
    mass_sigma: float = 0.0  # kg, 1 sigma

    def __post_init__(self):
        if isinstance(self.shape, str):
            object.__setattr__(self, "shape", Shape(self.shape.lower()))
        if not self.mass > 0:
            raise InvalidInputError(f"mass must be positive, got {self.mass}")
        if not self.radius > 0:
            raise InvalidInputError(f"radius must be positive, got {self.radius}")
        if not 0.0 <= self.accommodation <= 1.0:
            raise InvalidInputError(
                f"accommodation must lie in [0, 1], got {self.accommodation}")
        if not self.surface_temperature > 0:
            raise InvalidInputError("surface_temperature must be positive")
        if self.mass_sigma < 0:
            raise InvalidInputError("mass_sigma must be non-negative")

    @property
    def charge_coulomb(self):
        return self.charge * E_CHARGE


@dataclass(frozen=True)
class Environment:
    """Gas and trap conditions. ``pressure`` is in Pa."""

    pressure: float = 0.0  # Pa
    gas_temperature: float = 300.0  # K
    gas_molecule_mass: float = M_H2  # kg
    secular_frequency: float = 1.28e3  # Hz
    electrode_distance: float = 0.92e-3  # m
    electrode_resistivity: float = 6.9e-7  # Ohm m

    def __post_init__(self):
        if self.pressure < 0:
            raise InvalidInputError("pressure must be non-negative")
        if not self.gas_temperature > 0:
            raise InvalidInputError("gas_temperature must be positive")
        if not self.gas_molecule_mass > 0:
            raise InvalidInputError("gas_molecule_mass must be positive")
        if not self.secular_frequency > 0:
            raise InvalidInputError("secular_frequency must be positive")
        if not self.electrode_distance > 0:
            raise InvalidInputError("electrode_distance must be positive")
        if self.electrode_resistivity < 0:
            raise InvalidInputError("electrode_resistivity must be non-negative")

    @classmethod
    def from_mbar(cls, pressure_mbar, **kwargs):
        return cls(pressure=pressure_mbar * MBAR, **kwargs)

    @property
    def pressure_mbar(self):
        return self.pressure / MBAR

    @property
    def omega(self):
        return TWO_PI * self.secular_frequency


@dataclass(frozen=True)
class NoiseBudget:
    """Force, field, voltage and displacement spectra equivalent to a heating rate.

    ``efield_noise`` and ``voltage_noise`` are ``None`` for a neutral particle.
    ``provenance`` maps each field to the conversion that produced it.
    """

    phonon_rate: float  # 1/s
    force_noise: float  # N^2/Hz
    efield_noise: Optional[float]  # (V/m)^2/Hz
    voltage_noise: Optional[float]  # V/sqrt(Hz)
    displacement_noise: float  # m^2/Hz
    provenance: dict = field(default_factory=dict, compare=False)


class QualityFactor(NamedTuple):
    q: float
    q_sigma: float
    qf: float  # Hz
    qf_sigma: float


class SurfaceNoise(NamedTuple):
    efield_noise: float  # (V/m)^2/Hz
    phonon_rate: Optional[float]  # 1/s, only when a particle is supplied


# --- scalar conversions -----------------------------------------------------

def thermal_force_psd(temperature, mass, gamma):
    """One-sided fluctuation-dissipation force PSD, 4 k_B T m gamma (N^2/Hz)."""
    return 4 * K_B * temperature * mass * gamma


def force_psd_from_rate(phonon_rate, mass, omega):
    return 4 * mass * HBAR * omega * phonon_rate


def rate_from_force_psd(force_psd, mass, omega):
    return force_psd / (4 * mass * HBAR * omega)


def efield_psd_from_force_psd(force_psd, charge_c):
    return force_psd / charge_c**2


def voltage_noise_from_efield_psd(efield_psd, distance):
    return distance * efield_psd**0.5


def displacement_psd_from_rate(phonon_rate, mass, omega):
    # per unit angular frequency convention; see the README noise-budget notes
    return 2 * HBAR * phonon_rate / (math.pi * mass * omega**3)


def rate_from_displacement_psd(displacement_psd, mass, omega):
    return displacement_psd * math.pi * mass * omega**3 / (2 * HBAR)


def heating_rate_from_damping(gamma, temperature, omega):
    """Phonon heating rate k_B T gamma / (hbar omega) of a thermal bath."""
    return K_B * temperature * gamma / (HBAR * omega)


def mean_speed(temperature, molecule_mass):
    return (8 * K_B * temperature / (math.pi * molecule_mass)) ** 0.5


# --- operations on domain objects ------------------------------------------

def mean_gas_speed(env: Environment) -> float:
    """Mean thermal speed sqrt(8 k_B T / (pi m_gas)) of the gas, in m/s."""
    if not env.gas_temperature > 0 or not env.gas_molecule_mass > 0:
        raise InvalidInputError("temperature and molecule mass must be positive")
    return mean_speed(env.gas_temperature, env.gas_molecule_mass)


def cluster_sphere_radius(radius, n_spheres=2):
    """Radius of one sphere holding the volume of ``n_spheres`` equal spheres."""
    return n_spheres ** (1.0 / 3.0) * radius


def _drag_geometry_factor(particle: ParticleSpec, env: Environment, sin2_theta: float) -> float:
    f = particle.accommodation
    sphere = 8 + math.pi * f * math.sqrt(particle.surface_temperature / env.gas_temperature)
    if particle.shape is Shape.SPHERE:
        return sphere / 3
    if particle.shape is Shape.DUMBBELL:
        # cylinder of length 2 r_c capped by two hemispheres
        side = f + (2 - (6 - math.pi) / 4 * f) * sin2_theta
        return sphere / 3 + 2 * side
    raise InvalidInputError(f"unknown shape {particle.shape!r}")


def gas_damping_coefficient(particle: ParticleSpec, env: Environment,
                            sin2_theta: float = 0.5) -> Estimate:
    """Free-molecular-flow damping coefficient ``a`` with gamma/2pi = a P.

    Returns ``a`` in Hz/mbar with a 1 sigma propagated from ``mass_sigma``
    only. ``sin2_theta`` is the dumbbell orientation factor (ignored for a
    sphere); 1/2 is the isotropic average.
    """
    if not 0.0 <= sin2_theta <= 1.0:
        raise InvalidInputError("sin2_theta must lie in [0, 1]")
    vbar = mean_gas_speed(env)
    geometry = _drag_geometry_factor(particle, env, sin2_theta)
    # gamma = (pi/2) G r^2 n m_gas vbar / m, and n m_gas vbar = 8 P / (pi vbar)
    gamma_per_pa = 4 * geometry * particle.radius**2 / (particle.mass * vbar)
    a = gamma_per_pa * MBAR / TWO_PI
    return Estimate(a, a * particle.mass_sigma / particle.mass)


def gas_damping_rate(particle: ParticleSpec, env: Environment, sin2_theta=0.5) -> float:
    """Damping rate gamma in rad/s at the environment pressure."""
    a = gas_damping_coefficient(particle, env, sin2_theta).value
    return TWO_PI * a * env.pressure_mbar


def quality_factor(gamma: float, env: Environment, gamma_sigma: float = 0.0) -> QualityFactor:
    """Q = Omega_z / gamma and the Q f_z product, with linearised 1 sigma."""
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be positive for Q to exist, got {gamma}")
    q = env.omega / gamma
    q_sigma = q * gamma_sigma / gamma
    return QualityFactor(q, q_sigma, q * env.secular_frequency,
                         q_sigma * env.secular_frequency)


def gas_heating_rate(gamma: float, env: Environment) -> float:
    """Phonon heating rate expected from gas collisions alone."""
    if gamma < 0:
        raise InvalidInputError("gamma must be non-negative")
    return heating_rate_from_damping(gamma, env.gas_temperature, env.omega)


def noise_budget(phonon_rate: float, particle: ParticleSpec, env: Environment) -> NoiseBudget:
    """Express a white heating rate as equivalent noise spectra."""
    if phonon_rate < 0:
        raise InvalidInputError("phonon_rate must be non-negative")
    omega = env.omega
    s_ff = force_psd_from_rate(phonon_rate, particle.mass, omega)
    provenance = {"force_noise": "4 m hbar Omega Gamma",
                  "displacement_noise": "2 hbar Gamma / (pi m Omega^3)"}
    if particle.charge:
        s_ee = efield_psd_from_force_psd(s_ff, particle.charge_coulomb)
        s_v = voltage_noise_from_efield_psd(s_ee, env.electrode_distance)
        provenance["efield_noise"] = "S_ff / q^2"
        provenance["voltage_noise"] = "d sqrt(S_EE)"
    else:
        s_ee = s_v = None
    s_zz = displacement_psd_from_rate(phonon_rate, particle.mass, omega)
    return NoiseBudget(phonon_rate, s_ff, s_ee, s_v, s_zz, provenance)


def surface_efield_noise(env: Environment, particle: Optional[ParticleSpec] = None) -> SurfaceNoise:
    """Johnson field noise of a resistive half-space, k_B T rho / (4 pi d^3).

    With a particle, the implied heating rate follows from inverting the
    noise-budget chain: Gamma = q^2 S_EE / (4 m hbar Omega).
    """
    d = env.electrode_distance
    s_ee = K_B * env.gas_temperature * env.electrode_resistivity / (4 * math.pi * d**3)
    rate = None
    if particle is not None:
        rate = rate_from_force_psd(s_ee * particle.charge_coulomb**2, particle.mass, env.omega)
    return SurfaceNoise(s_ee, rate)


def collision_surface_area(particle: ParticleSpec) -> float:
    if particle.shape is Shape.SPHERE:
        return 4 * math.pi * particle.radius**2
    if particle.shape is Shape.DUMBBELL:
        return 2 * 4 * math.pi * particle.radius**2
    raise InvalidInputError(f"unknown shape {particle.shape!r}")


def collision_rate(particle: ParticleSpec, env: Environment) -> float:
    """Gas-molecule impingement rate n vbar / 4 times the particle surface."""
    n = env.pressure / (K_B * env.gas_temperature)
    return n * mean_gas_speed(env) / 4 * collision_surface_area(particle)


def thermal_allan_limit(q: float, env: Environment, tau: float) -> float:
    """Thermally limited fractional frequency stability 1/sqrt(Q Omega tau)."""
    if not q > 0 or not tau > 0:
        raise InvalidInputError("Q and tau must be positive")
    return 1.0 / math.sqrt(q * env.omega * tau)

