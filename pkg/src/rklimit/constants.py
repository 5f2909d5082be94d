"""Physical constants and the derived model constants.

All spectral energies are expressed in a single declared energy unit (keV by
default), times in seconds and lengths in metres.  The constant set is a fixed
CODATA 2018 snapshot so results are reproducible without any runtime lookup.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from functools import lru_cache

from .errors import DomainError

#: Gamma(2/3), stored to full double precision.
GAMMA_TWO_THIRDS = 1.3541179394264004169

#: Joules per unit of each supported energy unit.
JOULES_PER_UNIT = {
    "J": 1.0,
    "eV": 1.602176634e-19,
    "keV": 1.602176634e-16,
    "MeV": 1.602176634e-13,
}

AVOGADRO = 6.02214076e23  # 1/mol, exact

_C = 299792458.0
_L_P = 1.616255e-35
_PROTON_MASS = 1.67262192369e-27
_NEUTRON_MASS = 1.67492749804e-27


@dataclass(frozen=True)
class UnitSystem:
    """Declared unit system used by every rate formula."""

    energy_unit: str = "keV"
    time_unit: str = "s"
    length_unit: str = "m"

    def __post_init__(self):
        if self.energy_unit not in JOULES_PER_UNIT:
            raise DomainError(f"unsupported energy unit {self.energy_unit!r}")
        if self.time_unit != "s" or self.length_unit != "m":
            raise DomainError("only seconds and metres are supported")

    @property
    def joules_per_energy_unit(self) -> float:
        return JOULES_PER_UNIT[self.energy_unit]


KEV = UnitSystem()
SI = UnitSystem(energy_unit="J")


@dataclass(frozen=True)
class PhysicalConstants:
    """CODATA 2018 constants in SI units.

    ``t_p`` must equal ``l_p / c``; the default is derived that way.  The
    nucleon mass is the mean of the proton and neutron masses.
    """

    c: float = _C
    hbar: float = 1.054571817e-34
    alpha_fs: float = 7.2973525693e-3
    l_p: float = _L_P
    t_p: float = _L_P / _C
    m0: float = 0.5 * (_PROTON_MASS + _NEUTRON_MASS)
    gamma_two_thirds: float = GAMMA_TWO_THIRDS
    kev_per_joule: float = 1.0 / JOULES_PER_UNIT["keV"]

    def __post_init__(self):
        if abs(self.t_p - self.l_p / self.c) > 1e-12 * abs(self.t_p):
            raise DomainError("t_p must equal l_p / c to 1e-12 relative")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


CODATA2018 = PhysicalConstants()


@lru_cache(maxsize=64)
def beta_K(constants: PhysicalConstants = CODATA2018, units: UnitSystem = KEV) -> float:
    """Rate constant of the spontaneous emission spectrum.

    Returned in m^2 * E^(-1/3) / s, where E is the declared energy unit, so
    that ``Y * N_at * N_p**2 * beta_K / E**(2/3)`` is a rate per energy unit
    per second for ``Y`` in 1/m^2.  hbar is converted to (energy unit * s)
    before the formula is evaluated.
    """
    hbar = constants.hbar / units.joules_per_energy_unit
    num = constants.gamma_two_thirds * constants.alpha_fs * constants.c**2 * constants.t_p ** (4.0 / 3.0)
    return num / (math.sqrt(3.0) * math.pi * hbar ** (1.0 / 3.0))


def collapse_rate(constants: PhysicalConstants = CODATA2018) -> float:
    """CSL collapse rate fixed by the Planck time, in Hz."""
    c = constants.c
    return constants.t_p * constants.m0**2 * c**4 / (4.0 * constants.hbar**2)


def free_particle_rate(E, R_K, constants: PhysicalConstants = CODATA2018, units: UnitSystem = KEV):
    """Emission rate per unit energy for one free charged particle.

    Parameters
    ----------
    E : float or array
        Photon energy in the declared energy unit, > 0.
    R_K : float or array
        Correlation length in metres, > 0.
    """
    _require_positive(E, "E")
    _require_positive(R_K, "R_K")
    return beta_K(constants, units) / (R_K**2 * E ** (2.0 / 3.0))


def atomic_rate(E, R_K, N_at, N_p, N_e, constants: PhysicalConstants = CODATA2018, units: UnitSystem = KEV):
    """Rate for ``N_at`` atoms carrying ``N_p`` protons and ``N_e`` electrons."""
    if min(N_at, N_p, N_e) < 0:
        raise DomainError("particle counts must be non-negative")
    return N_at * (N_p**2 + N_e) * free_particle_rate(E, R_K, constants, units)


def constant_table(constants: PhysicalConstants = CODATA2018, units: UnitSystem = KEV) -> list[tuple[str, float, str]]:
    """Rows (name, value, unit) for every input and derived constant."""
    e = units.energy_unit
    return [
        ("c", constants.c, "m/s"),
        ("hbar", constants.hbar, "J s"),
        ("alpha_fs", constants.alpha_fs, "1"),
        ("l_p", constants.l_p, "m"),
        ("t_p", constants.t_p, "s"),
        ("m0", constants.m0, "kg"),
        ("gamma_two_thirds", constants.gamma_two_thirds, "1"),
        ("kev_per_joule", constants.kev_per_joule, "keV/J"),
        ("avogadro", AVOGADRO, "1/mol"),
        ("beta_K", beta_K(constants, units), f"m^2 {e}^-1/3 s^-1"),
        ("collapse_rate", collapse_rate(constants), "Hz"),
    ]


def _require_positive(x, name):
    if isinstance(x, (int, float)):
        ok = x > 0
    else:
        import numpy as np

        ok = bool(np.all(np.asarray(x) > 0))
    if not ok:
        raise DomainError(f"{name} must be > 0")
