"""Setup components, efficiency curves and the expected signal.

The expected signal density in counts per keV is

    f_S(E, Y) = Y * T_exp * beta_K * E**(-2/3) * sum_i alpha_i * eps_i(E)

and its integral over a bin is evaluated in closed form term by term, since
``E**(j - 2/3)`` integrates to ``E**(j + 1/3) / (j + 1/3)``.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .constants import AVOGADRO, CODATA2018, KEV, PhysicalConstants, beta_K
from .errors import ConfigError, OutOfRangeError, ValidationError

DEFAULT_WINDOW = (1300.0, 1600.0)
DEFAULT_EXPOSURE_S = 62 * 86400.0


class ClampCounter:
    """Thread-safe count of negative efficiencies clamped to zero."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def increment(self, n=1):
        with self._lock:
            self._count += n

    @property
    def count(self):
        return self._count

    def reset(self):
        with self._lock:
            self._count = 0


clamp_counter = ClampCounter()


@dataclass(frozen=True)
class ElementCount:
    symbol: str
    Z: int
    electrons_per_atom: int
    molar_mass: float  # g/mol
    atoms_per_formula_unit: int = 1

    def __post_init__(self):
        if self.Z < 1:
            raise ValidationError(f"{self.symbol}: Z must be >= 1")
        if self.molar_mass <= 0:
            raise ValidationError(f"{self.symbol}: molar mass must be > 0")
        if self.atoms_per_formula_unit < 1 or self.electrons_per_atom < 0:
            raise ValidationError(f"{self.symbol}: bad stoichiometry or electron count")


@dataclass(frozen=True)
class EfficiencyCurve:
    """Polynomial detection efficiency, coefficients in ascending powers of E/keV."""

    coefficients: tuple[float, ...]
    valid_range: tuple[float, float] = DEFAULT_WINDOW
    errors: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if not self.coefficients:
            raise ValidationError("efficiency curve needs at least one coefficient")
        lo, hi = self.valid_range
        if not lo < hi:
            raise ValidationError(f"empty efficiency valid range {self.valid_range}")
        if self.errors is not None and len(self.errors) != len(self.coefficients):
            raise ValidationError("coefficient errors must match coefficients")

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def covers(self, lo, hi) -> bool:
        return self.valid_range[0] <= lo and hi <= self.valid_range[1]


@dataclass(frozen=True)
class Material:
    name: str
    mass: float  # kg
    composition: tuple[ElementCount, ...]
    efficiency: EfficiencyCurve
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "composition", tuple(self.composition))
        if not self.mass > 0:
            raise ValidationError(f"{self.name}: mass must be > 0")
        if not self.composition:
            raise ConfigError(f"{self.name}: composition is empty")

    def atoms_per_kg(self) -> list[float]:
        """Atoms of each element per kilogram of material."""
        formula_mass = sum(el.atoms_per_formula_unit * el.molar_mass for el in self.composition)
        return [1000.0 * AVOGADRO * el.atoms_per_formula_unit / formula_mass for el in self.composition]


@dataclass(frozen=True)
class SignalModel:
    materials: tuple[Material, ...]
    exposure_seconds: float = DEFAULT_EXPOSURE_S
    include_electron_term: bool = False
    window: tuple[float, float] = DEFAULT_WINDOW
    efficiency_systematic: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "materials", tuple(self.materials))
        if not self.exposure_seconds > 0:
            raise ConfigError("exposure_seconds must be > 0")
        if not self.materials:
            raise ConfigError("signal model needs at least one material")
        lo, hi = self.window
        if not lo < hi:
            raise ConfigError(f"empty analysis window {self.window}")
        for m in self.materials:
            if not m.efficiency.covers(lo, hi):
                raise ConfigError(
                    f"{m.name}: efficiency range {m.efficiency.valid_range} does not cover window {self.window}"
                )
            if not polynomial_nonnegative(m.efficiency.coefficients, lo, hi):
                raise ConfigError(f"{m.name}: efficiency polynomial is negative inside the analysis window")
        if self.efficiency_systematic < 0:
            raise ConfigError("efficiency_systematic must be >= 0")

    def alphas(self) -> np.ndarray:
        return np.array([alpha_factor(m, self.include_electron_term) for m in self.materials])


def alpha_factor(material: Material, include_electron_term: bool = False) -> float:
    """Material weight: sum over atom types of (atoms) * (Z**2 [+ electrons])."""
    if not material.composition:
        raise ConfigError(f"{material.name}: composition is empty")
    total = 0.0
    for el, n_per_kg in zip(material.composition, material.atoms_per_kg()):
        charge = el.Z**2 + (el.electrons_per_atom if include_electron_term else 0)
        total += material.mass * n_per_kg * charge
    return total


def horner(coefficients: Sequence[float], E):
    acc = np.zeros_like(np.asarray(E, dtype=float)) if np.ndim(E) else 0.0
    for c in reversed(coefficients):
        acc = acc * E + c
    return acc


def efficiency(curve: EfficiencyCurve, E):
    """Evaluate the curve at ``E`` keV; negative values are clamped to 0."""
    E_arr = np.asarray(E, dtype=float)
    lo, hi = curve.valid_range
    if np.any(E_arr < lo) or np.any(E_arr > hi) or np.any(np.isnan(E_arr)):
        raise OutOfRangeError(f"energy outside efficiency range [{lo}, {hi}] keV")
    value = horner(curve.coefficients, E_arr)
    negative = value < 0
    if np.any(negative):
        clamp_counter.increment(int(np.count_nonzero(negative)))
        value = np.where(negative, 0.0, value)
    return float(value) if np.ndim(E) == 0 else value


def polynomial_nonnegative(coefficients: Sequence[float], lo: float, hi: float) -> bool:
    """True when the polynomial has no negative value on [lo, hi]."""
    coeffs = np.asarray(coefficients, dtype=float)
    points = [lo, hi]
    if len(coeffs) > 2:
        # extrema of the polynomial on the interval
        crit = np.polynomial.polynomial.polyroots(np.polynomial.polynomial.polyder(coeffs))
        points += [r.real for r in crit if abs(r.imag) < 1e-9 * max(1.0, abs(r)) and lo < r.real < hi]
    return bool(np.all(horner(coeffs, np.array(points)) >= 0))


def signal_shape(E, Y, model: SignalModel, constants: PhysicalConstants = CODATA2018):
    """Expected counts per keV at energy ``E`` for yield ``Y`` (1/m^2)."""
    if Y < 0:
        raise ValidationError("Y must be >= 0")
    E_arr = np.asarray(E, dtype=float)
    weighted = sum(a * efficiency(m.efficiency, E_arr) for a, m in zip(model.alphas(), model.materials))
    out = Y * model.exposure_seconds * beta_K(constants, KEV) * E_arr ** (-2.0 / 3.0) * weighted
    return float(out) if np.ndim(E) == 0 else out


def _antiderivative_terms(coefficients, E):
    powers = np.arange(len(coefficients)) + 1.0 / 3.0
    return np.asarray(coefficients) * E**powers / powers


def bin_signal(edges, Y, model: SignalModel, constants: PhysicalConstants = CODATA2018) -> float:
    """Expected signal counts in the bin ``edges = (lo, hi)`` keV.

    No clamping happens here; the model guarantees non-negative efficiencies
    inside the analysis window.
    """
    lo, hi = float(edges[0]), float(edges[1])
    if not lo < hi:
        raise ValidationError(f"bin edges must satisfy lo < hi, got ({lo}, {hi})")
    if Y < 0:
        raise ValidationError("Y must be >= 0")
    total = 0.0
    for a, m in zip(model.alphas(), model.materials):
        if not m.efficiency.covers(lo, hi):
            raise OutOfRangeError(f"{m.name}: bin ({lo}, {hi}) outside efficiency range {m.efficiency.valid_range}")
        terms = _antiderivative_terms(m.efficiency.coefficients, hi) - _antiderivative_terms(m.efficiency.coefficients, lo)
        total += a * float(np.sum(terms))
    return Y * model.exposure_seconds * beta_K(constants, KEV) * total


def precompute_signal_column(edges, model: SignalModel, constants: PhysicalConstants = CODATA2018) -> np.ndarray:
    """Signal counts per unit Y in each bin, s_i, so that lambda_i = b_i + Y s_i."""
    edges = np.asarray(edges, dtype=float)
    if edges.ndim != 1 or len(edges) < 2:
        raise ValidationError("binning needs at least two edges")
    s = np.array([bin_signal((edges[k], edges[k + 1]), 1.0, model, constants) for k in range(len(edges) - 1)])
    s *= 1.0 + model.efficiency_systematic
    if np.any(s < 0):
        raise ValidationError("negative signal coefficient; check efficiency curves")
    return s


def fit_efficiency(energies, values, degree: int, valid_range=None) -> EfficiencyCurve:
    """Least-squares polynomial fit to sampled efficiencies (E in keV)."""
    energies = np.asarray(energies, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(energies) <= degree:
        raise ValidationError("need more samples than the polynomial degree")
    coeffs, (resid, rank, *_ ) = np.polynomial.polynomial.polyfit(energies, values, degree, full=True)
    if rank <= degree:
        raise ValidationError("ill-conditioned efficiency fit")
    if valid_range is None:
        valid_range = (float(energies.min()), float(energies.max()))
    return EfficiencyCurve(tuple(coeffs), tuple(valid_range))


# ---------------------------------------------------------------- config I/O


def _material_from_dict(d: dict) -> Material:
    try:
        eff = d["efficiency"]
        coeffs = tuple(eff["coefficients"])
        degree = eff.get("degree", len(coeffs) - 1)
        if degree != len(coeffs) - 1:
            raise ConfigError(f"{d.get('name')}: degree {degree} does not match {len(coeffs)} coefficients")
        errors = eff.get("errors")
        curve = EfficiencyCurve(
            coeffs,
            tuple(eff.get("valid_range_keV", DEFAULT_WINDOW)),
            tuple(errors) if errors is not None else None,
        )
        elements = tuple(
            ElementCount(
                symbol=e["symbol"],
                Z=int(e["Z"]),
                electrons_per_atom=int(e.get("electrons_per_atom", e["Z"])),
                molar_mass=float(e["molar_mass_g_mol"]),
                atoms_per_formula_unit=int(e.get("stoichiometry", 1)),
            )
            for e in d["elements"]
        )
        return Material(d["name"], float(d["mass_kg"]), elements, curve, d.get("note", ""))
    except KeyError as exc:
        raise ConfigError(f"material {d.get('name', '?')}: missing key {exc.args[0]!r}") from None


def model_from_dict(cfg: dict, window=None, exposure_seconds=None) -> SignalModel:
    if "components" not in cfg:
        raise ConfigError("materials configuration needs a 'components' list")
    materials = tuple(_material_from_dict(d) for d in cfg["components"])
    return SignalModel(
        materials,
        exposure_seconds=float(exposure_seconds or cfg.get("exposure_seconds", DEFAULT_EXPOSURE_S)),
        include_electron_term=bool(cfg.get("include_electron_term", False)),
        window=tuple(window or cfg.get("window_keV", DEFAULT_WINDOW)),
        efficiency_systematic=float(cfg.get("efficiency_systematic", 0.0)),
    )


def load_materials(path=None, window=None, exposure_seconds=None) -> SignalModel:
    """Load a materials file; ``None`` selects the shipped default setup."""
    if path is None:
        text = resources.files("rklimit").joinpath("data/materials_default.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path or 'default materials'}: line {exc.lineno}: {exc.msg}") from None
    return model_from_dict(cfg, window=window, exposure_seconds=exposure_seconds)


def default_binning(window=DEFAULT_WINDOW, width=5.0) -> np.ndarray:
    lo, hi = window
    n = int(round((hi - lo) / width))
    if n < 1 or abs(n * width - (hi - lo)) > 1e-9:
        raise ConfigError(f"bin width {width} keV does not tile window {window}")
    return lo + width * np.arange(n + 1)
