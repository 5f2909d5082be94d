"""Upper limits, credible regions, R_K bounds and coverage studies."""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ValidationError
from .inference import (
    UNIFORM_Y,
    ChainSet,
    GridSpec,
    LikelihoodInputs,
    PosteriorGrid,
    PriorSpec,
    grid_modes,
    grid_posterior,
)
from .spectrum import BackgroundModel, simulate_toy, toy_seed

SUMMARY_LEVELS = (0.66, 0.90, 0.95)
RK_THEORY_UPPER = 1.98  # m
COVERAGE_GRID = GridSpec(n_log=4000, n_refine=20001)


class Verdict(str, enum.Enum):
    MODEL_EXCLUDED = "model_excluded"
    WINDOW_REMAINS = "window_remains"


@dataclass(frozen=True)
class CredibleSummary:
    global_mode: float
    local_modes: list[float]
    intervals: dict[float, list[tuple[float, float]]]
    upper_limits: dict[float, float]


@dataclass(frozen=True)
class LimitReport:
    y_upper: float
    rk_lower: float
    level: float
    rk_theory_upper: float
    verdict: Verdict
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rk_lower != rk_lower_limit(self.y_upper):
            raise ValidationError("rk_lower must equal 1/sqrt(y_upper)")
        if self.verdict != exclusion_verdict(self.rk_lower, self.rk_theory_upper):
            raise ValidationError("verdict inconsistent with limits")


def _check_level(level):
    if not 0.0 < level < 1.0:
        raise DomainError(f"probability level must lie in (0, 1), got {level}")


def _invert_trapezoid(x, f, cum, target):
    """Solve cumulative(x) = target for a piecewise-linear density."""
    k = int(np.searchsorted(cum, target, side="left"))
    if k == 0:
        return float(x[0])
    if k >= len(x):
        return float(x[-1])
    k -= 1
    h = x[k + 1] - x[k]
    f0, f1 = f[k], f[k + 1]
    need = target - cum[k]
    slope = (f1 - f0) / h
    if abs(slope) * h < 1e-12 * max(f0, f1, 1e-300):
        t = need / f0 if f0 > 0 else 0.0
    else:
        # f0 t + slope t^2 / 2 = need, stable root
        disc = max(f0 * f0 + 2.0 * slope * need, 0.0)
        t = 2.0 * need / (f0 + math.sqrt(disc)) if f0 + math.sqrt(disc) > 0 else 0.0
    return float(x[k] + min(max(t, 0.0), h))


def upper_limit(posterior, level: float = 0.95) -> float:
    """Smallest L with P(Y <= L | data) = level.

    Grid posteriors are inverted exactly on the trapezoid cumulative; chain
    sets use the empirical quantile of the pooled samples.
    """
    _check_level(level)
    if isinstance(posterior, ChainSet):
        return float(np.quantile(posterior.pooled(), level))
    if isinstance(posterior, PosteriorGrid):
        cum = posterior.cumulative()
        return _invert_trapezoid(posterior.y_nodes, posterior.density, cum, level * cum[-1])
    raise TypeError(f"unsupported posterior type {type(posterior).__name__}")


def _mass_above(x, f, t):
    """Mass of the piecewise-linear density above threshold t, and its intervals."""
    mass = 0.0
    intervals = []
    start = None
    for k in range(len(x) - 1):
        x0, x1, f0, f1 = x[k], x[k + 1], f[k], f[k + 1]
        in0, in1 = f0 >= t, f1 >= t
        if in0 and in1:
            mass += 0.5 * (x1 - x0) * (f0 + f1)
            if start is None:
                start = x0
            continue
        if not in0 and not in1:
            continue
        xc = x0 + (t - f0) * (x1 - x0) / (f1 - f0)
        if in0:
            mass += 0.5 * (xc - x0) * (f0 + t)
            intervals.append((float(start if start is not None else x0), float(xc)))
            start = None
        else:
            mass += 0.5 * (x1 - xc) * (t + f1)
            start = xc
    if start is not None:
        intervals.append((float(start), float(x[-1])))
    return mass, intervals


def hpd_region(posterior: PosteriorGrid, level: float) -> list[tuple[float, float]]:
    """Highest-posterior-density region as a union of Y intervals."""
    _check_level(level)
    x, f = posterior.y_nodes, posterior.density
    total = float(posterior.cumulative()[-1])
    # vectorised mass-above-threshold for the bisection
    dx = np.diff(x)

    def mass(t):
        f0, f1 = f[:-1], f[1:]
        both = (f0 >= t) & (f1 >= t)
        m = np.sum(0.5 * dx[both] * (f0[both] + f1[both]))
        cross = (f0 >= t) != (f1 >= t)
        g0, g1, d = f0[cross], f1[cross], dx[cross]
        frac = np.where(g0 >= t, (g0 - t) / (g0 - g1), (g1 - t) / (g1 - g0))
        hi = np.maximum(g0, g1)
        return m + np.sum(0.5 * d * frac * (hi + t))

    lo_t, hi_t = 0.0, float(np.max(f))
    target = level * total
    for _ in range(200):
        mid = 0.5 * (lo_t + hi_t)
        if mid in (lo_t, hi_t):
            break
        if mass(mid) >= target:
            lo_t = mid
        else:
            hi_t = mid
    return _mass_above(x, f, lo_t)[1]


def credible_summary(posterior: PosteriorGrid, levels=SUMMARY_LEVELS) -> CredibleSummary:
    global_mode, local = grid_modes(posterior)
    return CredibleSummary(
        global_mode=global_mode,
        local_modes=local,
        intervals={lv: hpd_region(posterior, lv) for lv in levels},
        upper_limits={lv: upper_limit(posterior, lv) for lv in levels},
    )


def rk_lower_limit(y_upper: float) -> float:
    """R_K = 1/sqrt(Y)."""
    if not y_upper > 0:
        raise DomainError("Y must be > 0")
    return 1.0 / math.sqrt(y_upper)


def y_from_rk(r_k: float) -> float:
    """Y = 1/R_K**2."""
    if not r_k > 0:
        raise DomainError("R_K must be > 0")
    return 1.0 / (r_k * r_k)


def rk_posterior(posterior: PosteriorGrid) -> tuple[np.ndarray, np.ndarray]:
    """Posterior of R_K on the mapped nodes, ascending in R_K."""
    y = posterior.y_nodes[::-1]
    r = 1.0 / np.sqrt(y)
    density = posterior.density[::-1] * 2.0 * y**1.5
    return r, density


def rk_lower_quantile(posterior: PosteriorGrid, level: float = 0.95) -> float:
    """R such that P(R_K >= R | data) = level, computed in R_K directly."""
    _check_level(level)
    r, f = rk_posterior(posterior)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(r) * (f[1:] + f[:-1]))])
    return _invert_trapezoid(r, f, cum, (1.0 - level) * cum[-1])


def exclusion_verdict(rk_lower: float, rk_theory_upper: float = RK_THEORY_UPPER) -> Verdict:
    """Excluded iff the experimental lower bound strictly exceeds the theoretical upper bound."""
    if not (rk_lower > 0 and rk_theory_upper > 0):
        raise DomainError("bounds must be > 0")
    return Verdict.MODEL_EXCLUDED if rk_lower > rk_theory_upper else Verdict.WINDOW_REMAINS


def make_report(y_upper, level, rk_theory_upper=RK_THEORY_UPPER, provenance=None) -> LimitReport:
    rk = rk_lower_limit(y_upper)
    return LimitReport(y_upper, rk, level, rk_theory_upper, exclusion_verdict(rk, rk_theory_upper), provenance or {})


# ------------------------------------------------------------ coverage


@dataclass(frozen=True)
class CoverageResult:
    fraction: float
    n_covered: int
    n_toys: int
    stderr: float
    level: float
    y_true: float
    limits: np.ndarray

    def as_dict(self):
        return {
            "fraction": self.fraction,
            "n_covered": self.n_covered,
            "n_toys": self.n_toys,
            "stderr": self.stderr,
            "level": self.level,
            "y_true": self.y_true,
        }


def toy_limits(background: BackgroundModel, signal_column, y_true, n_toys, level, seed,
               prior=None, grid=COVERAGE_GRID, workers=1, first_toy=0) -> np.ndarray:
    """Grid upper limits for a toy ensemble; toy k uses seed stream (seed, k)."""
    prior = prior or PriorSpec(UNIFORM_Y)
    s = np.asarray(signal_column, dtype=float)

    def one(k):
        toy = simulate_toy(background, y_true, s, toy_seed(seed, k))
        inputs = LikelihoodInputs(toy.counts, background.expected, s)
        return upper_limit(grid_posterior(inputs, prior, grid), level)

    idx = range(first_toy, first_toy + n_toys)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return np.array(list(pool.map(one, idx)))
    return np.array([one(k) for k in idx])


def median_sensitivity(background, signal_column, n_toys=200, level=0.95, seed=0, **kw) -> float:
    """Median upper limit over background-only toys."""
    if n_toys < 1:
        raise ValidationError("n_toys must be >= 1")
    return float(np.median(toy_limits(background, signal_column, 0.0, n_toys, level, seed, **kw)))


def coverage_study(background: BackgroundModel, signal_column, y_true: float, n_toys: int, level: float = 0.95,
                   seed: int = 0, **kw) -> CoverageResult:
    """Fraction of toys whose flat-in-Y upper limit is >= y_true."""
    _check_level(level)
    if n_toys < 100:
        raise ValidationError("coverage study needs n_toys >= 100")
    limits = toy_limits(background, signal_column, y_true, n_toys, level, seed, **kw)
    covered = int(np.sum(limits >= y_true))
    p = covered / n_toys
    return CoverageResult(p, covered, n_toys, math.sqrt(p * (1 - p) / n_toys), level, float(y_true), limits)
