"""Posterior of the yield Y = 1/R_K**2.

Two independent routes: a deterministic grid quadrature that also yields the
evidence, and multi-chain random-walk Metropolis in u = ln Y.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks
from scipy.special import gammaln

from . import kernels
from .errors import ConfigError, ValidationError

UNIFORM_RK = "uniform_in_RK"
UNIFORM_Y = "uniform_in_Y"
_PRIOR_CODES = {UNIFORM_Y: kernels.PRIOR_UNIFORM_Y, UNIFORM_RK: kernels.PRIOR_UNIFORM_RK}

RHAT_THRESHOLD = 1.01
TARGET_ACCEPTANCE = 0.4
ADAPT_BATCH = 200
WIDE_FRACTION = 0.05
WIDE_SCALE = 0.1  # of the prior support width in ln Y
CHUNK = 1 << 16


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PriorSpec:
    kind: str = UNIFORM_Y
    rk_range: tuple[float, float] = (1e-10, 1e9)

    def __post_init__(self):
        if self.kind not in _PRIOR_CODES:
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        lo, hi = self.rk_range
        if not 0 < lo < hi:
            raise ConfigError(f"prior R_K range must satisfy 0 < min < max, got {self.rk_range}")

    @property
    def y_support(self) -> tuple[float, float]:
        lo, hi = self.rk_range
        return 1.0 / hi**2, 1.0 / lo**2

    @property
    def code(self) -> int:
        return _PRIOR_CODES[self.kind]

    @property
    def log_norm(self) -> float:
        """Log of the constant multiplying Y**0 (flat) or Y**-1.5 (flat in R_K)."""
        if self.kind == UNIFORM_Y:
            y_lo, y_hi = self.y_support
            return -math.log(y_hi - y_lo)
        lo, hi = self.rk_range
        return math.log(0.5) - math.log(hi - lo)


@dataclass(frozen=True)
class LikelihoodInputs:
    counts: np.ndarray
    background: np.ndarray
    signal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.counts, dtype=float)
        b = np.asarray(self.background, dtype=float)
        s = np.asarray(self.signal, dtype=float)
        if not (n.shape == b.shape == s.shape) or n.ndim != 1:
            raise ValidationError("counts, background and signal must be 1-D of equal length")
        if np.any(b < 0) or np.any(s < 0) or np.any(n < 0):
            raise ValidationError("counts, background and signal must be non-negative")
        for name, arr in (("counts", n), ("background", b), ("signal", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_lfs", float(np.sum(gammaln(n + 1.0))))

    @property
    def log_factorial_sum(self) -> float:
        return self._lfs


@dataclass(frozen=True)
class GridSpec:
    n_log: int = 20000
    n_refine: int = 200001
    tail: float = 45.0

    def __post_init__(self):
        if self.n_log + self.n_refine < 1000:
            raise ConfigError("grid needs at least 1000 nodes")
        if self.n_log < 2 or self.n_refine < 2 or self.tail <= 0:
            raise ConfigError("invalid grid specification")


@dataclass(frozen=True)
class PosteriorGrid:
    y_nodes: np.ndarray
    density: np.ndarray
    log_norm: float
    log_post: np.ndarray  # unnormalised log density in Y at the nodes
    prior: PriorSpec

    def cumulative(self) -> np.ndarray:
        dy = np.diff(self.y_nodes)
        return np.concatenate([[0.0], np.cumsum(0.5 * dy * (self.density[1:] + self.density[:-1]))])


@dataclass(frozen=True)
class ChainSet:
    chains: np.ndarray  # (n_chains, n_samples) of Y
    log_post: np.ndarray  # unnormalised log density in Y per sample
    seeds: tuple
    acceptance_rates: tuple[float, ...]
    proposal_scales: tuple[float, ...]
    r_hat: float
    burn_in: float
    prior: PriorSpec
    converged: bool

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def n_samples(self) -> int:
        return self.chains.shape[1]

    def pooled(self) -> np.ndarray:
        return self.chains.ravel()


@dataclass(frozen=True)
class MCMCSettings:
    n_chains: int = 4
    n_samples: int = 1_000_000
    burn_in: float = 0.1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_chains < 1 or self.n_samples < 1 or self.workers < 1:
            raise ConfigError("chains, samples and workers must be positive")
        if not 0 <= self.burn_in < 1:
            raise ConfigError("burn_in must lie in [0, 1)")


# --------------------------------------------------------------- densities


def log_likelihood(Y, inputs: LikelihoodInputs):
    """Poisson log-likelihood, scalar or vectorised over ``Y``."""
    y = np.atleast_1d(np.asarray(Y, dtype=float))
    if np.any(y < 0):
        raise ValidationError("Y must be >= 0")
    out = kernels.loglike_grid(y, inputs.counts, inputs.background, inputs.signal, inputs.log_factorial_sum)
    return float(out[0]) if np.ndim(Y) == 0 else out


def log_prior(Y, prior: PriorSpec):
    """Log prior density in Y; -inf outside the support."""
    y = np.asarray(Y, dtype=float)
    y_lo, y_hi = prior.y_support
    inside = (y >= y_lo) & (y <= y_hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        if prior.kind == UNIFORM_Y:
            val = np.full(y.shape, prior.log_norm)
        else:
            val = prior.log_norm - 1.5 * np.log(y)
    out = np.where(inside, val, -np.inf)
    return float(out) if out.ndim == 0 else out


def _log_post(y, inputs, prior):
    return log_likelihood(y, inputs) + log_prior(y, prior)


# --------------------------------------------------------------- grid route


def _crossing(f, a, b, target):
    """Bisection in ln Y for f = target between a (f < target) and b."""
    ua, ub = math.log(a), math.log(b)
    for _ in range(200):
        um = 0.5 * (ua + ub)
        if um in (ua, ub):
            break
        if f(math.exp(um)) < target:
            ua = um
        else:
            ub = um
    return math.exp(ub)


def _refine_max(f, coarse, lp, i):
    """Golden-section refinement of the maximum around coarse node i."""
    if i == 0 or i == len(coarse) - 1:
        return lp[i]
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda u: -f(math.exp(u)), bounds=(math.log(coarse[i - 1]), math.log(coarse[i + 1])),
                          method="bounded", options={"xatol": 1e-12})
    return max(lp[i], -res.fun)


def grid_posterior(inputs: LikelihoodInputs, prior: PriorSpec = PriorSpec(), grid: GridSpec = GridSpec()) -> PosteriorGrid:
    """Normalised posterior density of Y on a hybrid grid.

    Log-spaced nodes cover the whole prior support; a uniform refinement grid
    covers the region where the log posterior is within ``grid.tail`` of its
    maximum.  Log-spaced nodes are kept inside the refinement region only
    where they are finer than the uniform spacing.  Everything is evaluated
    in log space with max subtraction.
    """
    y_lo, y_hi = prior.y_support
    coarse = np.geomspace(y_lo, y_hi, grid.n_log)
    coarse[0], coarse[-1] = y_lo, y_hi
    lp = _log_post(coarse, inputs, prior)
    if not np.any(np.isfinite(lp)):
        raise ValidationError("posterior vanishes on the whole prior support")
    f = lambda y: float(_log_post(np.array([y]), inputs, prior)[0])
    i_max = int(np.argmax(lp))
    threshold = _refine_max(f, coarse, lp, i_max) - grid.tail
    above = np.nonzero(lp >= threshold)[0]
    i0, i1 = int(above[0]), int(above[-1])
    a = y_lo if i0 == 0 else _crossing(f, coarse[i0 - 1], coarse[i0], threshold)
    b = y_hi if i1 == len(coarse) - 1 else _crossing(lambda y: -f(y), coarse[i1], coarse[i1 + 1], -threshold)
    fine = np.linspace(a, b, grid.n_refine)
    h = (b - a) / (grid.n_refine - 1)
    ratio = coarse[1] / coarse[0] - 1.0
    y_switch = min(max(a, h / ratio), b)
    keep = (coarse < a) | (coarse > b) | ((coarse >= a) & (coarse < y_switch))
    nodes = np.union1d(coarse[keep], fine[fine >= y_switch])
    lp = _log_post(nodes, inputs, prior)
    top = float(np.max(lp))
    w = np.exp(lp - top)
    z = float(np.sum(0.5 * np.diff(nodes) * (w[1:] + w[:-1])))
    density = w / z
    return PosteriorGrid(nodes, density, top + math.log(z), lp, prior)


def grid_modes(posterior: PosteriorGrid, rel_tol: float = 1e-10) -> tuple[float, list[float]]:
    """Global mode (grid argmax) and any other local maxima of the density.

    The log density is quantised to ``rel_tol * max(1, |max|)`` first so that
    rounding noise on flat plateaus is not reported; a plateau counts as one
    maximum and ties resolve to the smallest Y.
    """
    lp = posterior.log_post
    finite = np.isfinite(lp)
    top = float(np.max(lp[finite]))
    tol = rel_tol * max(1.0, abs(top))
    q = np.round((np.where(finite, lp, top - 1e6) - top) / tol)
    i_global = int(np.argmax(q))
    floor = float(np.min(q)) - 10.0
    padded = np.concatenate([[floor], q, [floor]])
    peaks, props = find_peaks(padded, prominence=1.5, plateau_size=1)
    local = []
    for p, left, right in zip(peaks - 1, props["left_edges"] - 1, props["right_edges"] - 1):
        if left <= i_global <= right:
            continue
        local.append(float(posterior.y_nodes[left]))
    return float(posterior.y_nodes[i_global]), local


# --------------------------------------------------------------- MCMC route


def _chain_start(inputs, prior, rng):
    y_lo, y_hi = prior.y_support
    u_lo, u_hi = math.log(y_lo), math.log(y_hi)
    scan = np.linspace(u_lo, u_hi, 513)
    vals = [kernels.log_target(u, inputs.counts, inputs.background, inputs.signal, inputs.log_factorial_sum,
                               prior.code, u_lo, u_hi, prior.log_norm) for u in scan]
    u0 = float(scan[int(np.argmax(vals))]) + rng.normal(0.0, 1.0)
    return min(max(u0, u_lo), u_hi)


def _draw_steps(rng, k, sigma, wide_sigma):
    """Symmetric two-scale increments: mostly local, a fraction ``WIDE_FRACTION`` wide."""
    z = rng.standard_normal(k)
    wide = rng.random(k) < WIDE_FRACTION
    return np.where(wide, wide_sigma, sigma) * z, wide


def _run_chain(inputs, prior, settings, seed_seq):
    rng = np.random.Generator(np.random.Philox(seed_seq))
    y_lo, y_hi = prior.y_support
    u_lo, u_hi = math.log(y_lo), math.log(y_hi)
    wide_sigma = WIDE_SCALE * (u_hi - u_lo)
    args = (inputs.counts, inputs.background, inputs.signal, inputs.log_factorial_sum, prior.code, u_lo, u_hi,
            prior.log_norm)
    u = _chain_start(inputs, prior, rng)
    lp = kernels.log_target(u, *args)
    log_sigma = 0.0
    n_burn = int(round(settings.burn_in * settings.n_samples))
    # Robbins-Monro adaptation of the local scale on its own acceptance, frozen afterwards
    done = 0
    batch = 0
    while done < n_burn:
        k = min(ADAPT_BATCH, n_burn - done)
        steps, wide = _draw_steps(rng, k, math.exp(log_sigma), wide_sigma)
        r = rng.random(k)
        samples, logp, _ = kernels.mh_run(u, lp, steps, r, *args)
        moved = np.diff(np.concatenate([[u], samples])) != 0.0
        local = ~wide
        if np.any(local):
            log_sigma += (moved[local].mean() - TARGET_ACCEPTANCE) * 2.0 / math.sqrt(batch + 1)
        u, lp = float(samples[-1]), float(logp[-1])
        done += k
        batch += 1
    sigma = math.exp(log_sigma)
    out_u = np.empty(settings.n_samples)
    out_lp = np.empty(settings.n_samples)
    n_local = n_local_acc = 0
    for start in range(0, settings.n_samples, CHUNK):
        k = min(CHUNK, settings.n_samples - start)
        steps, wide = _draw_steps(rng, k, sigma, wide_sigma)
        r = rng.random(k)
        samples, logp, _ = kernels.mh_run(u, lp, steps, r, *args)
        moved = np.diff(np.concatenate([[u], samples])) != 0.0
        n_local += int(np.count_nonzero(~wide))
        n_local_acc += int(np.count_nonzero(moved & ~wide))
        out_u[start:start + k] = samples
        out_lp[start:start + k] = logp
        u, lp = float(samples[-1]), float(logp[-1])
    return out_u, out_lp, n_local_acc / max(n_local, 1), sigma


def run_mcmc(inputs: LikelihoodInputs, prior: PriorSpec = PriorSpec(), settings: MCMCSettings = MCMCSettings()) -> ChainSet:
    """Multi-chain Metropolis-Hastings in u = ln Y.

    The proposal is a symmetric Gaussian mixture: the local scale is adapted
    during burn-in toward acceptance 0.4 and then frozen; a small fraction of
    wide jumps lets chains move between separated modes.  Reported acceptance
    rates refer to the local component.

    ``settings.n_samples`` are retained per chain after ``burn_in *
    n_samples`` adaptation steps.  Each chain owns a Philox stream spawned
    from ``settings.seed``, so results do not depend on ``workers``.
    """
    children = np.random.SeedSequence(settings.seed).spawn(settings.n_chains)
    if settings.workers > 1:
        with ThreadPoolExecutor(settings.workers) as pool:
            results = list(pool.map(lambda ss: _run_chain(inputs, prior, settings, ss), children))
    else:
        results = [_run_chain(inputs, prior, settings, ss) for ss in children]
    u = np.array([r[0] for r in results])
    lp_u = np.array([r[1] for r in results])
    r_hat = gelman_rubin(u) if settings.n_chains >= 2 and settings.n_samples >= 100 else math.nan
    converged = bool(np.isfinite(r_hat) and r_hat <= RHAT_THRESHOLD)
    if not converged:
        warnings.warn(f"MCMC not converged: r_hat = {r_hat:.4f}", ConvergenceWarning, stacklevel=2)
    return ChainSet(
        chains=np.exp(u),
        log_post=lp_u - u,
        seeds=(settings.seed, settings.n_chains),
        acceptance_rates=tuple(r[2] for r in results),
        proposal_scales=tuple(r[3] for r in results),
        r_hat=float(r_hat),
        burn_in=settings.burn_in,
        prior=prior,
        converged=converged,
    )


def gelman_rubin(chains) -> float:
    """Split-chain potential scale reduction factor.

    Returns NaN when the within-chain variance vanishes.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 100:
        raise ValidationError("need >= 2 chains of >= 100 samples")
    half = x.shape[1] // 2
    split = np.concatenate([x[:, :half], x[:, half:2 * half]])
    n = split.shape[1]
    means = split.mean(axis=1)
    w = split.var(axis=1, ddof=1).mean()
    if not w > 0:
        return math.nan
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))
