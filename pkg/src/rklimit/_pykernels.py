"""Pure-Python kernels; reference behaviour for the compiled twin."""
import math

import numpy as np

PRIOR_UNIFORM_Y = 0
PRIOR_UNIFORM_RK = 1


def loglike_grid(y, counts, background, signal, log_factorial_sum):
    """Poisson log-likelihood at every Y in ``y``.

    Terms with zero expectation contribute 0 when the count is 0 and make the
    result -inf otherwise.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(counts, dtype=float)
    b = np.asarray(background, dtype=float)
    s = np.asarray(signal, dtype=float)
    out = np.empty(len(y))
    for k in range(len(y)):
        out[k] = _loglike(y[k], n, b, s, log_factorial_sum)
    return out


def _loglike(y, n, b, s, log_factorial_sum):
    lam = b + y * s
    zero = lam <= 0.0
    if np.any(zero):
        if np.any(n[zero] > 0):
            return -math.inf
        lam = np.where(zero, 1.0, lam)
        return float(np.sum(np.where(zero, 0.0, n * np.log(lam) - lam))) - log_factorial_sum
    return float(np.sum(n * np.log(lam) - lam)) - log_factorial_sum


def log_target(u, n, b, s, log_factorial_sum, prior_kind, u_lo, u_hi, log_prior_norm):
    """Log posterior density of u = ln Y, Jacobian included."""
    if u < u_lo or u > u_hi:
        return -math.inf
    ll = _loglike(math.exp(u), n, b, s, log_factorial_sum)
    if prior_kind == PRIOR_UNIFORM_Y:
        return ll + log_prior_norm + u
    return ll + log_prior_norm - 0.5 * u


def mh_run(u0, logp0, steps, uniforms, counts, background, signal,
           log_factorial_sum, prior_kind, u_lo, u_hi, log_prior_norm):
    """Metropolis in u = ln Y with pre-drawn symmetric increments.

    Consumes one increment and one uniform per step, so the output is a pure
    function of the supplied random numbers.

    Returns
    -------
    samples, logp : ndarray
        Chain state and log target after each step.
    n_accepted : int
    """
    n = np.asarray(counts, dtype=float)
    b = np.asarray(background, dtype=float)
    s = np.asarray(signal, dtype=float)
    n_steps = len(steps)
    samples = np.empty(n_steps)
    logp = np.empty(n_steps)
    u, lp = float(u0), float(logp0)
    accepted = 0
    for k in range(n_steps):
        prop = u + steps[k]
        lp_prop = log_target(prop, n, b, s, log_factorial_sum, prior_kind, u_lo, u_hi, log_prior_norm)
        if lp_prop > -math.inf:
            uk = uniforms[k]
            if lp_prop >= lp or (uk > 0.0 and math.log(uk) < lp_prop - lp) or uk == 0.0:
                u, lp = prop, lp_prop
                accepted += 1
        samples[k] = u
        logp[k] = lp
    return samples, logp, accepted
