# cython: language_level=3
"""Compiled kernels; same signatures and results as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, INFINITY

cnp.import_array()

cdef int PRIOR_UNIFORM_Y = 0


cdef double _loglike(double y, const double[::1] n, const double[::1] b,
                     const double[::1] s, double log_factorial_sum) noexcept nogil:
    cdef Py_ssize_t i
    cdef double lam, acc = 0.0
    for i in range(n.shape[0]):
        lam = b[i] + y * s[i]
        if lam <= 0.0:
            if n[i] > 0.0:
                return -INFINITY
            continue
        acc += n[i] * log(lam) - lam
    return acc - log_factorial_sum


cdef double _log_target(double u, const double[::1] n, const double[::1] b,
                        const double[::1] s, double log_factorial_sum, int prior_kind,
                        double u_lo, double u_hi, double log_prior_norm) noexcept nogil:
    cdef double ll
    if u < u_lo or u > u_hi:
        return -INFINITY
    ll = _loglike(exp(u), n, b, s, log_factorial_sum)
    if prior_kind == PRIOR_UNIFORM_Y:
        return ll + log_prior_norm + u
    return ll + log_prior_norm - 0.5 * u


def loglike_grid(y, counts, background, signal, double log_factorial_sum):
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] n = np.ascontiguousarray(counts, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(background, dtype=np.float64)
    cdef const double[::1] s = np.ascontiguousarray(signal, dtype=np.float64)
    out = np.empty(yv.shape[0])
    cdef double[::1] ov = out
    cdef Py_ssize_t k
    with nogil:
        for k in range(yv.shape[0]):
            ov[k] = _loglike(yv[k], n, b, s, log_factorial_sum)
    return out


def log_target(double u, counts, background, signal, double log_factorial_sum,
               int prior_kind, double u_lo, double u_hi, double log_prior_norm):
    cdef const double[::1] n = np.ascontiguousarray(counts, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(background, dtype=np.float64)
    cdef const double[::1] s = np.ascontiguousarray(signal, dtype=np.float64)
    return _log_target(u, n, b, s, log_factorial_sum, prior_kind, u_lo, u_hi, log_prior_norm)


def mh_run(double u0, double logp0, steps, uniforms, counts, background, signal,
           double log_factorial_sum, int prior_kind, double u_lo, double u_hi,
           double log_prior_norm):
    cdef const double[::1] z = np.ascontiguousarray(steps, dtype=np.float64)
    cdef const double[::1] r = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef const double[::1] n = np.ascontiguousarray(counts, dtype=np.float64)
    cdef const double[::1] b = np.ascontiguousarray(background, dtype=np.float64)
    cdef const double[::1] s = np.ascontiguousarray(signal, dtype=np.float64)
    cdef Py_ssize_t k, n_steps = z.shape[0]
    samples = np.empty(n_steps)
    logp = np.empty(n_steps)
    cdef double[::1] sv = samples
    cdef double[::1] lv = logp
    cdef double u = u0, lp = logp0, prop, lp_prop, uk
    cdef long accepted = 0
    with nogil:
        for k in range(n_steps):
            prop = u + z[k]
            lp_prop = _log_target(prop, n, b, s, log_factorial_sum, prior_kind, u_lo, u_hi, log_prior_norm)
            if lp_prop > -INFINITY:
                uk = r[k]
                if lp_prop >= lp or uk == 0.0 or log(uk) < lp_prop - lp:
                    u = prop
                    lp = lp_prop
                    accepted += 1
            sv[k] = u
            lv[k] = lp
    return samples, logp, accepted
