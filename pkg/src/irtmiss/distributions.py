"""Seedable random primitives and normal-family special functions.

Everything downstream (the Gibbs sampler, the marginal-likelihood optimizer,
the simulator) draws its randomness through :class:`RandomStream` so that a
run is a pure function of (seed, stream_id). The truncated-normal sampler
uses inverse-CDF transforms in the central regime and rejection sampling in
the far tails, so one-sided truncations with the mean many standard
deviations outside the support still return valid in-bounds draws.
"""

from __future__ import annotations

from typing import Union

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr, ndtri

ArrayLike = Union[float, np.ndarray]

# Standardized bound beyond which the inverse-CDF transform runs out of
# floating-point resolution and rejection sampling takes over.
_TAIL_THRESHOLD = 5.0

# Probabilities that later enter logarithms are clamped away from 0 and 1.
_P_FLOOR = 1e-300
_P_CEIL = 1.0 - 1e-16

_MAX_REJECTION_ROUNDS = 10_000


class RandomStream:
    """Counter-based RNG stream keyed by (seed, stream_id).

    Identical (seed, stream_id) pairs replay an identical draw sequence;
    distinct stream_ids give statistically independent streams. A stream is
    owned by exactly one sequential task (one chain, one replication); use
    :meth:`child` to fan out further independent streams deterministically.
    """

    def __init__(self, seed: int, stream_id: int = 0, _path: tuple[int, ...] | None = None) -> None:
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._path = (self.stream_id,) if _path is None else _path
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, k: int) -> "RandomStream":
        """Derived independent stream; deterministic in (seed, path, k)."""
        return RandomStream(self.seed, k, _path=self._path + (int(k),))

    def uniform(self, size=None) -> ArrayLike:
        return self.gen.random(size)

    def normal(self, size=None) -> ArrayLike:
        return self.gen.standard_normal(size)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RandomStream(seed={self.seed}, stream_id={self.stream_id}, path={self._path})"


def std_normal_cdf(x: ArrayLike) -> ArrayLike:
    """Standard normal CDF, accurate to well below 1e-12 absolute."""
    return ndtr(x)


def clamped_normal_cdf(x: ArrayLike) -> ArrayLike:
    """CDF clamped to [1e-300, 1 - 1e-16] for use inside logarithms."""
    return np.clip(ndtr(x), _P_FLOOR, _P_CEIL)


def std_normal_logcdf(x: ArrayLike) -> ArrayLike:
    """log Phi(x), tail-stable (no spurious -inf for finite x)."""
    return log_ndtr(x)


def sample_bernoulli(p: ArrayLike, rng: RandomStream) -> ArrayLike:
    """Bernoulli(p) draws; returns int array (or int for scalar p)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("Bernoulli probability outside [0, 1]")
    draws = (rng.uniform(size=p.shape if p.ndim else None) < p).astype(np.int8)
    if p.ndim == 0:
        return int(draws)
    return draws


def inverse_gamma_logpdf(x: ArrayLike, shape: float, scale: float) -> ArrayLike:
    """log density of InverseGamma(shape, scale) at x > 0.

    logpdf = shape*log(scale) - logGamma(shape) - (shape+1)*log(x) - scale/x
    """
    x = np.asarray(x, dtype=np.float64)
    if shape <= 0.0 or scale <= 0.0:
        raise ValueError("inverse gamma shape and scale must be positive")
    if np.any(x <= 0.0):
        raise ValueError("inverse gamma density requires x > 0")
    out = shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    if out.ndim == 0:
        return float(out)
    return out


def bivariate_conditional(
    mu: ArrayLike, sigma: ArrayLike, given_component: int, given_value: float
) -> tuple[float, float]:
    """Conditional mean/variance of one component of a bivariate normal.

    Returns (cond_mean, cond_var) of the other component given that
    component ``given_component`` equals ``given_value``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if mu.shape != (2,) or sigma.shape != (2, 2):
        raise ValueError("mu must be length 2 and sigma 2x2")
    if not np.allclose(sigma, sigma.T, rtol=0.0, atol=1e-12):
        raise ValueError("sigma must be symmetric")
    if sigma[0, 0] <= 0.0 or sigma[1, 1] <= 0.0 or np.linalg.det(sigma) <= 0.0:
        raise ValueError("sigma must be positive definite")
    if given_component not in (0, 1):
        raise ValueError("given_component must be 0 or 1")
    g = given_component
    o = 1 - g
    cond_mean = mu[o] + sigma[o, g] / sigma[g, g] * (given_value - mu[g])
    cond_var = sigma[o, o] - sigma[o, g] ** 2 / sigma[g, g]
    return float(cond_mean), float(cond_var)


def _tail_rejection(lo: np.ndarray, hi: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Standard-normal draws on (lo, hi) with lo >= _TAIL_THRESHOLD.

    Exponential-proposal rejection (rate (lo + sqrt(lo^2+4))/2) for wide
    intervals, uniform-proposal rejection for narrow far-tail slivers.
    """
    lam = 0.5 * (lo + np.sqrt(lo * lo + 4.0))
    # hi = inf makes the product inf, selecting the exponential branch
    narrow = (hi - lo) * lam < 1.0
    out = np.empty_like(lo)
    todo = np.ones(lo.shape, dtype=bool)
    for _ in range(_MAX_REJECTION_ROUNDS):
        if not todo.any():
            return out
        idx = np.flatnonzero(todo)
        lo_t, hi_t, lam_t = lo.flat[idx], hi.flat[idx], lam.flat[idx]
        u1 = rng.uniform(size=idx.size)
        u2 = rng.uniform(size=idx.size)
        with np.errstate(divide="ignore"):
            log_u1 = np.log(u1)
            log_u2 = np.log(u2)
        prop_exp = lo_t - log_u1 / lam_t
        acc_exp = (prop_exp < hi_t) & (log_u2 <= -0.5 * (prop_exp - lam_t) ** 2)
        prop_uni = lo_t + (hi_t - lo_t) * u1
        acc_uni = log_u2 <= 0.5 * (lo_t * lo_t - prop_uni * prop_uni)
        narrow_t = narrow.flat[idx]
        prop = np.where(narrow_t, prop_uni, prop_exp)
        acc = np.where(narrow_t, acc_uni, acc_exp)
        acc &= (prop > lo_t) & (prop < hi_t)
        out.flat[idx[acc]] = prop[acc]
        todo.flat[idx[acc]] = False
    raise RuntimeError("truncated-normal tail rejection failed to terminate")


def _std_truncated_normal(alpha: np.ndarray, beta: np.ndarray, rng: RandomStream) -> np.ndarray:
    """Standard-normal draws truncated to (alpha, beta), elementwise."""
    # Mirror intervals lying in the positive half axis so the CDF keeps
    # floating-point resolution near the relevant bound.
    flip = alpha > 0.0
    a = np.where(flip, -beta, alpha)
    b = np.where(flip, -alpha, beta)
    x = np.empty_like(a)

    tail = b <= -_TAIL_THRESHOLD
    if tail.any():
        x[tail] = -_tail_rejection(-b[tail], -a[tail], rng)
    central = ~tail
    if central.any():
        ac, bc = a[central], b[central]
        pa = ndtr(ac)
        pb = ndtr(bc)
        u = pa + (pb - pa) * rng.uniform(size=ac.shape)
        u = np.clip(u, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
        xc = ndtri(u)
        # enforce strict in-bounds despite rounding at the transform edges
        xc = np.clip(xc, np.nextafter(ac, np.inf), np.nextafter(bc, -np.inf))
        x[central] = xc
    return np.where(flip, -x, x)


def sample_truncated_normal(
    mean: ArrayLike,
    sd: ArrayLike,
    lower: ArrayLike,
    upper: ArrayLike,
    rng: RandomStream,
) -> ArrayLike:
    """Draw from N(mean, sd^2) truncated to the open interval (lower, upper).

    All arguments broadcast; bounds may be -inf/+inf. The returned value is
    strictly inside (lower, upper) even when both bounds sit more than
    8 standard deviations from the mean.
    """
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if np.any(sd <= 0.0):
        raise ValueError("sd must be positive")
    if not np.all(lower < upper):
        raise ValueError("degenerate truncation interval: require lower < upper")
    mean, sd, lower, upper = np.broadcast_arrays(mean, sd, lower, upper)
    scalar = mean.ndim == 0
    mean = np.atleast_1d(mean).astype(np.float64)
    sd = np.atleast_1d(sd).astype(np.float64)
    lower = np.atleast_1d(lower)
    upper = np.atleast_1d(upper)
    with np.errstate(invalid="ignore"):
        alpha = (lower - mean) / sd
        beta = (upper - mean) / sd
    # -inf/+inf bounds standardize to -inf/+inf regardless of mean and sd
    alpha = np.where(np.isneginf(lower), -np.inf, alpha)
    beta = np.where(np.isposinf(upper), np.inf, beta)
    z = _std_truncated_normal(alpha, beta, rng)
    x = mean + sd * z
    # rescaling can round onto a bound; nudge back strictly inside
    x = np.clip(x, np.nextafter(lower, np.inf), np.nextafter(upper, -np.inf))
    if scalar:
        return float(x[0])
    return x
