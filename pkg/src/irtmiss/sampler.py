"""Data-augmented Gibbs/MH sampler for the selection-model IRT.

Each sweep executes thirteen steps in a fixed order: (1) augment responses
with truncated normals Z, (2) augment missingness with truncated normals W,
(3) abilities theta, (4) discriminations a, (5) difficulties b, (6) impute
missing responses Y (jointly with the Z and W cells they govern, so the
augmented state stays consistent), (7) missingness traits tau, (8) item
missingness propensities zeta, (9)-(11) regression coefficients gamma0,
gamma1, gamma2, and, in nonignorable mode, (12)-(13) random-walk
Metropolis-Hastings updates of sigma_theta_tau and sigma_tau_sq under the
positive-definiteness truncation. All full conditionals are conjugate
(truncated) normals thanks to the probit augmentation.

A chain is a pure function of (data, config, chain_id): replaying the same
seed reproduces every draw bit for bit.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from . import diagnostics, selection
from .distributions import (
    RandomStream,
    clamped_normal_cdf,
    inverse_gamma_logpdf,
    sample_truncated_normal,
    std_normal_logcdf,
)
from .model import (
    NONIGNORABLE,
    DataError,
    Dataset,
    ItemParams,
    ModelSpec,
    PersonParams,
    StructuralParams,
)

# Internal third mode: plain 2PNO on complete data (steps 1, 3, 4, 5 only),
# used by the listwise-deletion baseline.
IRT_ONLY = "irt_only"


@dataclass
class PriorSpec:
    """Prior hyperparameters; the defaults are the reference settings.

    a_j ~ N(mu_a, var_a) I(a>0), b_j ~ N(mu_b, var_b),
    zeta_j ~ N(mu_zeta, var_zeta), gamma0 ~ N I(<0), gamma1 ~ N I(>0),
    gamma2 ~ N I(<0), sigma_theta_tau ~ Uniform(0, 1),
    sigma_tau_sq ~ InverseGamma(ig_shape, ig_scale).
    """

    mu_a: float = 0.0
    var_a: float = 1.0
    mu_b: float = 0.0
    var_b: float = 1.0
    mu_zeta: float = 0.0
    var_zeta: float = 1.0
    mu_gamma0: float = 0.0
    var_gamma0: float = 1.0
    mu_gamma1: float = 0.0
    var_gamma1: float = 1.0
    mu_gamma2: float = 0.0
    var_gamma2: float = 1.0
    ig_shape: float = 0.00005
    ig_scale: float = 0.00005

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SamplerConfig:
    n_iterations: int = 20_000
    burn_in: int = 15_000
    thin: int = 1
    n_chains: int = 1
    seed: int = 0
    proposal_var_s01: float = 0.01
    proposal_var_s02: float = 0.01
    priors: PriorSpec = field(default_factory=PriorSpec)
    store_person_draws: bool = False
    jitter_starts: bool = True

    def validate(self) -> None:
        if self.n_iterations < 1 or not 0 <= self.burn_in < self.n_iterations:
            raise ValueError("require 0 <= burn_in < n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if self.proposal_var_s01 <= 0.0 or self.proposal_var_s02 <= 0.0:
            raise ValueError("proposal variances must be positive")

    @property
    def n_retained(self) -> int:
        return -((self.n_iterations - self.burn_in) // -self.thin)


@dataclass
class AugmentedState:
    """Latent normals Z (responses), W (missingness), and the imputed Y matrix.

    Invariants: Z_ij >= 0 iff Y_ij = 1, W_ij >= 0 iff R_ij = 1.
    """

    Z: np.ndarray
    W: np.ndarray
    y_imputed: np.ndarray

    def check_consistency(self, data: Dataset) -> bool:
        ok_z = np.all((self.Z >= 0) == (self.y_imputed == 1))
        ok_w = np.all((self.W >= 0) == data.missing_indicator)
        ok_y = bool(np.isin(self.y_imputed, (0, 1)).all())
        obs = ~data.missing_indicator
        ok_obs = np.array_equal(self.y_imputed[obs], data.responses[obs])
        return bool(ok_z and ok_w and ok_y and ok_obs)


@dataclass
class DrawStore:
    """Retained post-burn-in draws for one chain, plus streaming summaries."""

    chain_id: int
    mode: str
    n_persons: int
    n_items: int
    a: np.ndarray
    b: np.ndarray
    zeta: np.ndarray | None
    gamma0: np.ndarray | None
    gamma1: np.ndarray | None
    gamma2: np.ndarray | None
    sigma_theta_tau: np.ndarray | None
    sigma_tau_sq: np.ndarray | None
    theta: np.ndarray | None
    tau: np.ndarray | None
    theta_sum: np.ndarray
    theta_sumsq: np.ndarray
    tau_sum: np.ndarray | None
    tau_sumsq: np.ndarray | None
    miss_loglik: np.ndarray | None
    cpo: "selection.CpoAccumulator | None"
    accept_s01: int
    accept_s02: int
    n_mh_steps: int
    wall_time: float
    config: SamplerConfig

    @property
    def n_draws(self) -> int:
        return self.a.shape[0]

    def scalar_columns(self) -> dict[str, np.ndarray]:
        """Retained draws keyed by export column name, in export order."""
        cols: dict[str, np.ndarray] = {}
        for j in range(self.n_items):
            cols[f"a.{j + 1}"] = self.a[:, j]
        for j in range(self.n_items):
            cols[f"b.{j + 1}"] = self.b[:, j]
        if self.zeta is not None:
            for j in range(self.n_items):
                cols[f"zeta.{j + 1}"] = self.zeta[:, j]
            cols["gamma0"] = self.gamma0
            cols["gamma1"] = self.gamma1
            cols["gamma2"] = self.gamma2
            cols["sigma.theta.tau"] = self.sigma_theta_tau
            cols["sigma2.tau"] = self.sigma_tau_sq
        if self.theta is not None:
            for i in range(self.n_persons):
                cols[f"theta.{i + 1}"] = self.theta[:, i]
        if self.tau is not None:
            for i in range(self.n_persons):
                cols[f"tau.{i + 1}"] = self.tau[:, i]
        return cols

    def acceptance_rates(self) -> dict[str, float]:
        if self.n_mh_steps == 0:
            return {}
        return {
            "sigma_theta_tau": self.accept_s01 / self.n_mh_steps,
            "sigma_tau_sq": self.accept_s02 / self.n_mh_steps,
        }


@dataclass
class ParamSummary:
    eap: float
    post_sd: float
    mcse: float
    rhat: float


@dataclass
class PosteriorSummary:
    """Per-parameter EAP, posterior SD, Monte-Carlo SE, and R-hat."""

    params: dict[str, ParamSummary]
    n_draws: int
    n_chains: int


# -- initialization -----------------------------------------------------------

_INIT = {
    "a": 1.0,
    "b": 0.0,
    "zeta": 0.0,
    "theta": 0.0,
    "tau": 0.0,
    "gamma0": -1.0,
    "gamma1": 0.05,
    "gamma2": -0.1,
    "sigma_theta_tau": 0.5,
    "sigma_tau_sq": 1.0,
}


def _initial_values(mode: str, n: int, j: int, jitter: bool, rng: RandomStream) -> dict:
    vals = {
        "a": np.full(j, _INIT["a"]),
        "b": np.full(j, _INIT["b"]),
        "zeta": np.full(j, _INIT["zeta"]),
        "theta": np.full(n, _INIT["theta"]),
        "tau": np.full(n, _INIT["tau"]),
        "gamma0": _INIT["gamma0"],
        "gamma1": _INIT["gamma1"],
        "gamma2": _INIT["gamma2"],
        "sigma_theta_tau": _INIT["sigma_theta_tau"] if mode == NONIGNORABLE else 0.0,
        "sigma_tau_sq": _INIT["sigma_tau_sq"],
    }
    if jitter:
        # overdispersed starts: multiplicative U(0.5, 1.5) on nonzero values
        # (signs preserved), additive U(-0.5, 0.5) on zero-centered blocks
        fac = lambda size=None: 0.5 + rng.uniform(size)
        off = lambda size=None: rng.uniform(size) - 0.5
        vals["a"] = vals["a"] * fac(j)
        vals["b"] = vals["b"] + off(j)
        vals["zeta"] = vals["zeta"] + off(j)
        vals["theta"] = vals["theta"] + off(n)
        vals["tau"] = vals["tau"] + off(n)
        vals["gamma0"] = vals["gamma0"] * fac()
        vals["gamma1"] = vals["gamma1"] * fac()
        vals["gamma2"] = vals["gamma2"] * fac()
        if mode == NONIGNORABLE:
            s_t2 = vals["sigma_tau_sq"] * fac()
            s_tt = vals["sigma_theta_tau"] * fac()
            # keep the covariance block positive definite
            s_tt = min(s_tt, 0.95 * math.sqrt(s_t2), 0.99)
            vals["sigma_theta_tau"] = s_tt
            vals["sigma_tau_sq"] = s_t2
    return vals


# -- full-conditional draws ---------------------------------------------------


def _draw_z(y: np.ndarray, a, b, theta, rng: RandomStream) -> np.ndarray:
    m = a[None, :] * (theta[:, None] - b[None, :])
    pos = y == 1
    lower = np.where(pos, 0.0, -np.inf)
    upper = np.where(pos, np.inf, 0.0)
    return sample_truncated_normal(m, 1.0, lower, upper, rng)


def _eta_matrix(y, cum, zeta, tau, g0, g1, g2) -> np.ndarray:
    return g0 - tau[:, None] + zeta[None, :] + g1 * cum + g2 * y


def _draw_w(y, r, cum, zeta, tau, g0, g1, g2, rng: RandomStream) -> np.ndarray:
    eta = _eta_matrix(y.astype(np.float64), cum, zeta, tau, g0, g1, g2)
    lower = np.where(r, 0.0, -np.inf)
    upper = np.where(r, np.inf, 0.0)
    return sample_truncated_normal(eta, 1.0, lower, upper, rng)


def _draw_theta(Z, a, b, tau, s_tt, s_t2, rng: RandomStream) -> np.ndarray:
    cond_var = 1.0 - s_tt * s_tt / s_t2
    cond_mean = (s_tt / s_t2) * tau
    var = 1.0 / (1.0 / cond_var + float(a @ a))
    lin = cond_mean / cond_var + Z @ a + float((a * a) @ b)
    return var * lin + math.sqrt(var) * rng.normal(tau.shape[0])


def _draw_a(Z, theta, b, mu_a, var_a, rng: RandomStream) -> np.ndarray:
    dev = theta[:, None] - b[None, :]
    var = 1.0 / (1.0 / var_a + (dev * dev).sum(axis=0))
    mean = var * (mu_a / var_a + (Z * dev).sum(axis=0))
    return sample_truncated_normal(mean, np.sqrt(var), 0.0, np.inf, rng)


def _draw_b(Z, theta, a, mu_b, var_b, rng: RandomStream) -> np.ndarray:
    n = Z.shape[0]
    var = 1.0 / (1.0 / var_b + n * a * a)
    mean = var * (mu_b / var_b + a * (a * theta.sum() - Z.sum(axis=0)))
    return mean + np.sqrt(var) * rng.normal(a.shape[0])


def _draw_tau(W, y, cum, zeta, theta, g0, g1, g2, s_tt, s_t2, rng: RandomStream) -> np.ndarray:
    n_items = W.shape[1]
    cond_var = s_t2 - s_tt * s_tt
    cond_mean = s_tt * theta
    var = 1.0 / (1.0 / cond_var + n_items)
    resid = (g0 + zeta[None, :] + g1 * cum + g2 * y - W).sum(axis=1)
    mean = var * (cond_mean / cond_var + resid)
    return mean + math.sqrt(var) * rng.normal(theta.shape[0])


def _draw_zeta(W, y, cum, tau, g0, g1, g2, mu_zeta, var_zeta, rng: RandomStream) -> np.ndarray:
    n = W.shape[0]
    var = 1.0 / (1.0 / var_zeta + n)
    resid = (-g0 + tau[:, None] - g1 * cum - g2 * y + W).sum(axis=0)
    mean = var * (mu_zeta / var_zeta + resid)
    return mean + math.sqrt(var) * rng.normal(W.shape[1])


def _draw_gamma0(W, y, cum, zeta, tau, g1, g2, mu, var0, rng: RandomStream) -> float:
    resid = W + tau[:, None] - zeta[None, :] - g1 * cum - g2 * y
    var = 1.0 / (1.0 / var0 + W.size)
    mean = var * (mu / var0 + float(resid.sum()))
    return float(sample_truncated_normal(mean, math.sqrt(var), -np.inf, 0.0, rng))


def _draw_gamma1(W, y, cum, zeta, tau, g0, g2, mu, var0, rng: RandomStream) -> float:
    resid = W - g0 + tau[:, None] - zeta[None, :] - g2 * y
    var = 1.0 / (1.0 / var0 + float((cum * cum).sum()))
    mean = var * (mu / var0 + float((cum * resid).sum()))
    return float(sample_truncated_normal(mean, math.sqrt(var), 0.0, np.inf, rng))


def _draw_gamma2(W, y, cum, zeta, tau, g0, g1, mu, var0, rng: RandomStream) -> float:
    resid = W - g0 + tau[:, None] - zeta[None, :] - g1 * cum
    var = 1.0 / (1.0 / var0 + float((y * y).sum()))
    mean = var * (mu / var0 + float((y * resid).sum()))
    return float(sample_truncated_normal(mean, math.sqrt(var), -np.inf, 0.0, rng))


def _log_tau_given_theta(theta, tau, s_tt, resid_var) -> float:
    """sum_i log N(tau_i; s_tt * theta_i, resid_var)."""
    n = theta.shape[0]
    dev = tau - s_tt * theta
    return -0.5 * n * math.log(2.0 * math.pi * resid_var) - float(dev @ dev) / (2.0 * resid_var)


def _mh_sigma_theta_tau(theta, tau, s_tt, s_t2, s01_sq, rng: RandomStream) -> tuple[float, bool]:
    """Step-12 random-walk MH update of the covariance, given sigma_tau_sq."""
    s01 = math.sqrt(s01_sq)
    p01 = math.sqrt(s_t2)
    prop = sample_truncated_normal(s_tt, s01, 0.0, p01, rng)

    def log_target(x: float) -> float:
        if not (0.0 < x < 1.0):  # Uniform(0,1) prior support
            return -np.inf
        v = s_t2 - x * x
        if v <= 0.0:
            return -np.inf
        return _log_tau_given_theta(theta, tau, x, v)

    # truncated-proposal normalizer Phi((p01-x)/s01) - Phi(-x/s01)
    log_ratio = (
        log_target(prop)
        - log_target(s_tt)
        + math.log(ndtr((p01 - s_tt) / s01) - ndtr(-s_tt / s01))
        - math.log(ndtr((p01 - prop) / s01) - ndtr(-prop / s01))
    )
    if math.log(rng.uniform()) < log_ratio:
        return float(prop), True
    return float(s_tt), False


def _mh_sigma_tau_sq(
    theta, tau, s_tt, s_t2, s02_sq, ig_shape, ig_scale, rng: RandomStream
) -> tuple[float, bool]:
    """Step-13 random-walk MH update of sigma_tau_sq, given the new covariance."""
    s02 = math.sqrt(s02_sq)
    p0 = s_tt * s_tt
    prop = sample_truncated_normal(s_t2, s02, p0, np.inf, rng)

    def log_target(x: float) -> float:
        v = x - p0
        if v <= 0.0:
            return -np.inf
        return _log_tau_given_theta(theta, tau, s_tt, v) + inverse_gamma_logpdf(
            x, ig_shape, ig_scale
        )

    # truncated-proposal normalizer 1 - Phi((p0-x)/s02) = Phi((x-p0)/s02)
    log_ratio = (
        log_target(prop)
        - log_target(s_t2)
        + float(std_normal_logcdf((s_t2 - p0) / s02))
        - float(std_normal_logcdf((prop - p0) / s02))
    )
    if math.log(rng.uniform()) < log_ratio:
        return float(prop), True
    return float(s_t2), False


def _impute_missing_cells(y, rows, cols, cum_cells, a, b, theta, tau, zeta, g0, g1, g2, rng):
    """Joint block draw of (Y, Z, W) at the missing cells.

    Y ~ Bernoulli(q) with q = p*pi11 / (p*pi11 + (1-p)*pi10), then the
    two augmented normals are refreshed under the new Y so the state stays
    inside the support of the joint model.
    """
    m_cells = a[cols] * (theta[rows] - b[cols])
    p = clamped_normal_cdf(m_cells)
    idx0 = g0 - tau[rows] + zeta[cols] + g1 * cum_cells
    pi11 = clamped_normal_cdf(idx0 + g2)
    pi10 = clamped_normal_cdf(idx0)
    q = p * pi11 / (p * pi11 + (1.0 - p) * pi10)
    y_new = (rng.uniform(rows.shape[0]) < q).astype(np.int8)
    y[rows, cols] = y_new
    pos = y_new == 1
    z_new = sample_truncated_normal(
        m_cells, 1.0, np.where(pos, 0.0, -np.inf), np.where(pos, np.inf, 0.0), rng
    )
    w_new = sample_truncated_normal(idx0 + g2 * y_new, 1.0, 0.0, np.inf, rng)
    return y_new, z_new, w_new


# -- spec-level step wrappers -------------------------------------------------


def step_augment(
    state: AugmentedState,
    data: Dataset,
    items: ItemParams,
    persons: PersonParams,
    gamma: StructuralParams,
    rng: RandomStream,
) -> AugmentedState:
    """Steps 1-2: redraw Z and W from their truncated-normal conditionals."""
    state.Z = _draw_z(state.y_imputed, items.a, items.b, persons.theta, rng)
    state.W = _draw_w(
        state.y_imputed,
        data.missing_indicator,
        data.cum_missing,
        items.zeta,
        persons.tau,
        gamma.gamma0,
        gamma.gamma1,
        gamma.gamma2,
        rng,
    )
    return state


def step_persons(
    state: AugmentedState,
    data: Dataset,
    items: ItemParams,
    structural: StructuralParams,
    current: PersonParams,
    rng: RandomStream,
) -> PersonParams:
    """Steps 3 and 7: draw theta given current tau, then tau given new theta."""
    s_tt = structural.sigma_theta_tau
    s_t2 = structural.sigma_tau_sq
    theta = _draw_theta(state.Z, items.a, items.b, current.tau, s_tt, s_t2, rng)
    tau = _draw_tau(
        state.W,
        state.y_imputed.astype(np.float64),
        data.cum_missing,
        items.zeta,
        theta,
        structural.gamma0,
        structural.gamma1,
        structural.gamma2,
        s_tt,
        s_t2,
        rng,
    )
    return PersonParams(theta, tau)


def step_items(
    state: AugmentedState,
    data: Dataset,
    persons: PersonParams,
    current: ItemParams,
    structural: StructuralParams,
    rng: RandomStream,
    priors: PriorSpec | None = None,
) -> ItemParams:
    """Steps 4, 5, 8: draw a (conditioning on old b), b (given new a), zeta."""
    pr = priors or PriorSpec()
    a = _draw_a(state.Z, persons.theta, current.b, pr.mu_a, pr.var_a, rng)
    b = _draw_b(state.Z, persons.theta, a, pr.mu_b, pr.var_b, rng)
    zeta = _draw_zeta(
        state.W,
        state.y_imputed.astype(np.float64),
        data.cum_missing,
        persons.tau,
        structural.gamma0,
        structural.gamma1,
        structural.gamma2,
        pr.mu_zeta,
        pr.var_zeta,
        rng,
    )
    return ItemParams(a, b, zeta)


def step_impute(
    state: AugmentedState,
    data: Dataset,
    items: ItemParams,
    persons: PersonParams,
    gamma: StructuralParams,
    rng: RandomStream,
) -> AugmentedState:
    """Step 6: redraw missing Y cells from Bernoulli(q); observed cells untouched."""
    rows, cols = np.nonzero(data.missing_indicator)
    if rows.size == 0:
        return state
    cum_cells = data.cum_missing[rows, cols].astype(np.float64)
    _, z_new, w_new = _impute_missing_cells(
        state.y_imputed,
        rows,
        cols,
        cum_cells,
        items.a,
        items.b,
        persons.theta,
        persons.tau,
        items.zeta,
        gamma.gamma0,
        gamma.gamma1,
        gamma.gamma2,
        rng,
    )
    state.Z[rows, cols] = z_new
    state.W[rows, cols] = w_new
    return state


def step_gammas(
    state: AugmentedState,
    data: Dataset,
    persons: PersonParams,
    items: ItemParams,
    current: tuple[float, float, float],
    rng: RandomStream,
    priors: PriorSpec | None = None,
) -> tuple[float, float, float]:
    """Steps 9-11: draw gamma0, gamma1, gamma2 from truncated-normal conditionals.

    Each draw conditions on the freshest value of the other two coefficients.
    """
    pr = priors or PriorSpec()
    y = state.y_imputed.astype(np.float64)
    cum = data.cum_missing.astype(np.float64)
    _, g1_cur, g2_cur = current
    g0 = _draw_gamma0(
        state.W, y, cum, items.zeta, persons.tau, g1_cur, g2_cur, pr.mu_gamma0, pr.var_gamma0, rng
    )
    g1 = _draw_gamma1(
        state.W, y, cum, items.zeta, persons.tau, g0, g2_cur, pr.mu_gamma1, pr.var_gamma1, rng
    )
    g2 = _draw_gamma2(
        state.W, y, cum, items.zeta, persons.tau, g0, g1, pr.mu_gamma2, pr.var_gamma2, rng
    )
    return g0, g1, g2


def step_covariance(
    persons: PersonParams,
    current: tuple[float, float],
    config: SamplerConfig,
    rng: RandomStream,
) -> tuple[tuple[float, float], tuple[bool, bool]]:
    """Steps 12-13: MH updates of (sigma_theta_tau, sigma_tau_sq)."""
    s_tt, s_t2 = current
    s_tt_new, acc1 = _mh_sigma_theta_tau(
        persons.theta, persons.tau, s_tt, s_t2, config.proposal_var_s01, rng
    )
    s_t2_new, acc2 = _mh_sigma_tau_sq(
        persons.theta,
        persons.tau,
        s_tt_new,
        s_t2,
        config.proposal_var_s02,
        config.priors.ig_shape,
        config.priors.ig_scale,
        rng,
    )
    return (s_tt_new, s_t2_new), (acc1, acc2)


# -- chain runner -------------------------------------------------------------


def _validate_for_fit(data: Dataset, mode: str) -> None:
    if data.n_persons == 0 or data.n_items == 0:
        raise DataError("empty dataset")
    observed_per_item = (~data.missing_indicator).sum(axis=0)
    if np.any(observed_per_item == 0):
        j = int(np.argmin(observed_per_item))
        raise DataError(f"item {j + 1} has zero observed responses")
    if mode == IRT_ONLY and not data.is_complete:
        raise DataError("IRT-only fitting requires complete data")


def run_chain(
    data: Dataset, spec: ModelSpec, config: SamplerConfig, chain_id: int = 0
) -> DrawStore:
    """Run one chain of the full sampler and return its retained draws."""
    if not isinstance(spec, ModelSpec):
        raise TypeError("spec must be a ModelSpec")
    return _run(data, spec.mode, config, chain_id)


def run_chains(data: Dataset, spec: ModelSpec, config: SamplerConfig) -> list[DrawStore]:
    """Run config.n_chains independent chains (ids 0..n_chains-1)."""
    return [run_chain(data, spec, config, chain_id=c) for c in range(config.n_chains)]


@dataclass
class _ChainParams:
    """Mutable parameter block threaded through the sweep."""

    a: np.ndarray
    b: np.ndarray
    zeta: np.ndarray
    theta: np.ndarray
    tau: np.ndarray
    g0: float
    g1: float
    g2: float
    s_tt: float
    s_t2: float


def _sweep(
    p: _ChainParams,
    y: np.ndarray,
    r: np.ndarray,
    cum: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    cum_cells: np.ndarray,
    pr: PriorSpec,
    mode: str,
    s01_sq: float,
    s02_sq: float,
    rng: RandomStream,
) -> tuple[bool, bool]:
    """One full Gibbs sweep, mutating p and the imputed cells of y in place.

    Returns the two MH acceptance flags (False, False when steps 12-13
    do not run).
    """
    yf = y.astype(np.float64)
    Z = _draw_z(y, p.a, p.b, p.theta, rng)
    track_missing = mode != IRT_ONLY
    if track_missing:
        W = _draw_w(yf, r, cum, p.zeta, p.tau, p.g0, p.g1, p.g2, rng)
    p.theta = _draw_theta(Z, p.a, p.b, p.tau, p.s_tt, p.s_t2, rng)
    p.a = _draw_a(Z, p.theta, p.b, pr.mu_a, pr.var_a, rng)
    p.b = _draw_b(Z, p.theta, p.a, pr.mu_b, pr.var_b, rng)
    acc = (False, False)
    if track_missing:
        if rows.size:
            _, z_new, w_new = _impute_missing_cells(
                y, rows, cols, cum_cells, p.a, p.b, p.theta, p.tau, p.zeta,
                p.g0, p.g1, p.g2, rng,
            )
            Z[rows, cols] = z_new
            W[rows, cols] = w_new
            yf = y.astype(np.float64)
        p.tau = _draw_tau(W, yf, cum, p.zeta, p.theta, p.g0, p.g1, p.g2, p.s_tt, p.s_t2, rng)
        p.zeta = _draw_zeta(W, yf, cum, p.tau, p.g0, p.g1, p.g2, pr.mu_zeta, pr.var_zeta, rng)
        p.g0 = _draw_gamma0(W, yf, cum, p.zeta, p.tau, p.g1, p.g2, pr.mu_gamma0, pr.var_gamma0, rng)
        p.g1 = _draw_gamma1(W, yf, cum, p.zeta, p.tau, p.g0, p.g2, pr.mu_gamma1, pr.var_gamma1, rng)
        p.g2 = _draw_gamma2(W, yf, cum, p.zeta, p.tau, p.g0, p.g1, pr.mu_gamma2, pr.var_gamma2, rng)
        if mode == NONIGNORABLE:
            p.s_tt, acc1 = _mh_sigma_theta_tau(p.theta, p.tau, p.s_tt, p.s_t2, s01_sq, rng)
            p.s_t2, acc2 = _mh_sigma_tau_sq(
                p.theta, p.tau, p.s_tt, p.s_t2, s02_sq, pr.ig_shape, pr.ig_scale, rng
            )
            acc = (acc1, acc2)
    return acc


def _run(data: Dataset, mode: str, config: SamplerConfig, chain_id: int) -> DrawStore:
    config.validate()
    _validate_for_fit(data, mode)
    rng = RandomStream(config.seed, chain_id)
    n, j = data.n_persons, data.n_items
    pr = config.priors
    t_start = time.perf_counter()

    vals = _initial_values(mode, n, j, config.jitter_starts, rng)
    p = _ChainParams(
        a=vals["a"],
        b=vals["b"],
        zeta=vals["zeta"],
        theta=vals["theta"],
        tau=vals["tau"],
        g0=vals["gamma0"],
        g1=vals["gamma1"],
        g2=vals["gamma2"],
        s_tt=vals["sigma_theta_tau"],
        s_t2=vals["sigma_tau_sq"],
    )

    r = data.missing_indicator
    cum = data.cum_missing.astype(np.float64)
    rows, cols = np.nonzero(r)
    cum_cells = cum[rows, cols]
    has_missing = rows.size > 0
    y = data.responses.astype(np.int8).copy()
    if has_missing:
        y[rows, cols] = (rng.uniform(rows.shape[0]) < 0.5).astype(np.int8)

    track_missing = mode != IRT_ONLY
    n_ret = config.n_retained
    draws_a = np.empty((n_ret, j))
    draws_b = np.empty((n_ret, j))
    draws_zeta = np.empty((n_ret, j)) if track_missing else None
    draws_g0 = np.empty(n_ret) if track_missing else None
    draws_g1 = np.empty(n_ret) if track_missing else None
    draws_g2 = np.empty(n_ret) if track_missing else None
    draws_stt = np.empty(n_ret) if track_missing else None
    draws_st2 = np.empty(n_ret) if track_missing else None
    draws_theta = np.empty((n_ret, n)) if config.store_person_draws else None
    draws_tau = np.empty((n_ret, n)) if config.store_person_draws and track_missing else None
    miss_ll = np.empty(n_ret) if track_missing else None
    cpo = selection.CpoAccumulator((n, j)) if track_missing else None
    theta_sum = np.zeros(n)
    theta_sumsq = np.zeros(n)
    tau_sum = np.zeros(n) if track_missing else None
    tau_sumsq = np.zeros(n) if track_missing else None
    accept1 = accept2 = 0
    n_mh = 0

    ret = 0
    for m in range(1, config.n_iterations + 1):
        acc1, acc2 = _sweep(
            p, y, r, cum, rows, cols, cum_cells, pr, mode,
            config.proposal_var_s01, config.proposal_var_s02, rng,
        )
        if mode == NONIGNORABLE:
            accept1 += acc1
            accept2 += acc2
            n_mh += 1

        if m > config.burn_in and (m - config.burn_in - 1) % config.thin == 0:
            draws_a[ret] = p.a
            draws_b[ret] = p.b
            theta_sum += p.theta
            theta_sumsq += p.theta * p.theta
            if draws_theta is not None:
                draws_theta[ret] = p.theta
            if track_missing:
                draws_zeta[ret] = p.zeta
                draws_g0[ret] = p.g0
                draws_g1[ret] = p.g1
                draws_g2[ret] = p.g2
                draws_stt[ret] = p.s_tt
                draws_st2[ret] = p.s_t2
                tau_sum += p.tau
                tau_sumsq += p.tau * p.tau
                if draws_tau is not None:
                    draws_tau[ret] = p.tau
                total, cells = selection.missingness_loglik(
                    p.tau, p.zeta, (p.g0, p.g1, p.g2), data, y.astype(np.float64)
                )
                miss_ll[ret] = total
                cpo.update(cells)
            ret += 1

    assert ret == n_ret
    return DrawStore(
        chain_id=chain_id,
        mode=mode,
        n_persons=n,
        n_items=j,
        a=draws_a,
        b=draws_b,
        zeta=draws_zeta,
        gamma0=draws_g0,
        gamma1=draws_g1,
        gamma2=draws_g2,
        sigma_theta_tau=draws_stt,
        sigma_tau_sq=draws_st2,
        theta=draws_theta,
        tau=draws_tau,
        theta_sum=theta_sum,
        theta_sumsq=theta_sumsq,
        tau_sum=tau_sum,
        tau_sumsq=tau_sumsq,
        miss_loglik=miss_ll,
        cpo=cpo,
        accept_s01=accept1,
        accept_s02=accept2,
        n_mh_steps=n_mh,
        wall_time=time.perf_counter() - t_start,
        config=config,
    )


# -- summaries ----------------------------------------------------------------


def _batch_mcse(chains: list[np.ndarray]) -> float:
    """Monte-Carlo SE of the pooled mean via batch means within each chain."""
    batch_means = []
    for x in chains:
        n = x.shape[0]
        if n < 4:
            batch_means.extend(x.tolist())
            continue
        bs = int(math.sqrt(n))
        nb = n // bs
        batch_means.extend(x[: nb * bs].reshape(nb, bs).mean(axis=1).tolist())
    bm = np.asarray(batch_means)
    if bm.size < 2:
        return float("nan")
    return float(bm.std(ddof=1) / math.sqrt(bm.size))


def _summary_for(chains: list[np.ndarray]) -> ParamSummary:
    pooled = np.concatenate(chains)
    eap = float(pooled.mean())
    post_sd = float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0
    mcse = _batch_mcse(chains)
    if not math.isnan(mcse):
        mcse = min(mcse, post_sd) if pooled.size > 1 else mcse
    if len(chains) >= 2:
        rhat = diagnostics.psrf(np.vstack(chains))
    else:
        rhat = float("nan")
    return ParamSummary(eap=eap, post_sd=post_sd, mcse=mcse, rhat=rhat)


def summarize(stores: "DrawStore | Sequence[DrawStore]") -> PosteriorSummary:
    """Pool chains into per-parameter EAP / posterior SD / MCSE / R-hat."""
    if isinstance(stores, DrawStore):
        stores = [stores]
    stores = list(stores)
    if not stores:
        raise ValueError("no draws to summarize")
    if any(s.n_draws == 0 for s in stores):
        raise ValueError("empty draw store")
    first = stores[0]
    if any(s.mode != first.mode or s.n_items != first.n_items for s in stores[1:]):
        raise ValueError("cannot pool chains from different models")

    params: dict[str, ParamSummary] = {}
    col_sets = [s.scalar_columns() for s in stores]
    for name in col_sets[0]:
        if all(name in cs for cs in col_sets):
            params[name] = _summary_for([cs[name] for cs in col_sets])
    # streaming person summaries when full draws were not stored
    total = sum(s.n_draws for s in stores)
    if first.theta is None:
        t_sum = sum((s.theta_sum for s in stores), np.zeros(first.n_persons))
        t_ss = sum((s.theta_sumsq for s in stores), np.zeros(first.n_persons))
        for i in range(first.n_persons):
            mean = t_sum[i] / total
            var = max((t_ss[i] - total * mean * mean) / max(total - 1, 1), 0.0)
            params[f"theta.{i + 1}"] = ParamSummary(
                float(mean), float(math.sqrt(var)), float("nan"), float("nan")
            )
    if first.tau_sum is not None and first.tau is None:
        u_sum = sum((s.tau_sum for s in stores), np.zeros(first.n_persons))
        u_ss = sum((s.tau_sumsq for s in stores), np.zeros(first.n_persons))
        for i in range(first.n_persons):
            mean = u_sum[i] / total
            var = max((u_ss[i] - total * mean * mean) / max(total - 1, 1), 0.0)
            params[f"tau.{i + 1}"] = ParamSummary(
                float(mean), float(math.sqrt(var)), float("nan"), float("nan")
            )
    return PosteriorSummary(params=params, n_draws=total, n_chains=len(stores))


def eap_items(stores: "DrawStore | Sequence[DrawStore]") -> ItemParams:
    """Pooled EAP item parameters (zeta zeros for IRT-only stores)."""
    if isinstance(stores, DrawStore):
        stores = [stores]
    a = np.concatenate([s.a for s in stores]).reshape(-1, stores[0].n_items)
    b = np.concatenate([s.b for s in stores]).reshape(-1, stores[0].n_items)
    if stores[0].zeta is not None:
        zeta = np.concatenate([s.zeta for s in stores]).reshape(-1, stores[0].n_items)
        zeta_eap = zeta.mean(axis=0)
    else:
        zeta_eap = np.zeros(stores[0].n_items)
    return ItemParams(a.mean(axis=0), b.mean(axis=0), zeta_eap)


def selection_report(stores: "DrawStore | Sequence[DrawStore]") -> "selection.SelectionReport":
    """Pooled DIC/LPML report over all retained draws of all chains."""
    if isinstance(stores, DrawStore):
        stores = [stores]
    stores = list(stores)
    if stores[0].miss_loglik is None:
        raise ValueError("IRT-only stores carry no missingness likelihood")
    logliks = np.concatenate([s.miss_loglik for s in stores])
    acc = selection.CpoAccumulator.merge([s.cpo for s in stores])
    return selection.build_report(logliks, acc, stores[0].mode)


# -- export -------------------------------------------------------------------


def export_draws_csv(store: DrawStore, path) -> None:
    """One CSV per chain: header of parameter names, one row per retained draw."""
    cols = store.scalar_columns()
    names = list(cols)
    mat = np.column_stack([cols[k] for k in names])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(names) + "\n")
        for row in mat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_draws_csv(path) -> dict[str, np.ndarray]:
    """Read a draws CSV back into column arrays."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DataError(f"{path}: empty draws file")
        names = header.split(",")
        try:
            mat = np.loadtxt(fh, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: malformed draws CSV: {exc}") from None
    if mat.shape[1] != len(names):
        raise DataError(f"{path}: column count mismatch")
    return {name: mat[:, k] for k, name in enumerate(names)}
