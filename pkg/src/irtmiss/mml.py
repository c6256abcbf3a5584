"""Marginal maximum likelihood for (a, b, zeta) with (gamma, Sigma) held fixed.

The person parameters are integrated out over a Gauss-Hermite product grid
rotated by the Cholesky factor of Sigma, so the weighted discrete measure
reproduces N(0, Sigma) moments up to the quadrature order. gamma and Sigma
are NOT estimated here: they are assumed known (taken from a prior Bayesian
run or from simulation truth) and every entry point takes them as inputs.

For a missing cell the unobserved response is collapsed analytically inside
the integrand, p * Phi(idx0 + gamma2) + (1 - p) * Phi(idx0): given (theta,
tau) and the realized missingness path, cells factor, so the exponential sum
over missing-response patterns reduces to this two-term mixture per cell.

Optimization is item-block coordinate ascent in (log a_j, b_j, zeta_j) with
analytic block gradients, followed by per-item Newton polish steps (analytic
gradient, finite-difference Hessian) that push the stacked gradient to the
requested tolerance; function-value-only search cannot do that once loglik
changes fall under floating-point resolution. Standard errors come from the
observed information of the summed marginal log-likelihood, one 3x3 block
per item, central finite differences in the natural (a, b, zeta) coordinates.

Persons with identical response rows contribute identical likelihood terms,
so all sums run over unique rows weighted by multiplicity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize
from scipy.special import log_ndtr, logsumexp, ndtri

from .model import DataError, Dataset, ItemParams, NumericalError

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _gamma_tuple(gamma) -> tuple[float, float, float] | None:
    """Accept (g0, g1, g2) or any object exposing .gamma; None disables."""
    if gamma is None:
        return None
    if hasattr(gamma, "gamma"):
        gamma = gamma.gamma
    g0, g1, g2 = (float(v) for v in gamma)
    return g0, g1, g2


def _log_phi(x: np.ndarray) -> np.ndarray:
    return -0.5 * x * x - _LOG_SQRT_2PI


def _mills(x: np.ndarray) -> np.ndarray:
    """phi(x) / Phi(x), stable in the far left tail."""
    return np.exp(_log_phi(x) - log_ndtr(x))


@dataclass
class QuadratureGrid:
    """Product Gauss-Hermite rule transformed to N(0, Sigma)."""

    nodes: np.ndarray
    weights: np.ndarray
    n_points: int
    sigma: tuple[float, float]

    def __post_init__(self) -> None:
        self.log_weights = np.log(self.weights)

    @property
    def theta(self) -> np.ndarray:
        return self.nodes[:, 0]

    @property
    def tau(self) -> np.ndarray:
        return self.nodes[:, 1]


def build_grid(n_points: int, sigma: Sequence[float]) -> QuadratureGrid:
    """K^2-point rule exact for bivariate polynomials of degree <= 2K-1.

    sigma = (sigma_theta_tau, sigma_tau_sq); var(theta) is fixed at 1. The
    standard product rule is rotated by the Cholesky factor
    [[1, 0], [sigma_theta_tau, sqrt(sigma_tau_sq - sigma_theta_tau^2)]].
    """
    if n_points < 5:
        raise ValueError("quadrature order must be at least 5")
    s_tt, s_t2 = float(sigma[0]), float(sigma[1])
    if not (s_t2 > 0.0 and s_tt * s_tt < s_t2):
        raise ValueError("covariance block not positive definite")
    x, w = hermegauss(n_points)
    w = w / w.sum()
    u1 = np.repeat(x, n_points)
    u2 = np.tile(x, n_points)
    theta = u1
    tau = s_tt * u1 + math.sqrt(s_t2 - s_tt * s_tt) * u2
    weights = np.repeat(w, n_points) * np.tile(w, n_points)
    return QuadratureGrid(
        nodes=np.column_stack([theta, tau]),
        weights=weights,
        n_points=n_points,
        sigma=(s_tt, s_t2),
    )


# -- per-item integrand tables ---------------------------------------------------

# A cell's contribution depends on the item parameters and on (r, y, cum)
# only, so each item needs one row per distinct observed combination, gathered
# back to persons by index.


class _ItemConfig:
    """Distinct (r, y, cum) rows of one item plus person grouping."""

    def __init__(self, data: Dataset, j: int) -> None:
        r = np.asarray(data.missing_indicator[:, j], dtype=np.int64)
        y = np.asarray(data.responses[:, j], dtype=np.int64)
        y = np.where(r == 1, 0, y)  # placeholder, unused on the missing branch
        cum = np.asarray(data.cum_missing[:, j], dtype=np.int64)
        stacked = np.column_stack([r, y, cum])
        self.uniq, self.inverse = np.unique(stacked, axis=0, return_inverse=True)
        self.order = np.argsort(self.inverse, kind="stable")
        self.starts = np.searchsorted(self.inverse[self.order], np.arange(self.uniq.shape[0]))

    def group_sum(self, person_rows: np.ndarray) -> np.ndarray:
        """Sum person x node rows within each config group."""
        return np.add.reduceat(person_rows[self.order], self.starts, axis=0)


def _collapse(data: Dataset) -> tuple[Dataset, np.ndarray]:
    rows, counts = np.unique(np.asarray(data.responses), axis=0, return_counts=True)
    return Dataset.from_responses(rows), counts.astype(np.float64)


def _item_table(
    a: float,
    b: float,
    zeta: float,
    gamma: tuple[float, float, float] | None,
    grid: QuadratureGrid,
    uniq: np.ndarray,
    want_grad: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Log contribution (and optionally its (a, b, zeta)-gradient) per
    config row x node."""
    theta, tau = grid.theta, grid.tau
    s = a * (theta - b)
    logp = log_ndtr(s)
    log1mp = log_ndtr(-s)
    n_cfg = uniq.shape[0]
    out = np.empty((n_cfg, theta.shape[0]))
    grad = np.zeros((3, n_cfg, theta.shape[0])) if want_grad else None
    if want_grad:
        dlogp = _mills(s)  # d log p / ds
        dlog1mp = -_mills(-s)
        da_p, db_p = (theta - b) * dlogp, -a * dlogp
        da_1mp, db_1mp = (theta - b) * dlog1mp, -a * dlog1mp
    if gamma is not None:
        g0, g1, g2 = gamma
    for c, (r, y, cum) in enumerate(uniq):
        if gamma is None:
            # no missingness terms: a missing cell contributes factor 1
            if r == 1:
                out[c] = 0.0
                continue
            out[c] = logp if y == 1 else log1mp
            if want_grad:
                grad[0, c] = da_p if y == 1 else da_1mp
                grad[1, c] = db_p if y == 1 else db_1mp
            continue
        idx0 = g0 - tau + zeta + g1 * cum
        if r == 0:
            idx = idx0 + g2 * y
            out[c] = (logp if y == 1 else log1mp) + log_ndtr(-idx)
            if want_grad:
                grad[0, c] = da_p if y == 1 else da_1mp
                grad[1, c] = db_p if y == 1 else db_1mp
                grad[2, c] = -_mills(-idx)
        else:
            # two-term mixture over the unobserved response
            t1 = logp + log_ndtr(idx0 + g2)
            t0 = log1mp + log_ndtr(idx0)
            out[c] = np.logaddexp(t1, t0)
            if want_grad:
                w1 = np.exp(t1 - out[c])
                w0 = np.exp(t0 - out[c])
                grad[0, c] = w1 * da_p + w0 * da_1mp
                grad[1, c] = w1 * db_p + w0 * db_1mp
                grad[2, c] = w1 * _mills(idx0 + g2) + w0 * _mills(idx0)
    return out, grad


def _log_integrand(
    items: ItemParams,
    data: Dataset,
    gamma: tuple[float, float, float] | None,
    grid: QuadratureGrid,
) -> np.ndarray:
    total = np.zeros((data.n_persons, grid.nodes.shape[0]))
    for j in range(data.n_items):
        cfg = _ItemConfig(data, j)
        table, _ = _item_table(
            float(items.a[j]), float(items.b[j]), float(items.zeta[j]), gamma, grid, cfg.uniq
        )
        total += table[cfg.inverse]
    return total


def marginal_loglik(
    items: ItemParams,
    data: Dataset,
    gamma: Sequence[float] | None,
    grid: QuadratureGrid,
) -> float:
    """sum_i log sum_k w_k prod_j l_ij(node_k), evaluated in log space.

    gamma=None drops the missingness factors entirely, leaving the plain
    item response marginal likelihood over the ability dimension.
    """
    data_c, counts = _collapse(data)
    log_l = _log_integrand(items, data_c, _gamma_tuple(gamma), grid)
    return float(counts @ logsumexp(log_l + grid.log_weights[None, :], axis=1))


# -- fitting --------------------------------------------------------------------


@dataclass
class MmlConfig:
    n_points: int = 21
    tol: float = 1e-8
    max_iter: int = 100

    def validate(self) -> None:
        if self.n_points < 5:
            raise ValueError("quadrature order must be at least 5")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


@dataclass
class MmlEstimate:
    """Point estimates, standard errors, and fit metadata.

    std_errors has one (se_a, se_b, se_zeta) row per item; the zeta column
    is NaN when the fit ran without missingness terms.
    """

    a_hat: np.ndarray
    b_hat: np.ndarray
    zeta_hat: np.ndarray
    loglik: float
    std_errors: np.ndarray
    converged: bool
    n_iterations: int

    def __post_init__(self) -> None:
        if np.any(self.a_hat <= 0):
            raise ValueError("estimated discriminations must be positive")

    @property
    def items(self) -> ItemParams:
        return ItemParams(self.a_hat, self.b_hat, self.zeta_hat)


def _validate_for_mml(data: Dataset) -> None:
    resp = np.asarray(data.responses)
    obs = ~np.asarray(data.missing_indicator)
    for j in range(data.n_items):
        vals = np.unique(resp[obs[:, j], j])
        if vals.shape[0] < 2:
            raise DataError(f"item {j + 1} has fewer than 2 distinct observed responses")


def _start_values(
    data_c: Dataset, counts: np.ndarray, gamma: tuple[float, float, float] | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # computed from the collapsed rows so fits are exactly invariant to
    # person order
    resp = np.asarray(data_c.responses, dtype=np.float64)
    obs = (~np.asarray(data_c.missing_indicator)).astype(np.float64)
    a = np.ones(data_c.n_items)
    n_obs = counts @ obs
    rate = (counts @ (resp * obs)) / n_obs
    b = -ndtri(np.clip(rate, 0.02, 0.98))
    if gamma is None:
        zeta = np.zeros(data_c.n_items)
    else:
        miss = (counts @ np.asarray(data_c.missing_indicator)) / counts.sum()
        zeta = ndtri(np.clip(miss, 0.02, 0.98)) - gamma[0]
    return a, b, zeta


def _block_objective(
    x: np.ndarray,
    away: np.ndarray,
    gamma: tuple[float, float, float] | None,
    grid: QuadratureGrid,
    cfg: _ItemConfig,
    counts: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Negative marginal loglik and gradient in (log a, b, zeta) for one item."""
    a = math.exp(x[0])
    zeta = float(x[2]) if x.shape[0] > 2 else 0.0
    table, tgrad = _item_table(a, float(x[1]), zeta, gamma, grid, cfg.uniq, want_grad=True)
    scores = away + table[cfg.inverse] + grid.log_weights[None, :]
    top = scores.max(axis=1)
    e = np.exp(scores - top[:, None])
    norm = e.sum(axis=1)
    ll = float(counts @ (top + np.log(norm)))
    e *= (counts / norm)[:, None]
    per_cfg = cfg.group_sum(e)  # posterior node mass per config row
    grad = np.array([(per_cfg * tgrad[d]).sum() for d in range(3)])
    grad[0] *= a  # chain rule through log a
    return -ll, -grad


def _fd_hessian(f, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian with per-coordinate steps rel_step*max(1,|x|)."""
    d = x.shape[0]
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = f(x)
    hess = np.empty((d, d))
    for p in range(d):
        ep = np.zeros(d)
        ep[p] = h[p]
        hess[p, p] = (f(x + ep) - 2.0 * f0 + f(x - ep)) / h[p] ** 2
        for q in range(p + 1, d):
            eq = np.zeros(d)
            eq[q] = h[q]
            mixed = (
                f(x + ep + eq) - f(x + ep - eq) - f(x - ep + eq) + f(x - ep - eq)
            ) / (4.0 * h[p] * h[q])
            hess[p, q] = hess[q, p] = mixed
    return hess


def fit_mml(
    data: Dataset,
    gamma: Sequence[float] | None,
    sigma: Sequence[float],
    config: MmlConfig | None = None,
) -> MmlEstimate:
    """Item-block coordinate ascent with Newton polish on the marginal loglik.

    gamma and sigma are held fixed throughout. Non-convergence after
    max_iter sweeps is flagged on the estimate, not raised.
    """
    config = config or MmlConfig()
    config.validate()
    _validate_for_mml(data)
    gamma = _gamma_tuple(gamma)
    grid = build_grid(config.n_points, sigma)
    n_free = 2 if gamma is None else 3
    j_items = data.n_items
    data_c, counts = _collapse(data)
    a, b, zeta = _start_values(data_c, counts, gamma)
    configs = [_ItemConfig(data_c, j) for j in range(j_items)]

    def item_x(j: int) -> np.ndarray:
        return np.array([math.log(a[j]), b[j], zeta[j]])

    def item_rows(j: int) -> np.ndarray:
        cfg = configs[j]
        return _item_table(a[j], b[j], zeta[j], gamma, grid, cfg.uniq)[0][cfg.inverse]

    def weighted_ll(total_c: np.ndarray) -> float:
        return float(counts @ logsumexp(total_c + grid.log_weights[None, :], axis=1))

    bounds = [(-4.0, 4.0), (-8.0, 8.0), (-8.0, 8.0)][:n_free]
    contrib = [item_rows(j) for j in range(j_items)]
    prev_ll = weighted_ll(sum(contrib))
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_iter + 1):
        total_c = sum(contrib)
        for j in range(j_items):
            away = total_c - contrib[j]
            cfg = configs[j]

            def obj(x, _away=away, _cfg=cfg):
                val, grad = _block_objective(x, _away, gamma, grid, _cfg, counts)
                return val, grad[:n_free]

            x0 = item_x(j)
            res = minimize(
                obj,
                x0[:n_free],
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": 120, "ftol": 1e-13, "gtol": 1e-7},
            )
            x = np.concatenate([res.x, x0[n_free:]])
            a[j], b[j], zeta[j] = math.exp(x[0]), x[1], x[2]
            contrib[j] = item_rows(j)
            total_c = away + contrib[j]
        ll = weighted_ll(total_c)
        if abs(ll - prev_ll) < config.tol:
            converged = True
            prev_ll = ll
            break
        prev_ll = ll

    # Newton polish: function-change tests cannot certify a small gradient,
    # so apply gradient/Hessian steps per item until the stacked analytic
    # gradient is well under tolerance on every coordinate.
    target = 5.0 * config.tol
    for _ in range(30 if converged else 0):
        worst = 0.0
        total_c = sum(contrib)
        for j in range(j_items):
            away = total_c - contrib[j]
            cfg = configs[j]
            x = item_x(j)

            def negll(z, _away=away, _cfg=cfg, _x=x):
                z3 = np.concatenate([z, _x[z.shape[0]:]])
                return _block_objective(z3, _away, gamma, grid, _cfg, counts)[0]

            _, neg_grad = _block_objective(x, away, gamma, grid, cfg, counts)
            gnorm = float(np.linalg.norm(neg_grad[:n_free]))
            worst = max(worst, gnorm)
            if gnorm <= target:
                continue
            hess = _fd_hessian(negll, x[:n_free])
            try:
                step = np.linalg.solve(hess, neg_grad[:n_free])
            except np.linalg.LinAlgError:
                continue
            x_new = x.copy()
            x_new[:n_free] = x[:n_free] - step
            if np.all(np.isfinite(x_new)) and negll(x_new[:n_free]) <= negll(
                x[:n_free]
            ) + abs(prev_ll) * 1e-12:
                a[j], b[j], zeta[j] = math.exp(x_new[0]), x_new[1], x_new[2]
                contrib[j] = item_rows(j)
                total_c = away + contrib[j]
        if worst <= target:
            break

    loglik = weighted_ll(sum(contrib))
    estimate = MmlEstimate(
        a_hat=a,
        b_hat=b,
        zeta_hat=zeta,
        loglik=loglik,
        std_errors=np.full((j_items, 3), np.nan),
        converged=converged,
        n_iterations=sweeps,
    )
    estimate.std_errors = asymptotic_se(estimate, data_c, gamma, grid, counts)
    return estimate


def asymptotic_se(
    estimate: MmlEstimate,
    data: Dataset,
    gamma: Sequence[float] | None,
    grid: QuadratureGrid,
    _counts: np.ndarray | None = None,
) -> np.ndarray:
    """Observed-information standard errors, one 3x3 block per item.

    Finite-difference Hessian of the summed marginal log-likelihood in the
    natural (a, b, zeta) coordinates of one item, other items fixed at their
    estimates. The zeta column is NaN without missingness terms.
    """
    gamma = _gamma_tuple(gamma)
    if _counts is None:
        data, _counts = _collapse(data)
    counts = _counts
    n_free = 2 if gamma is None else 3
    out = np.full((data.n_items, 3), np.nan)
    items = estimate.items
    full = _log_integrand(items, data, gamma, grid)
    for j in range(data.n_items):
        cfg = _ItemConfig(data, j)
        away = full - _item_table(
            float(items.a[j]), float(items.b[j]), float(items.zeta[j]), gamma, grid, cfg.uniq
        )[0][cfg.inverse]

        def negll(x, _away=away, _cfg=cfg):
            zeta = float(x[2]) if n_free == 3 else float(items.zeta[j])
            table, _ = _item_table(float(x[0]), float(x[1]), zeta, gamma, grid, _cfg.uniq)
            scores = _away + table[_cfg.inverse] + grid.log_weights[None, :]
            return -float(counts @ logsumexp(scores, axis=1))

        x0 = np.array([items.a[j], items.b[j], items.zeta[j]])
        info = _fd_hessian(negll, x0[:n_free])
        info = 0.5 * (info + info.T)
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"information matrix for item {j + 1} is singular") from exc
        diag = np.diag(cov)
        if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            raise NumericalError(f"information matrix for item {j + 1} is not positive definite")
        out[j, :n_free] = np.sqrt(diag)
    return out


# -- export ----------------------------------------------------------------------


def write_estimates_csv(path, estimate: MmlEstimate) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("item,a_hat,se_a,b_hat,se_b,zeta_hat,se_zeta\n")
        for j in range(estimate.a_hat.shape[0]):
            cells = [
                estimate.a_hat[j],
                estimate.std_errors[j, 0],
                estimate.b_hat[j],
                estimate.std_errors[j, 1],
                estimate.zeta_hat[j],
                estimate.std_errors[j, 2],
            ]
            fh.write(f"{j + 1}," + ",".join(repr(float(v)) for v in cells) + "\n")


def fit_manifest(estimate: MmlEstimate, config: MmlConfig) -> dict:
    return {
        "K": config.n_points,
        "tol": config.tol,
        "iterations": estimate.n_iterations,
        "loglik": estimate.loglik,
        "converged": estimate.converged,
    }


def write_fit_manifest(path, estimate: MmlEstimate, config: MmlConfig) -> None:
    with open(path, "w") as fh:
        json.dump(fit_manifest(estimate, config), fh, indent=1)
        fh.write("\n")
