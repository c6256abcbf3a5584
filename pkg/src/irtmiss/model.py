"""Core data types and probability kernels of the response/missingness model.

The response model is a two-parameter normal ogive,
``P(Y_ij = 1) = Phi(a_j (theta_i - b_j))``, and nonresponse follows a probit
selection model,
``P(R_ij = 1) = Phi(gamma0 - tau_i + zeta_j + gamma1 * g_ij + gamma2 * y_ij)``,
where ``g_ij = sum_{h<j} R_ih`` counts the person's prior missing items
(0 for the first item) and the ``gamma2 * y_ij`` term lets missingness depend
on the possibly unobserved response itself. Item order in a dataset is the
administration order; the g statistic depends on it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distributions import clamped_normal_cdf, std_normal_cdf, std_normal_logcdf

# Distinct third state for unobserved responses; never a valid response value.
MISSING = -1


class DataError(ValueError):
    """Malformed or degenerate input data."""


class NumericalError(RuntimeError):
    """Numerical failure (singular matrix, non-finite objective)."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass
class Dataset:
    """Response matrix with missingness indicators.

    ``responses`` is N x J over {0, 1, MISSING}. ``missing_indicator`` is the
    R matrix; for raw data it is derived from the responses (R=1 iff the cell
    is MISSING). :meth:`completed` builds a dataset whose responses are fully
    imputed while ``missing_indicator`` retains the original pattern.
    ``cum_missing[i, j]`` caches ``sum_{h<j} R_ih``.
    """

    responses: np.ndarray
    missing_indicator: np.ndarray
    cum_missing: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        resp = np.asarray(self.responses, dtype=np.int8)
        miss = np.asarray(self.missing_indicator, dtype=bool)
        if resp.ndim != 2 or resp.shape != miss.shape:
            raise DataError("responses and missing_indicator must be equal-shape 2-D arrays")
        if resp.size == 0:
            raise DataError("empty dataset")
        valid = np.isin(resp, (0, 1, MISSING))
        if not valid.all():
            i, j = np.argwhere(~valid)[0]
            raise DataError(f"invalid response value {resp[i, j]} at row {i + 1}, column {j + 1}")
        if np.any((resp == MISSING) & ~miss):
            raise DataError("MISSING response in a cell not flagged missing")
        self.responses = _readonly(resp)
        self.missing_indicator = _readonly(miss)
        r = miss.astype(np.int64)
        cum = np.zeros_like(r)
        cum[:, 1:] = np.cumsum(r[:, :-1], axis=1)
        self.cum_missing = _readonly(cum)

    @classmethod
    def from_responses(cls, responses: np.ndarray) -> "Dataset":
        """Raw data: the missingness indicator is derived from the responses."""
        resp = np.asarray(responses, dtype=np.int8)
        return cls(resp, resp == MISSING)

    @classmethod
    def completed(cls, y_full: np.ndarray, missing_indicator: np.ndarray) -> "Dataset":
        """Fully imputed responses with the original missingness retained."""
        y = np.asarray(y_full, dtype=np.int8)
        if not np.isin(y, (0, 1)).all():
            raise DataError("completed dataset must contain only 0/1 responses")
        return cls(y, missing_indicator)

    @property
    def n_persons(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    @property
    def is_complete(self) -> bool:
        return not np.any(self.responses == MISSING)

    @property
    def missing_proportion(self) -> float:
        return float(self.missing_indicator.mean())


@dataclass
class ItemParams:
    """Per-item discrimination a_j > 0, difficulty b_j, missingness propensity zeta_j."""

    a: np.ndarray
    b: np.ndarray
    zeta: np.ndarray

    def __post_init__(self) -> None:
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.zeta = np.asarray(self.zeta, dtype=np.float64)
        if not (self.a.shape == self.b.shape == self.zeta.shape) or self.a.ndim != 1:
            raise ValueError("a, b, zeta must be 1-D arrays of equal length")
        if np.any(self.a <= 0.0):
            raise ValueError("all discriminations a_j must be positive")


@dataclass
class PersonParams:
    """Per-person ability theta_i and missingness trait tau_i."""

    theta: np.ndarray
    tau: np.ndarray

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if self.theta.shape != self.tau.shape or self.theta.ndim != 1:
            raise ValueError("theta and tau must be 1-D arrays of equal length")
        if not (np.isfinite(self.theta).all() and np.isfinite(self.tau).all()):
            raise ValueError("person parameters must be finite")


@dataclass
class StructuralParams:
    """Missingness regression coefficients and the (theta, tau) covariance block.

    The latent scale is identified by fixing the means of theta and tau to 0
    and var(theta) to 1, so the covariance block is
    [[1, sigma_theta_tau], [sigma_theta_tau, sigma_tau_sq]] and must stay
    positive definite: sigma_theta_tau^2 < sigma_tau_sq.
    """

    gamma0: float
    gamma1: float
    gamma2: float
    sigma_theta_tau: float = 0.0
    sigma_tau_sq: float = 1.0

    def __post_init__(self) -> None:
        if not self.gamma0 < 0.0:
            raise ValueError("gamma0 must be negative")
        if not self.gamma1 > 0.0:
            raise ValueError("gamma1 must be positive")
        if not self.gamma2 < 0.0:
            raise ValueError("gamma2 must be negative")
        if not self.sigma_tau_sq > 0.0:
            raise ValueError("sigma_tau_sq must be positive")
        if not self.sigma_theta_tau**2 < self.sigma_tau_sq:
            raise ValueError("covariance block not positive definite")

    @property
    def gamma(self) -> tuple[float, float, float]:
        return (self.gamma0, self.gamma1, self.gamma2)


NONIGNORABLE = "nonignorable"
IGNORABLE = "ignorable"


@dataclass(frozen=True)
class ModelSpec:
    """Fitting mode. Ignorable mode pins sigma_theta_tau to 0 for the whole run."""

    mode: str = NONIGNORABLE
    link: str = "probit"

    def __post_init__(self) -> None:
        if self.mode not in (NONIGNORABLE, IGNORABLE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.link != "probit":
            raise ValueError("only the probit link is implemented")


def prob_correct(theta_i, a_j, b_j):
    """P(Y=1) = Phi(a (theta - b)); broadcasts over arrays."""
    return std_normal_cdf(a_j * (np.asarray(theta_i, dtype=np.float64) - b_j))


def cumulative_prior_missing(r_row: np.ndarray, j: int) -> int:
    """g statistic for 1-based item index j: sum of R over items 1..j-1."""
    r_row = np.asarray(r_row)
    if not 1 <= j <= r_row.shape[-1]:
        raise ValueError(f"item index {j} out of range 1..{r_row.shape[-1]}")
    return int(np.sum(r_row[: j - 1]))


def missingness_index(tau_i, zeta_j, gamma: Sequence[float], cum_missing, y_ij):
    """Probit index gamma0 - tau + zeta + gamma1*cum + gamma2*y; broadcasts."""
    g0, g1, g2 = gamma
    return (
        g0
        - np.asarray(tau_i, dtype=np.float64)
        + zeta_j
        + g1 * np.asarray(cum_missing, dtype=np.float64)
        + g2 * np.asarray(y_ij, dtype=np.float64)
    )


def prob_missing(tau_i, zeta_j, gamma: Sequence[float], cum_missing, y_ij):
    """P(R=1) under the probit selection model; broadcasts over arrays."""
    return std_normal_cdf(missingness_index(tau_i, zeta_j, gamma, cum_missing, y_ij))


def imputation_prob(p_ij, pi11, pi10):
    """Posterior probability the missing response is 1 given R=1.

    q = p*pi11 / (p*pi11 + (1-p)*pi10), with pi11/pi10 the missingness
    probabilities under y=1 and y=0.
    """
    p_ij = np.asarray(p_ij, dtype=np.float64)
    num = p_ij * pi11
    den = num + (1.0 - p_ij) * pi10
    if np.any(den <= 0.0):
        raise NumericalError("degenerate imputation state: zero denominator")
    out = num / den
    if out.ndim == 0:
        return float(out)
    return out


def _loglik_cells(
    data: Dataset, items: ItemParams, persons: PersonParams, gamma: StructuralParams
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell log-likelihood terms (Y part, R part) for complete responses."""
    y = data.responses.astype(np.float64)
    r = data.missing_indicator.astype(np.float64)
    m = items.a[None, :] * (persons.theta[:, None] - items.b[None, :])
    y_part = y * std_normal_logcdf(m) + (1.0 - y) * std_normal_logcdf(-m)
    eta = missingness_index(
        persons.tau[:, None], items.zeta[None, :], gamma.gamma, data.cum_missing, y
    )
    r_part = r * std_normal_logcdf(eta) + (1.0 - r) * std_normal_logcdf(-eta)
    return y_part, r_part


def complete_data_loglik(
    data: Dataset, items: ItemParams, persons: PersonParams, gamma: StructuralParams
) -> float:
    """Joint log-likelihood sum_ij [y log p + (1-y) log(1-p) + r log pi + (1-r) log(1-pi)].

    Requires a dataset with no MISSING entries (observed or imputed).
    """
    if not data.is_complete:
        raise DataError("complete-data log-likelihood requires imputed responses")
    y_part, r_part = _loglik_cells(data, items, persons, gamma)
    return float(y_part.sum() + r_part.sum())


# Enumerating completions is exponential in the number of missing cells.
MAX_ENUMERATED_MISSING = 20


def observed_data_loglik_exhaustive(
    data: Dataset, items: ItemParams, persons: PersonParams, gamma: StructuralParams
) -> float:
    """Observed-data log-likelihood by brute-force enumeration of completions.

    Sums the complete-data likelihood over all 2^(#missing) fills of each
    person's missing cells (log-sum-exp per person). Persons factor, so the
    bound applies per person. Intended as the exact reference for the
    marginalization the sampler performs implicitly.
    """
    total = 0.0
    theta, tau = persons.theta, persons.tau
    a, b, zeta = items.a, items.b, items.zeta
    for i in range(data.n_persons):
        r_row = data.missing_indicator[i].astype(np.float64)
        cum_row = data.cum_missing[i].astype(np.float64)
        mis_cols = np.flatnonzero(data.missing_indicator[i])
        if mis_cols.size > MAX_ENUMERATED_MISSING:
            raise DataError(
                f"person {i + 1} has {mis_cols.size} missing cells; enumeration bound is "
                f"{MAX_ENUMERATED_MISSING}"
            )
        y_row = data.responses[i].astype(np.float64)
        m = a * (theta[i] - b)
        terms = []
        for bits in range(1 << mis_cols.size):
            y_fill = y_row.copy()
            for k, col in enumerate(mis_cols):
                y_fill[col] = (bits >> k) & 1
            y_part = y_fill * std_normal_logcdf(m) + (1.0 - y_fill) * std_normal_logcdf(-m)
            eta = missingness_index(tau[i], zeta, gamma.gamma, cum_row, y_fill)
            r_part = r_row * std_normal_logcdf(eta) + (1.0 - r_row) * std_normal_logcdf(-eta)
            terms.append(y_part.sum() + r_part.sum())
        terms = np.asarray(terms)
        u = terms.max()
        total += u + np.log(np.exp(terms - u).sum())
    return float(total)


# -- CSV interchange ---------------------------------------------------------
# Dialect: header row of item IDs (administration order), one row per person,
# cells in {0, 1, NA}.

_NA_TOKEN = "NA"


def read_response_csv(path) -> tuple[Dataset, list[str]]:
    """Read a response CSV; returns (dataset, item_names)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        item_names = [h.strip() for h in header]
        if len(item_names) == 0 or any(not name for name in item_names):
            raise DataError(f"{path}: header row must list item IDs")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(item_names):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {len(item_names)}")
            out = np.empty(len(row), dtype=np.int8)
            for c, tok in enumerate(row):
                tok = tok.strip()
                if tok == _NA_TOKEN:
                    out[c] = MISSING
                elif tok == "0":
                    out[c] = 0
                elif tok == "1":
                    out[c] = 1
                elif tok.isdigit():
                    raise DataError(
                        f"{path}: polytomous value {tok!r} at row {lineno}, column "
                        f"{item_names[c]!r}; recode to 0/1 first (treat only full credit as correct)"
                    )
                else:
                    raise DataError(
                        f"{path}: invalid token {tok!r} at row {lineno}, column {item_names[c]!r}; "
                        f"cells must be 0, 1, or NA"
                    )
            rows.append(out)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset.from_responses(np.vstack(rows)), item_names


def write_response_csv(path, data: Dataset, item_names: Sequence[str] | None = None) -> None:
    """Write a dataset in the 0/1/NA dialect."""
    names = list(item_names) if item_names is not None else [f"item{j + 1}" for j in range(data.n_items)]
    if len(names) != data.n_items:
        raise ValueError("item_names length mismatch")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(data.n_persons):
            writer.writerow(
                [_NA_TOKEN if v == MISSING else str(int(v)) for v in data.responses[i]]
            )
