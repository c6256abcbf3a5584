"""Model-comparison criteria for the missingness submodel: DIC and LPML.

Both criteria are computed on the conditional distribution of the missing
indicators R given the (per-draw imputed) responses Y; the measurement part
of the likelihood never enters. The deviance plug-in D(psi-hat) uses the
best retained draw (max log-likelihood), which keeps the effective number of
parameters P_D nonnegative by construction. CPO cells are accumulated in a
streaming, overflow-safe way so full per-draw cell matrices never need to be
stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import std_normal_logcdf
from .model import Dataset, DataError, StructuralParams


def missingness_loglik(
    tau: np.ndarray,
    zeta: np.ndarray,
    gamma: "StructuralParams | Sequence[float]",
    data: Dataset,
    y_full: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Log-likelihood of R | Y at one draw, with per-cell terms for CPO.

    y_full must be the fully imputed response matrix at the same draw.
    Returns (total, cells) with cells[i, j] = r log pi + (1-r) log(1-pi).
    """
    if isinstance(gamma, StructuralParams):
        g0, g1, g2 = gamma.gamma
    else:
        g0, g1, g2 = (float(g) for g in gamma)
    y = np.asarray(y_full, dtype=np.float64)
    if y.shape != data.responses.shape:
        raise DataError("imputed response matrix shape does not match dataset")
    eta = (
        g0
        - np.asarray(tau, dtype=np.float64)[:, None]
        + np.asarray(zeta, dtype=np.float64)[None, :]
        + g1 * data.cum_missing
        + g2 * y
    )
    cells = np.where(data.missing_indicator, std_normal_logcdf(eta), std_normal_logcdf(-eta))
    return float(cells.sum()), cells


def compute_dic(per_draw_logliks) -> tuple[float, float, float, float]:
    """DIC of the missingness submodel from per-draw log-likelihoods.

    Returns (dic, p_d, d_hat, d_bar) with d_bar = -(2/M) sum loglik,
    d_hat = -2 max loglik, p_d = d_bar - d_hat, dic = d_hat + 2 p_d.
    """
    ll = np.asarray(per_draw_logliks, dtype=np.float64).ravel()
    if ll.size == 0:
        raise ValueError("need at least one retained draw")
    d_bar = float(-2.0 * ll.mean())
    d_hat = float(-2.0 * ll.max())
    p_d = d_bar - d_hat
    dic = d_hat + 2.0 * p_d
    return dic, p_d, d_hat, d_bar


class CpoAccumulator:
    """Streaming log-sum-exp of exp(-loglik) per cell, for log CPO.

    log CPO_ij = -U_max - log[(1/M) sum_m exp(-l_ij^m - U_max)] with
    U_max = max_m(-l_ij^m). The running maximum and a rescaled exponential
    sum give the same result as a two-pass computation.
    """

    def __init__(self, shape: tuple[int, int]):
        self.shape = tuple(shape)
        self.neg_max = np.full(self.shape, -np.inf)
        self.sum_exp = np.zeros(self.shape)
        self.count = 0

    def update(self, cell_logliks: np.ndarray) -> None:
        u = -np.asarray(cell_logliks, dtype=np.float64)
        if u.shape != self.shape:
            raise ValueError("cell matrix shape mismatch")
        new_max = np.maximum(self.neg_max, u)
        # exp(-inf - finite) = 0, so the first update contributes only u
        with np.errstate(invalid="ignore"):
            scale = np.exp(self.neg_max - new_max)
        scale = np.where(np.isnan(scale), 0.0, scale)
        self.sum_exp = self.sum_exp * scale + np.exp(u - new_max)
        self.neg_max = new_max
        self.count += 1

    def log_cpo(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no draws accumulated")
        return -self.neg_max - np.log(self.sum_exp) + np.log(self.count)

    @staticmethod
    def merge(accumulators: "Sequence[CpoAccumulator]") -> "CpoAccumulator":
        accs = list(accumulators)
        if not accs:
            raise ValueError("nothing to merge")
        out = CpoAccumulator(accs[0].shape)
        for acc in accs:
            if acc.shape != out.shape:
                raise ValueError("cannot merge accumulators of different shapes")
            new_max = np.maximum(out.neg_max, acc.neg_max)
            with np.errstate(invalid="ignore"):
                s_old = np.exp(out.neg_max - new_max)
                s_new = np.exp(acc.neg_max - new_max)
            s_old = np.where(np.isnan(s_old), 0.0, s_old)
            s_new = np.where(np.isnan(s_new), 0.0, s_new)
            out.sum_exp = out.sum_exp * s_old + acc.sum_exp * s_new
            out.neg_max = new_max
            out.count += acc.count
        return out


def compute_lpml(per_cell_per_draw_logliks) -> tuple[float, np.ndarray]:
    """LPML and the log-CPO matrix from an M x N x J stack of cell terms."""
    stack = np.asarray(per_cell_per_draw_logliks, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None, :, :]
    if stack.ndim != 3 or stack.shape[0] < 1:
        raise ValueError("expected at least one draw of an N x J cell matrix")
    acc = CpoAccumulator(stack.shape[1:])
    for m in range(stack.shape[0]):
        acc.update(stack[m])
    cpo = acc.log_cpo()
    return float(cpo.sum()), cpo


@dataclass
class SelectionReport:
    dic: float
    p_d: float
    d_hat: float
    d_bar: float
    lpml: float
    cpo: np.ndarray
    n_draws: int
    model_mode: str

    def to_json_dict(self) -> dict:
        return {
            "dic": self.dic,
            "p_d": self.p_d,
            "d_hat": self.d_hat,
            "d_bar": self.d_bar,
            "lpml": self.lpml,
            "n_draws": self.n_draws,
            "model_mode": self.model_mode,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_report(per_draw_logliks, cpo_acc: CpoAccumulator, model_mode: str) -> SelectionReport:
    ll = np.asarray(per_draw_logliks, dtype=np.float64).ravel()
    if cpo_acc.count != ll.size:
        raise ValueError("draw count mismatch between loglik trace and CPO accumulator")
    dic, p_d, d_hat, d_bar = compute_dic(ll)
    cpo = cpo_acc.log_cpo()
    return SelectionReport(
        dic=dic,
        p_d=p_d,
        d_hat=d_hat,
        d_bar=d_bar,
        lpml=float(cpo.sum()),
        cpo=cpo,
        n_draws=int(ll.size),
        model_mode=model_mode,
    )


@dataclass
class ComparisonResult:
    delta_dic: float
    delta_lpml: float
    preferred: str
    dic_nonignorable: float
    dic_ignorable: float
    lpml_nonignorable: float
    lpml_ignorable: float

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def compare(fit_nonignorable: SelectionReport, fit_ignorable: SelectionReport) -> ComparisonResult:
    """Decision record from two reports fitted to the same dataset.

    Smaller DIC and larger LPML are better. The label is "nonignorable" or
    "ignorable" only when both criteria agree; exact ties give
    "indistinguishable" and conflicting criteria give "mixed".
    """
    if fit_nonignorable.cpo.shape != fit_ignorable.cpo.shape:
        raise DataError("selection reports come from datasets of different shapes")
    d_dic = fit_nonignorable.dic - fit_ignorable.dic
    d_lpml = fit_nonignorable.lpml - fit_ignorable.lpml
    if d_dic == 0.0 and d_lpml == 0.0:
        label = "indistinguishable"
    elif d_dic < 0.0 and d_lpml > 0.0:
        label = "nonignorable"
    elif d_dic > 0.0 and d_lpml < 0.0:
        label = "ignorable"
    else:
        label = "mixed"
    return ComparisonResult(
        delta_dic=float(d_dic),
        delta_lpml=float(d_lpml),
        preferred=label,
        dic_nonignorable=fit_nonignorable.dic,
        dic_ignorable=fit_ignorable.dic,
        lpml_nonignorable=fit_nonignorable.lpml,
        lpml_ignorable=fit_ignorable.lpml,
    )
