"""Convergence diagnostics and simulation-study scoring.

The potential scale reduction factor here is the classic unsplit
between/within-chain estimator: W is the mean of per-chain sample
variances, B/n the variance of chain means, and
Vhat = (n-1)/n W + (1 + 1/m) B / n, rhat = sqrt(Vhat / W).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

RHAT_THRESHOLD = 1.1
DEFAULT_CHECKPOINT = 500


def psrf(chains: np.ndarray) -> float:
    """Potential scale reduction factor for one parameter.

    chains: (m, n) array, m >= 2 chains of n draws each. Chains that are
    all constant and identical give exactly 1.0.
    """
    x = np.asarray(chains, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two equal-length chains")
    m, n = x.shape
    if n < 2:
        raise ValueError("need at least two draws per chain")
    within = float(x.var(axis=1, ddof=1).mean())
    between = float(n * x.mean(axis=1).var(ddof=1))
    if within == 0.0:
        return 1.0 if between == 0.0 else float("inf")
    v_hat = (n - 1) / n * within + (1.0 + 1.0 / m) * between / n
    return math.sqrt(v_hat / within)


@dataclass
class RhatReport:
    """Per-parameter PSRF values, pass flags, and a running prefix trace."""

    rhat: dict[str, float]
    passes: dict[str, bool]
    trace: dict[str, list[tuple[int, float]]] = field(default_factory=dict)
    threshold: float = RHAT_THRESHOLD

    def all_pass(self) -> bool:
        return all(self.passes.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.rhat, key=lambda k: self.rhat[k])
        return name, self.rhat[name]

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("iteration,parameter,rhat\n")
            for name in self.trace:
                for n_draws, value in self.trace[name]:
                    fh.write(f"{n_draws},{name},{value!r}\n")


def gelman_rubin(
    chains_by_param: Mapping[str, np.ndarray],
    checkpoint: int = DEFAULT_CHECKPOINT,
    threshold: float = RHAT_THRESHOLD,
) -> RhatReport:
    """PSRF per parameter with a growing-prefix trace at checkpoints.

    Each value is an (m, n) array of m >= 2 chains; all parameters must
    share the same chain count and length, each at least 10 draws.
    """
    if not chains_by_param:
        raise ValueError("no parameters to diagnose")
    shapes = {np.asarray(v).shape for v in chains_by_param.values()}
    if len(shapes) != 1:
        raise ValueError("all parameters must have the same chain layout")
    (m, n), = shapes
    if m < 2:
        raise ValueError("need at least two chains")
    if n < 10:
        raise ValueError("need at least 10 draws per chain")

    points = sorted(set(range(checkpoint, n + 1, checkpoint)) | {n})
    rhat: dict[str, float] = {}
    passes: dict[str, bool] = {}
    trace: dict[str, list[tuple[int, float]]] = {}
    for name, arr in chains_by_param.items():
        x = np.asarray(arr, dtype=np.float64)
        rhat[name] = psrf(x)
        passes[name] = rhat[name] < threshold
        trace[name] = [(k, psrf(x[:, :k])) for k in points]
    return RhatReport(rhat=rhat, passes=passes, trace=trace, threshold=threshold)


def rhat_report_from_columns(
    chain_columns: Sequence[Mapping[str, np.ndarray]],
    checkpoint: int = DEFAULT_CHECKPOINT,
    threshold: float = RHAT_THRESHOLD,
) -> RhatReport:
    """Build a report from per-chain {parameter: draws} dictionaries."""
    if len(chain_columns) < 2:
        raise ValueError("need at least two chains")
    names = [k for k in chain_columns[0] if all(k in cc for cc in chain_columns)]
    stacked = {k: np.vstack([np.asarray(cc[k]) for cc in chain_columns]) for k in names}
    return gelman_rubin(stacked, checkpoint=checkpoint, threshold=threshold)


def bias_mae(estimates: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Mean bias and mean absolute error over K parameters x L replications.

    mean_bias = (KL)^-1 sum_kl (est_kl - truth_k);
    mean_mae = (KL)^-1 sum_kl |est_kl - truth_k|.
    """
    est = np.asarray(estimates, dtype=np.float64)
    tr = np.asarray(truth, dtype=np.float64).ravel()
    if est.ndim == 1:
        est = est[:, None]
    if est.ndim != 2 or est.shape[0] != tr.shape[0]:
        raise ValueError(
            f"estimates of shape {est.shape} do not align with {tr.shape[0]} true values"
        )
    dev = est - tr[:, None]
    return float(dev.mean()), float(np.abs(dev).mean())


@dataclass
class BlockScore:
    mean_bias: float
    mean_mae: float
    n_params: int
    n_reps: int


@dataclass
class RecoveryReport:
    """Bias/MAE per parameter block for one simulation design cell.

    Blocks a method does not estimate carry NaN scores with n_params 0 and
    render as dashes. rep_blocks keeps the per-replication scores behind the
    aggregate; failures records replications whose fit did not complete.
    """

    design_label: str
    blocks: dict[str, BlockScore]
    rep_blocks: list[dict[str, BlockScore]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def as_rows(self) -> list[tuple[str, str, float, float]]:
        return [
            (self.design_label, name, s.mean_bias, s.mean_mae)
            for name, s in self.blocks.items()
        ]


def _cell(value: float) -> str:
    value = float(value)
    return "-" if math.isnan(value) else repr(value)


def write_recovery_csv(reports: Sequence[RecoveryReport], path) -> None:
    """Table-shaped CSV: one row per (design, parameter block)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["design", "block", "mean_bias", "mean_mae"])
        for report in reports:
            for design, block, bias, mae in report.as_rows():
                writer.writerow([design, block, _cell(bias), _cell(mae)])
