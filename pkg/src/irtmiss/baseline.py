"""Listwise-deletion comparator.

Complete-case filtering followed by a plain two-parameter normal-ogive fit
with theta ~ N(0,1) and no missingness machinery. The fit reuses the main
sampler's augmentation / theta / a / b steps through its IRT-only mode flag
rather than a separate implementation, so recovery comparisons against the
full model isolate the missingness treatment itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DataError, Dataset
from .sampler import IRT_ONLY, DrawStore, SamplerConfig, _run


@dataclass
class CompleteCaseDataset:
    """Rows of an original dataset that have zero missing cells.

    ``person_index[i]`` is the row index in the original dataset of retained
    row i; the map is injective and order-preserving.
    """

    data: Dataset
    person_index: np.ndarray

    def __post_init__(self) -> None:
        idx = np.asarray(self.person_index, dtype=np.int64)
        if idx.ndim != 1 or idx.shape[0] != self.data.n_persons:
            raise DataError("person_index must assign one original row per retained row")
        if np.unique(idx).shape[0] != idx.shape[0]:
            raise DataError("person_index must be injective")
        if not self.data.is_complete:
            raise DataError("complete-case dataset contains missing cells")
        self.person_index = idx

    @property
    def n_persons(self) -> int:
        return self.data.n_persons

    @property
    def n_items(self) -> int:
        return self.data.n_items


def listwise_delete(data: Dataset) -> CompleteCaseDataset:
    """Retain exactly the rows whose missingness indicator sums to zero."""
    keep = np.flatnonzero(data.missing_indicator.sum(axis=1) == 0)
    if keep.size == 0:
        raise DataError("listwise deletion removed every person")
    return CompleteCaseDataset(Dataset.from_responses(np.asarray(data.responses)[keep]), keep)


def fit_irt_only(
    data: CompleteCaseDataset | Dataset, config: SamplerConfig, chain_id: int = 0
) -> DrawStore:
    """Gibbs fit of the plain item response model on complete cases only.

    Runs the augmentation, theta, a and b updates with a N(0,1) prior on
    theta; zeta, tau, gamma and the covariance block are never touched and
    are absent from the returned draws.
    """
    ds = data.data if isinstance(data, CompleteCaseDataset) else data
    return _run(ds, IRT_ONLY, config, chain_id)
