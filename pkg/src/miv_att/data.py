"""Observed-data containers, validation and fold planning for cross-fitting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np


class Observation(NamedTuple):
    y: float
    a: int
    z: int
    x: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """Columnar observed data ``O = (Y, A, Z, X)``.

    Construction never fails on bad values so that :func:`validate` can
    report every problem at once. Arrays are copied and made read-only.
    """

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        a = np.array(self.a, dtype=float).reshape(-1)
        z = np.array(self.z, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(y), -1) if len(y) else x.reshape(0, 0)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        for arr in (y, a, z, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def row(self, i: int) -> Observation:
        return Observation(float(self.y[i]), int(self.a[i]), int(self.z[i]), self.x[i])

    def rows(self):
        for i in range(self.n):
            yield self.row(i)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.z[idx], self.x[idx], self.covariate_names)

    @classmethod
    def from_rows(cls, rows: Sequence[Observation], covariate_names=()) -> "Dataset":
        rows = list(rows)
        x = np.array([np.asarray(r.x, dtype=float) for r in rows]) if rows else np.zeros((0, 0))
        return cls(
            [r.y for r in rows], [r.a for r in rows], [r.z for r in rows], x, covariate_names
        )


def validate(dataset: Dataset) -> list:
    """Return a list of human-readable issues; empty when the data are usable."""
    issues = []
    n = dataset.n
    if n < 1:
        return ["empty dataset"]
    if not (len(dataset.a) == len(dataset.z) == n and dataset.x.shape[0] == n):
        issues.append("column lengths differ")
        return issues
    for name, col in (("outcome", dataset.y), ("treatment", dataset.a), ("instrument", dataset.z)):
        if np.isnan(col).any():
            issues.append(f"missing values in {name}")
    if np.isnan(dataset.x).any():
        issues.append("missing values in covariates")
    if np.isinf(dataset.y).any():
        issues.append("non-finite outcome")
    if np.isinf(dataset.x).any():
        issues.append("non-finite covariates")

    a, z = dataset.a, dataset.z
    if not np.isin(a[~np.isnan(a)], (0.0, 1.0)).all():
        issues.append("non-binary treatment")
    if not np.isin(z[~np.isnan(z)], (0.0, 1.0)).all():
        issues.append("non-binary instrument")
    if not (a == 1).any():
        issues.append("no treated observations")
    if not (a == 0).any():
        issues.append("no untreated observations")
    if not (z == 1).any():
        issues.append("instrument arm Z=1 absent")
    if not (z == 0).any():
        issues.append("instrument arm Z=0 absent")
    return issues


@dataclass(frozen=True)
class FoldPlan:
    """Evaluation folds plus, per fold, a two-way split of its complement."""

    k: int
    assignments: np.ndarray
    nested_halves: tuple = field(repr=False)
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.assignments)

    def fold(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)

    def complement(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != k)


def _round_robin(order: np.ndarray, k: int, n: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    out[order] = np.arange(len(order)) % k
    return out


def _stratified_order(rng: np.random.Generator, idx: np.ndarray, strata: Optional[np.ndarray]):
    """Shuffle ``idx``; with strata, group by stratum so round-robin balances each cell."""
    if strata is None:
        return rng.permutation(idx)
    parts = []
    for s in np.unique(strata[idx]):
        members = idx[strata[idx] == s]
        parts.append(rng.permutation(members))
    return np.concatenate(parts) if parts else idx


def make_fold_plan(n: int, k: int = 3, seed: int = 0, strata: Optional[np.ndarray] = None) -> FoldPlan:
    """Seeded balanced partition of ``range(n)`` into ``k`` folds.

    Folds come from a shuffled round-robin, so sizes differ by at most one.
    Passing ``strata`` (e.g. ``2*A + Z``) balances every stratum across folds
    and halves as well.
    """
    if k < 2:
        raise ValueError("fold count must be at least 2")
    if n < 2 * k:
        raise ValueError("insufficient samples for fold plan")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    all_idx = np.arange(n)
    strata = None if strata is None else np.asarray(strata)
    assignments = _round_robin(_stratified_order(rng, all_idx, strata), k, n)

    halves = []
    for j in range(k):
        comp = np.flatnonzero(assignments != j)
        order = _stratified_order(rng, comp, strata)
        side = np.arange(len(order)) % 2
        c1 = np.sort(order[side == 0])
        c2 = np.sort(order[side == 1])
        c1.setflags(write=False)
        c2.setflags(write=False)
        halves.append((c1, c2))
    assignments.setflags(write=False)
    return FoldPlan(k=k, assignments=assignments, nested_halves=tuple(halves), seed=seed)
