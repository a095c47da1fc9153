"""Forster-Warmuth counterfactual regression for delta(X) and Omega(X).

The learner regresses a pseudo-outcome on a polynomial basis and shrinks the
least-squares fit by the leverage of the query point::

    m(x) = (1 - h(x)) phi(x)' [G + phi(x) phi(x)']^{-1} b,
    h(x) = phi(x)' [G + phi(x) phi(x)']^{-1} phi(x),

with ``G = sum phi phi'`` and ``b = sum phi f`` over the training rows. By the
Sherman-Morrison identity, with ``q = phi' G^{-1} phi`` and ``beta = G^{-1} b``,
this is ``h = q / (1 + q)`` and ``m = phi' beta / (1 + q)**2``, which is what
:func:`fw_predict` evaluates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb
from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve


class WeakInstrumentError(ValueError):
    """Raised when ``|p1 - p0|`` falls below the relevance floor everywhere."""


VARIANTS = ("calibrated", "printed")


# ---------------------------------------------------------------------------
# pseudo-outcomes
# ---------------------------------------------------------------------------


def floored_difference(p1, p0, tau):
    """Return ``p1 - p0`` pushed away from zero to at least ``tau`` in magnitude.

    Also returns the share of rows that needed flooring.
    """
    diff = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    weak = np.abs(diff) < tau
    if weak.all():
        raise WeakInstrumentError("instrument relevance violated in fold")
    sign = np.where(diff < 0, -1.0, 1.0)
    return np.where(weak, sign * tau, diff), float(weak.mean())


def _arm_values(z, s):
    pZ = np.where(z == 1, s["p1"], s["p0"])
    eZ = np.where(z == 1, s["e1"], s["e0"])
    piZ = np.where(z == 1, s["pi1"], 1.0 - s["pi1"])
    return pZ, eZ, piZ


@dataclass(frozen=True)
class PseudoOutcome:
    target: str
    variant: str
    values: np.ndarray
    weak_share: float = 0.0


def _check_variant(variant, p_a1):
    if variant not in VARIANTS:
        raise ValueError(f"unknown pseudo-outcome variant {variant!r}")
    if variant == "printed" and not (p_a1 and 0 < p_a1 < 1):
        raise ValueError("printed pseudo-outcomes need pr(A=1) in (0, 1)")


def pseudo_outcome_delta(y, a, z, nuisance: dict, variant="calibrated", tau=0.01, p_a1=None):
    """Pseudo-outcome whose conditional mean given X targets ``delta(X)``.

    ``nuisance`` maps ``p0, p1, pi1, e0, e1`` to per-row arrays (already
    clipped). The calibrated form is the plug-in ratio plus its first-order
    correction; ``printed`` keeps the treated-arm weighting.
    """
    _check_variant(variant, p_a1)
    y, a, z = (np.asarray(v, dtype=float) for v in (y, a, z))
    diff, weak = floored_difference(nuisance["p1"], nuisance["p0"], tau)
    delta = (nuisance["e1"] - nuisance["e0"]) / diff
    pZ, eZ, piZ = _arm_values(z, nuisance)
    resid = y * (1 - a) - eZ - (a - pZ) * delta
    if variant == "calibrated":
        vals = delta + (2 * z - 1) / piZ * resid / diff
    else:
        rho = nuisance["p1"] * nuisance["pi1"] + nuisance["p0"] * (1 - nuisance["pi1"])
        vals = (a * delta + rho * (2 * z - 1) / piZ * resid / diff) / p_a1
    return PseudoOutcome("delta", variant, vals, weak)


def pseudo_outcome_omega(y, a, z, nuisance: dict, variant="calibrated", tau=0.01, p_a1=None):
    """Pseudo-outcome whose conditional mean given X targets ``Omega(X) = 1/(p1 - p0)``."""
    _check_variant(variant, p_a1)
    a, z = (np.asarray(v, dtype=float) for v in (a, z))
    diff, weak = floored_difference(nuisance["p1"], nuisance["p0"], tau)
    omega = 1.0 / diff
    pZ, _, piZ = _arm_values(z, nuisance)
    if variant == "calibrated":
        # d(1/D) = -dD / D^2
        vals = omega - (2 * z - 1) / piZ * (a - pZ) * omega**2
    else:
        rho = nuisance["p1"] * nuisance["pi1"] + nuisance["p0"] * (1 - nuisance["pi1"])
        vals = (a * omega + rho * (2 * z - 1) / piZ * (a - pZ) / diff**2) / p_a1
    return PseudoOutcome("omega", variant, vals, weak)


# ---------------------------------------------------------------------------
# polynomial basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    degree_grid: tuple = (0, 1, 2, 3)
    standardize: bool = True
    cv_folds: int = 5

    def __post_init__(self):
        grid = tuple(sorted(set(int(g) for g in self.degree_grid)))
        if not grid or grid[0] < 0:
            raise ValueError("degree grid must hold non-negative degrees")
        object.__setattr__(self, "degree_grid", grid)


def n_terms(d: int, degree: int) -> int:
    return comb(d + degree, degree)


def _exponents(d, degree):
    out = [()]
    for g in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(d), g))
    return out


def poly_features(xs, degree):
    """All monomials of total degree <= ``degree``, graded so lower degrees form a prefix."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    cols = []
    for combo in _exponents(xs.shape[1], degree):
        col = np.ones(len(xs))
        for j in combo:
            col = col * xs[:, j]
        cols.append(col)
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# the learner
# ---------------------------------------------------------------------------


@dataclass
class FwModel:
    degree: int
    center: np.ndarray
    scale: np.ndarray
    gram: np.ndarray
    moment: np.ndarray
    n_train: int
    cap: float = np.inf
    cv_loss: dict = field(default_factory=dict)
    ridge: float = 0.0

    def __post_init__(self):
        p = len(self.moment)
        if self.n_train == 0:
            self._chol = None
            self._beta = np.zeros(p)
            return
        G = self.gram
        try:
            self._chol = cho_factor(G, lower=True)
        except LinAlgError:
            self.ridge = 1e-10 * np.trace(G) / p
            if self.ridge <= 0:
                self.ridge = 1e-10
            self._chol = cho_factor(G + self.ridge * np.eye(p), lower=True)
        self._beta = cho_solve(self._chol, self.moment)

    def features(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return poly_features((x - self.center) / self.scale, self.degree)


def _standardizer(x, standardize):
    d = x.shape[1]
    if not standardize or len(x) == 0:
        return np.zeros(d), np.ones(d)
    sd = x.std(axis=0)
    return x.mean(axis=0), np.where(sd > 1e-12, sd, 1.0)


def _raw_fit(x, f, degree, center, scale, cap):
    Phi = poly_features((x - center) / scale, degree) if len(x) else np.zeros((0, n_terms(x.shape[1], degree)))
    return FwModel(degree, center, scale, Phi.T @ Phi, Phi.T @ f, len(f), cap)


def fw_fit(x, f, basis: Optional[BasisSpec] = None, cap: float = np.inf, seed: int = 0) -> FwModel:
    """Fit the FW learner, choosing the polynomial degree by V-fold CV.

    The CV criterion is the held-out squared error of FW predictions against
    the pseudo-outcome; ties go to the smaller degree.
    """
    basis = basis or BasisSpec()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    f = np.asarray(f, dtype=float)
    if not np.isfinite(f).all():
        raise ValueError("pseudo-outcome overflow; check clipping")
    n = len(f)
    grid = basis.degree_grid
    losses = {}
    V = min(basis.cv_folds, n)
    if len(grid) > 1 and V >= 2:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        folds = np.empty(n, dtype=np.int64)
        folds[rng.permutation(n)] = np.arange(n) % V
        sse = np.zeros(len(grid))
        for v in range(V):
            tr, te = folds != v, folds == v
            center, scale = _standardizer(x[tr], basis.standardize)
            Phi_tr = poly_features((x[tr] - center) / scale, grid[-1])
            Phi_te = poly_features((x[te] - center) / scale, grid[-1])
            for i, g in enumerate(grid):
                p = n_terms(x.shape[1], g)
                mdl = FwModel(g, center, scale, Phi_tr[:, :p].T @ Phi_tr[:, :p], Phi_tr[:, :p].T @ f[tr], int(tr.sum()), cap)
                pred = _predict_phi(mdl, Phi_te[:, :p])[0]
                sse[i] += np.sum((pred - f[te]) ** 2)
        losses = {g: s / n for g, s in zip(grid, sse)}
        degree = grid[int(np.argmin(sse))]
    else:
        degree = grid[0]
    center, scale = _standardizer(x, basis.standardize)
    model = _raw_fit(x, f, degree, center, scale, cap)
    model.cv_loss = losses
    return model


def _predict_phi(model: FwModel, Phi):
    if model.n_train == 0:
        return np.zeros(len(Phi)), np.ones(len(Phi))
    GinvPhi = cho_solve(model._chol, Phi.T)
    q = np.einsum("ij,ji->i", Phi, GinvPhi)
    q = np.maximum(q, 0.0)
    h = q / (1.0 + q)
    pred = (Phi @ model._beta) / (1.0 + q) ** 2
    return np.clip(pred, -model.cap, model.cap), h


def fw_leverage(model: FwModel, x) -> np.ndarray:
    """``h_n(x)`` for each query row."""
    return _predict_phi(model, model.features(x))[1]


def fw_predict(model: FwModel, x) -> np.ndarray:
    """FW predictions at each query row, clipped to ``[-cap, cap]``."""
    pred, h = _predict_phi(model, model.features(x))
    assert np.all((h >= 0) & (h <= 1 + 1e-9)), "leverage outside [0, 1]"
    return pred
