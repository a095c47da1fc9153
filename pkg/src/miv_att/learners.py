"""Step-1 nuisance learners: GLMs, boosted stumps and a convex stacking combiner.

All learners share a tiny contract, ``fit(X, y) -> self`` and
``predict(X) -> ndarray``. Probability learners (``family="binomial"``)
return values in [0, 1]; clipping is applied by :class:`Surface`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from . import _boost
from .data import Dataset

KINDS = ("glm", "boosted_stumps", "stack")


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "glm"
    ridge: float = 1e-4
    interactions: bool = True
    n_trees: int = 200
    learning_rate: float = 0.1
    max_depth: int = 1
    min_leaf: int = 5
    candidates: tuple = ()
    cv_folds: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}")
        if self.ridge < 0:
            raise ValueError("ridge strength must be non-negative")
        if self.max_depth not in (1, 2):
            raise ValueError("boosting depth must be 1 or 2")
        if self.n_trees < 0 or self.learning_rate <= 0 or self.min_leaf < 1:
            raise ValueError("invalid boosting hyperparameters")
        if self.kind == "stack":
            if not self.candidates:
                raise ValueError("stacking candidate list is empty")
            if self.cv_folds < 2:
                raise ValueError("stacking needs at least 2 folds")
            cands = tuple(
                c if isinstance(c, LearnerSpec) else LearnerSpec(**c) for c in self.candidates
            )
            object.__setattr__(self, "candidates", cands)


@dataclass(frozen=True)
class ClipPolicy:
    """Bounds enforced on every fitted nuisance surface.

    ``c2=None`` means "resolve from data": ten times the largest ``|Y|``.
    """

    c1: float = 0.01
    c2: Optional[float] = None
    tau: float = 0.01

    def __post_init__(self):
        if not 0 < self.c1 < 0.5:
            raise ValueError("c1 must lie in (0, 0.5)")
        if self.c2 is not None and self.c2 <= 0:
            raise ValueError("c2 must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def resolve(self, y) -> "ClipPolicy":
        if self.c2 is not None:
            return self
        c2 = 10.0 * float(np.max(np.abs(y))) if len(y) else 1.0
        return replace(self, c2=max(c2, 1e-8))


# ---------------------------------------------------------------------------
# individual learners
# ---------------------------------------------------------------------------


def _design(X, interactions):
    X = np.asarray(X, dtype=float)
    if not interactions or X.shape[1] < 2:
        return X
    d = X.shape[1]
    prods = [X[:, i] * X[:, j] for i in range(d) for j in range(i + 1, d)]
    return np.column_stack([X] + prods)


class GLM:
    """Ridge-penalised GLM: logistic via IRLS, or linear via normal equations."""

    def __init__(self, family="gaussian", ridge=1e-4, interactions=True, max_iter=100, tol=1e-8):
        self.family = family
        self.ridge = ridge
        self.interactions = interactions
        self.max_iter = max_iter
        self.tol = tol

    def _features(self, X):
        D = (_design(X, self.interactions) - self.mean_) / self.scale_
        return np.column_stack([np.ones(len(D)), D])

    def fit(self, X, y):
        y = np.asarray(y, dtype=float)
        D = _design(X, self.interactions)
        self.mean_ = D.mean(axis=0) if len(D) else np.zeros(D.shape[1])
        sd = D.std(axis=0) if len(D) else np.ones(D.shape[1])
        self.scale_ = np.where(sd > 1e-12, sd, 1.0)
        F = self._features(X)
        n, p = F.shape
        pen = np.full(p, self.ridge * n)
        pen[0] = 0.0
        if self.family == "gaussian":
            self.coef_ = np.linalg.solve(F.T @ F + np.diag(pen) + 1e-12 * np.eye(p), F.T @ y)
            self.n_iter_ = 1
            return self
        beta = np.zeros(p)
        beta[0] = logit(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        for it in range(1, self.max_iter + 1):
            eta = F @ beta
            mu = expit(eta)
            w = np.maximum(mu * (1 - mu), 1e-10)
            # Newton step on the penalised log-likelihood
            H = (F * w[:, None]).T @ F + np.diag(pen)
            grad = F.T @ (y - mu) - pen * beta
            step = np.linalg.solve(H + 1e-12 * np.eye(p), grad)
            beta = beta + step
            if np.max(np.abs(step)) < self.tol:
                break
        self.coef_ = beta
        self.n_iter_ = it
        return self

    def predict(self, X):
        eta = self._features(X) @ self.coef_
        return expit(eta) if self.family == "binomial" else eta


class BoostedStumps:
    """Gradient boosting with depth-1 (or depth-2) trees and exhaustive splits.

    Regression targets use squared loss. Probability targets boost on the
    logit scale with Newton leaf values and are mapped back through the
    logistic function.
    """

    def __init__(self, family="gaussian", n_trees=200, learning_rate=0.1, max_depth=1, min_leaf=5):
        self.family = family
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_leaf = min_leaf

    def fit(self, X, y):
        X = np.ascontiguousarray(X, dtype=float)
        y = np.ascontiguousarray(y, dtype=float)
        logistic = self.family == "binomial"
        if logistic:
            self.f0_ = float(logit(np.clip(y.mean(), 1e-6, 1 - 1e-6)))
        else:
            self.f0_ = float(y.mean())
        order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
        l2 = 1.0 if logistic else 0.0
        self.feat_, self.thr_, self.vals_ = _boost.fit_boost(
            X, y, order, int(self.n_trees), float(self.learning_rate),
            int(self.max_depth), int(self.min_leaf), logistic, l2, self.f0_,
        )
        return self

    def predict(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        F = _boost.predict_boost(X, self.f0_, float(self.learning_rate), self.feat_, self.thr_, self.vals_)
        return expit(F) if self.family == "binomial" else F


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def stack_weights(cv_predictions, y, max_iter=20000, tol=1e-13):
    """Convex weights minimising the squared loss of ``cv_predictions @ w``.

    Accelerated projected gradient over the simplex, started from uniform
    weights so that exchangeable candidates keep equal weight. The result is
    never worse than the best single candidate.
    """
    P = np.asarray(cv_predictions, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = P.shape
    if m == 1:
        return np.ones(1)

    def loss(w):
        r = y - P @ w
        return float(r @ r) / n

    Q = P.T @ P / n
    b = P.T @ y / n
    L = 2.0 * max(np.linalg.eigvalsh(Q)[-1], 1e-300)
    w = np.full(m, 1.0 / m)
    v = w.copy()
    t = 1.0
    for _ in range(max_iter):
        w_new = _project_simplex(v - (2.0 * (Q @ v - b)) / L)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        v = w_new + ((t - 1) / t_new) * (w_new - w)
        if np.max(np.abs(w_new - w)) < tol:
            w = w_new
            break
        w, t = w_new, t_new
    vertex_losses = [loss(np.eye(m)[j]) for j in range(m)]
    j = int(np.argmin(vertex_losses))
    if vertex_losses[j] < loss(w):
        w = np.eye(m)[j]
    return w


class Stack:
    """Convex combination of candidate learners with V-fold CV weights."""

    def __init__(self, family, candidates, cv_folds=5, seed=0):
        self.family = family
        self.candidates = tuple(candidates)
        self.cv_folds = cv_folds
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n = len(y)
        m = len(self.candidates)
        V = min(self.cv_folds, n)
        if m == 1 or V < 2:
            self.weights_ = np.full(m, 1.0 / m) if V < 2 else np.ones(1)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(self.seed))
            folds = np.empty(n, dtype=np.int64)
            folds[rng.permutation(n)] = np.arange(n) % V
            oof = np.zeros((n, m))
            for v in range(V):
                tr, te = folds != v, folds == v
                for j, spec in enumerate(self.candidates):
                    oof[te, j] = make_learner(spec, self.family, self.seed).fit(X[tr], y[tr]).predict(X[te])
            self.cv_predictions_ = oof
            self.weights_ = stack_weights(oof, y)
        self.models_ = [make_learner(s, self.family, self.seed).fit(X, y) for s in self.candidates]
        return self

    def predict(self, X):
        preds = np.column_stack([mdl.predict(X) for mdl in self.models_])
        return preds @ self.weights_


class Constant:
    def __init__(self, value):
        self.value = float(value)

    def fit(self, X, y):
        return self

    def predict(self, X):
        return np.full(len(X), self.value)


def make_learner(spec: LearnerSpec, family: str, seed: int = 0):
    if spec.kind == "glm":
        return GLM(family, spec.ridge, spec.interactions)
    if spec.kind == "boosted_stumps":
        return BoostedStumps(family, spec.n_trees, spec.learning_rate, spec.max_depth, spec.min_leaf)
    return Stack(family, spec.candidates, spec.cv_folds, seed)


# ---------------------------------------------------------------------------
# nuisance surfaces
# ---------------------------------------------------------------------------


class Surface:
    """A fitted learner whose outputs are clipped into ``[lo, hi]``."""

    def __init__(self, model, lo, hi, complement=False):
        self.model = model
        self.lo = lo
        self.hi = hi
        self.complement = complement

    def raw(self, x):
        return self.model.predict(np.asarray(x, dtype=float))

    def __call__(self, x):
        out = np.clip(self.raw(x), self.lo, self.hi)
        return 1.0 - out if self.complement else out


def _fit_surface(X, target, spec, family, lo, hi, seed):
    target = np.asarray(target, dtype=float)
    if np.ptp(target) == 0.0:
        return Surface(Constant(target[0]), lo, hi)
    return Surface(make_learner(spec, family, seed).fit(X, target), lo, hi)


def _arm(train: Dataset, z):
    mask = train.z == z
    if not mask.any():
        raise ValueError("instrument arm absent in training fold")
    return mask


def fit_propensity(train: Dataset, spec: LearnerSpec, clip: ClipPolicy, seed: int = 0):
    """Fit ``p_z(x) = pr(A=1 | Z=z, X=x)`` separately within each instrument arm."""
    out = []
    for z in (0, 1):
        m = _arm(train, z)
        out.append(_fit_surface(train.x[m], train.a[m], spec, "binomial", clip.c1, 1 - clip.c1, seed + z))
    return tuple(out)


def fit_instrument_density(train: Dataset, spec: LearnerSpec, clip: ClipPolicy, seed: int = 0):
    """Fit ``pi_1(x) = pr(Z=1 | X=x)``; ``pi_0`` is its complement."""
    _arm(train, 0)
    _arm(train, 1)
    pi1 = _fit_surface(train.x, train.z, spec, "binomial", clip.c1, 1 - clip.c1, seed + 2)
    pi0 = Surface(pi1.model, clip.c1, 1 - clip.c1, complement=True)
    return pi0, pi1


def fit_untreated_outcome(train: Dataset, spec: LearnerSpec, clip: ClipPolicy, seed: int = 0):
    """Fit ``e_z(x) = E{Y(1-A) | Z=z, X=x}`` within each instrument arm."""
    clip = clip.resolve(train.y)
    out = []
    for z in (0, 1):
        m = _arm(train, z)
        target = train.y[m] * (1 - train.a[m])
        out.append(_fit_surface(train.x[m], target, spec, "gaussian", -clip.c2, clip.c2, seed + 3 + z))
    return tuple(out)


@dataclass(frozen=True)
class NuisanceSpecs:
    propensity: LearnerSpec = field(default_factory=LearnerSpec)
    instrument: LearnerSpec = field(default_factory=LearnerSpec)
    outcome: LearnerSpec = field(default_factory=LearnerSpec)


@dataclass
class NuisanceFit:
    p: tuple
    pi: tuple
    e: tuple
    clip: ClipPolicy

    def evaluate(self, x) -> dict:
        x = np.asarray(x, dtype=float)
        pi1 = self.pi[1](x)
        return {
            "p0": self.p[0](x),
            "p1": self.p[1](x),
            "pi1": pi1,
            "e0": self.e[0](x),
            "e1": self.e[1](x),
        }

    def clip_rate(self, x) -> float:
        """Share of probability predictions that hit a clipping bound."""
        x = np.asarray(x, dtype=float)
        hits = []
        for s in (self.p[0], self.p[1], self.pi[1]):
            raw = s.raw(x)
            hits.append((raw < s.lo) | (raw > s.hi))
        return float(np.mean(hits))


def fit_nuisances(train: Dataset, specs: NuisanceSpecs, clip: ClipPolicy, seed: int = 0) -> NuisanceFit:
    clip = clip.resolve(train.y)
    return NuisanceFit(
        p=fit_propensity(train, specs.propensity, clip, seed),
        pi=fit_instrument_density(train, specs.instrument, clip, seed),
        e=fit_untreated_outcome(train, specs.outcome, clip, seed),
        clip=clip,
    )
