"""Comparison estimators: single-arm Wald plug-in, substitution EIF and 2SLS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .data import Dataset
from .estimator import (
    EstimateReport,
    EstimationError,
    RunConfig,
    _fold_plan,
    _require_valid,
    aggregate_repeats,
    gamma_terms,
    repeat_seed,
    theta_term,
    variance_and_ci,
)
from .fw import WeakInstrumentError, floored_difference
from .learners import ClipPolicy, LearnerSpec, _fit_surface, fit_nuisances


@dataclass(frozen=True)
class WaldComponents:
    """Per-row fitted pieces of the single-arm Wald ratio.

    ``delta_star`` is the usual conditional Wald ratio built from the full
    outcome ``Y`` and is reported for comparison only.
    """

    e0: np.ndarray
    e1: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    delta: np.ndarray
    delta_star: Optional[np.ndarray] = None


def _merged_surfaces(dataset: Dataset, config: RunConfig, r: int, clip: ClipPolicy):
    """Step-1 surfaces for every row, each fitted on the complement of its fold.

    Returns the fold plan and a dict of full-length arrays with the
    substitution ``delta`` and ``omega`` filled in.
    """
    plan = _fold_plan(dataset, config, r)
    keys = ("p0", "p1", "pi1", "e0", "e1", "delta", "omega")
    s = {key: np.empty(dataset.n) for key in keys}
    weak = 0
    for k in range(config.k):
        idx = plan.fold(k)
        try:
            nf = fit_nuisances(dataset.subset(plan.complement(k)), config.learners, clip, repeat_seed(config.seed, r, k))
            sk = nf.evaluate(dataset.x[idx])
            diff, share = floored_difference(sk["p1"], sk["p0"], clip.tau)
        except WeakInstrumentError as exc:
            raise WeakInstrumentError(f"{exc} (repeat {r}, fold {k})") from exc
        except ValueError as exc:
            if "arm absent" in str(exc):
                raise EstimationError(f"{exc} (repeat {r}, fold {k}); consider stratified folds") from exc
            raise
        weak += share * len(idx)
        sk["omega"] = 1.0 / diff
        sk["delta"] = (sk["e1"] - sk["e0"]) * sk["omega"]
        for key in keys:
            s[key][idx] = sk[key]
    return plan, s, weak / dataset.n


def multiplier_bootstrap(numer, denom, B: int = 1000, seed: int = 0, chunk: int = 256):
    """Draws of ``sum(W numer) / sum(W denom)`` with iid standard-exponential ``W``.

    Pass centered summands as ``numer`` to obtain draws of ``psi* - psi``.
    Draw ``b`` depends only on ``(seed, b // chunk)``.
    """
    numer = np.asarray(numer, dtype=float)
    denom = np.asarray(denom, dtype=float)
    out = np.empty(B)
    for start in range(0, B, chunk):
        stop = min(B, start + chunk)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(start // chunk,)))
        W = rng.standard_exponential((stop - start, len(numer)))
        out[start:stop] = (W @ numer) / (W @ denom)
    return out


def wald_summands(y, a, delta):
    return np.asarray(a, dtype=float) * (np.asarray(y, dtype=float) + delta)


def _wald_repeat(dataset, config, r, s, p_a1):
    plan_fold = _fold_plan(dataset, config, r).assignments
    summ = wald_summands(dataset.y, dataset.a, s["delta"])
    psi = float(summ.sum() / dataset.a.sum())
    per_fold = [float(np.mean(summ[plan_fold == k]) / p_a1) for k in range(config.k)]
    draws = multiplier_bootstrap(summ - psi * dataset.a, dataset.a, config.bootstrap, repeat_seed(config.seed, r, 99))
    return psi, dataset.n * float(np.var(draws)), per_fold


def _eif_repeat(dataset, config, plan, s, p_a1):
    gamma = gamma_terms(dataset.y, dataset.a, dataset.z, s, p_a1)
    per_fold = [float(np.mean(gamma[plan.assignments == k])) for k in range(config.k)]
    psi = float(np.mean(per_fold))
    g_var = gamma + psi * (1 - dataset.a / p_a1) if config.variance == "eif" else gamma
    sigma2, _ = variance_and_ci(g_var, psi, config.alpha, dataset.n, plan.assignments)
    return psi, sigma2, per_fold


def substitution_estimates(dataset: Dataset, config: RunConfig = RunConfig(), which=("Wald", "EIF")) -> dict:
    """Wald plug-in and substitution-EIF estimates sharing one set of Step-1 fits.

    Both use nuisances fitted on the merged complement of each evaluation fold
    and plug in ``(e1 - e0)/(p1 - p0)`` and ``1/(p1 - p0)`` directly. The Wald
    interval uses a multiplier bootstrap; the EIF interval uses the EIF
    variance. Repeats are median-adjusted as in :func:`cross_fit`.
    """
    unknown = set(which) - {"Wald", "EIF"}
    if unknown:
        raise ValueError(f"unknown substitution estimator(s): {sorted(unknown)}")
    _require_valid(dataset)
    p_a1 = float(np.mean(dataset.a))
    clip = config.clip.resolve(dataset.y)
    runs = {w: [] for w in which}
    weak = []
    for r in range(config.repeats):
        plan, s, share = _merged_surfaces(dataset, config, r, clip)
        weak.append(share)
        if "Wald" in which:
            runs["Wald"].append(_wald_repeat(dataset, config, r, s, p_a1))
        if "EIF" in which:
            runs["EIF"].append(_eif_repeat(dataset, config, plan, s, p_a1))
    out = {}
    for w, res in runs.items():
        psis = [x[0] for x in res]
        sig = [x[1] for x in res]
        psi, sigma2, ci = aggregate_repeats(psis, sig, dataset.n, config.alpha)
        mid = int(np.argsort(psis)[len(psis) // 2])
        out[w] = EstimateReport(
            estimator=w,
            psi_hat=psi,
            sigma2_hat=sigma2,
            ci=ci,
            n=dataset.n,
            alpha=config.alpha,
            per_fold=res[mid][2],
            repeats=[{"psi": p, "sigma2": v} for p, v in zip(psis, sig)],
            diagnostics={"weak_instrument_share": float(np.mean(weak))},
        )
    return out


def wald_estimate(dataset: Dataset, config: RunConfig = RunConfig()) -> EstimateReport:
    """Cross-fitted single-arm Wald plug-in ``mean[A (Y + delta~)] / mean(A)``."""
    return substitution_estimates(dataset, config, ("Wald",))["Wald"]


def eif_substitution_estimate(dataset: Dataset, config: RunConfig = RunConfig()) -> EstimateReport:
    """EIF estimator with ``delta`` and ``Omega`` substituted from Step-1 fits."""
    return substitution_estimates(dataset, config, ("EIF",))["EIF"]


def plugin_eif_gap(y, a, z, s: dict, p_a1: float) -> float:
    """``mean(theta) / P(A)``: the EIF-minus-Wald difference on shared surfaces."""
    return float(np.mean(theta_term(y, a, z, s)) / p_a1)


def wald_components(dataset: Dataset, config: RunConfig = RunConfig(), r: int = 0) -> WaldComponents:
    """Cross-fitted Wald pieces plus the conventional ratio ``delta*`` for reporting."""
    clip = config.clip.resolve(dataset.y)
    plan, s, _ = _merged_surfaces(dataset, config, r, clip)
    dstar = np.empty(dataset.n)
    spec: LearnerSpec = config.learners.outcome
    for k in range(config.k):
        idx = plan.fold(k)
        train = dataset.subset(plan.complement(k))
        m = []
        for zz in (0, 1):
            mask = train.z == zz
            surf = _fit_surface(train.x[mask], train.y[mask], spec, "gaussian", -clip.c2, clip.c2, repeat_seed(config.seed, r, k, 5 + zz))
            m.append(surf(dataset.x[idx]))
        dstar[idx] = (m[1] - m[0]) * s["omega"][idx]
    return WaldComponents(s["e0"], s["e1"], s["p0"], s["p1"], s["delta"], dstar)


# ---------------------------------------------------------------------------
# two-stage least squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TslsResult:
    estimate: float
    se: float
    ci: tuple
    first_stage_f: float
    coef: np.ndarray

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "se": self.se, "ci": list(self.ci), "first_stage_f": self.first_stage_f}


def _collinear_columns(M, names):
    """Names of columns that are linear combinations of earlier ones."""
    bad = []
    kept = []
    tol = 1e-10 * max(1.0, np.abs(M).max())
    for j in range(M.shape[1]):
        trial = kept + [j]
        s = np.linalg.svd(M[:, trial], compute_uv=False)
        if s[-1] <= tol * np.sqrt(len(M)):
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


def tsls_estimate(dataset: Dataset, alpha: float = 0.05) -> TslsResult:
    """2SLS of Y on (1, A, X) with instruments (1, Z, X) and an HC1 sandwich interval.

    Raises :class:`WeakInstrumentError` when the first-stage F statistic for Z
    is below 1.
    """
    n = dataset.n
    X = dataset.x
    names_w = ["const", "z", *dataset.covariate_names]
    W = np.column_stack([np.ones(n), dataset.z, X])
    bad = _collinear_columns(W, names_w)
    if bad:
        raise ValueError(f"collinear design; offending column(s): {', '.join(bad)}")
    D = np.column_stack([np.ones(n), dataset.a, X])
    p = W.shape[1]
    if n <= p:
        raise ValueError("too few observations for 2SLS")
    # first stage
    WtW_inv = np.linalg.inv(W.T @ W)
    pi = WtW_inv @ W.T @ dataset.a
    v = dataset.a - W @ pi
    s2 = v @ v / (n - p)
    f_stat = float(pi[1] ** 2 / (s2 * WtW_inv[1, 1])) if s2 > 0 else np.inf
    if f_stat < 1:
        raise WeakInstrumentError(f"first-stage F = {f_stat:.3g} < 1")
    Dhat = W @ (WtW_inv @ W.T @ D)
    bread = np.linalg.inv(Dhat.T @ Dhat)
    beta = bread @ Dhat.T @ dataset.y
    u = dataset.y - D @ beta
    meat = (Dhat * (u**2)[:, None]).T @ Dhat
    V = bread @ meat @ bread * n / (n - p)
    se = float(np.sqrt(V[1, 1]))
    half = stats.norm.ppf(1 - alpha / 2) * se
    est = float(beta[1])
    return TslsResult(est, se, (est - half, est + half), f_stat, beta)
