"""Cross-fitted EIF estimator of the ATT with FW-learned delta and Omega."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import stats

from .data import Dataset, make_fold_plan, validate
from .fw import (
    BasisSpec,
    WeakInstrumentError,
    floored_difference,
    fw_fit,
    fw_predict,
    pseudo_outcome_delta,
    pseudo_outcome_omega,
)
from .learners import ClipPolicy, NuisanceSpecs, fit_nuisances

log = logging.getLogger(__name__)


class EstimationError(RuntimeError):
    """Raised when estimation cannot proceed on otherwise valid data."""


THETA_FORMS = ("e0", "eZ")


@dataclass(frozen=True)
class RunConfig:
    k: int = 3
    repeats: int = 7
    alpha: float = 0.05
    learners: NuisanceSpecs = field(default_factory=NuisanceSpecs)
    basis: BasisSpec = field(default_factory=BasisSpec)
    clip: ClipPolicy = field(default_factory=ClipPolicy)
    variant: str = "calibrated"
    variance: str = "eif"
    theta_form: str = "e0"
    stratify: bool = False
    bootstrap: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        if not 0 < self.alpha < 0.5:
            raise ValueError("alpha must lie in (0, 0.5)")
        if self.variance not in ("eif", "printed"):
            raise ValueError("variance must be 'eif' or 'printed'")
        if self.theta_form not in THETA_FORMS:
            raise ValueError(f"theta_form must be one of {THETA_FORMS}")
        if self.bootstrap < 1:
            raise ValueError("bootstrap replicates must be positive")


@dataclass
class EstimateReport:
    estimator: str
    psi_hat: float
    sigma2_hat: float
    ci: tuple
    n: int
    alpha: float = 0.05
    per_fold: list = field(default_factory=list)
    repeats: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.sigma2_hat / self.n))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ci"] = list(self.ci)
        out["se"] = self.se
        return out


def repeat_seed(seed: int, *key: int) -> int:
    """Integer seed for the stream indexed by ``key`` under the root ``seed``.

    Streams depend only on (seed, key), never on scheduling order.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# the efficient influence function
# ---------------------------------------------------------------------------


def _rho(s):
    if s.get("rho") is not None:
        return s["rho"]
    return s["p1"] * s["pi1"] + s["p0"] * (1 - s["pi1"])


def theta_term(y, a, z, s: dict, form: str = "eZ"):
    """Correction term ``rho (2Z-1)/pi_Z Omega R``.

    With ``form="eZ"`` the residual is ``R = Y(1-A) - e_Z - (A - p_Z) delta``.
    With ``form="e0"`` it is ``Y(1-A) - e_0 - (A - p_0) delta``, which is the
    same quantity whenever ``e_1 - e_0 = (p_1 - p_0) delta`` but, unlike the
    first form, does not involve ``e_1`` when ``delta`` is fitted separately.
    """
    y, a, z = (np.asarray(v, dtype=float) for v in (y, a, z))
    piZ = np.where(z == 1, s["pi1"], 1 - s["pi1"])
    if form == "e0":
        resid = y * (1 - a) - s["e0"] - (a - s["p0"]) * s["delta"]
    elif form == "eZ":
        pZ = np.where(z == 1, s["p1"], s["p0"])
        eZ = np.where(z == 1, s["e1"], s["e0"])
        resid = y * (1 - a) - eZ - (a - pZ) * s["delta"]
    else:
        raise ValueError(f"unknown theta form {form!r}")
    return _rho(s) * (2 * z - 1) / piZ * s["omega"] * resid


def gamma_terms(y, a, z, s: dict, p_a1: float, form: str = "eZ"):
    """Per-row summand ``[A(Y + delta) + theta] / P(A)`` of the estimator."""
    a_ = np.asarray(a, dtype=float)
    return (a_ * (np.asarray(y, dtype=float) + s["delta"]) + theta_term(y, a, z, s, form)) / p_a1


def eif_evaluate(y, a, z, s: dict, psi: float, p_a1: float):
    """``EIF(O; psi) = [A(Y + delta - psi) + theta] / P(A)``, elementwise."""
    if not 0 < p_a1 < 1:
        raise ValueError("p_a1 must lie in (0, 1)")
    a_ = np.asarray(a, dtype=float)
    return (a_ * (np.asarray(y, dtype=float) + s["delta"] - psi) + theta_term(y, a, z, s)) / p_a1


# ---------------------------------------------------------------------------
# variance, intervals, median adjustment
# ---------------------------------------------------------------------------


def variance_and_ci(per_row_gamma, psi_hat: float, alpha: float, n: int, folds=None):
    """Fold-averaged ``mean((gamma - psi)^2)`` and the Wald-type interval.

    ``folds`` assigns each row to its evaluation fold; the squared deviations
    are averaged within folds and then across folds.
    """
    if n < 2:
        raise ValueError("need at least two observations for a variance")
    g = np.asarray(per_row_gamma, dtype=float)
    if folds is None:
        sigma2 = float(np.mean((g - psi_hat) ** 2))
    else:
        folds = np.asarray(folds)
        sigma2 = float(np.mean([np.mean((g[folds == k] - psi_hat) ** 2) for k in np.unique(folds)]))
    half = stats.norm.ppf(1 - alpha / 2) * np.sqrt(sigma2 / n)
    return sigma2, (psi_hat - half, psi_hat + half)


def median_adjust(estimates, variances):
    """Median point estimate and median of ``variance + (estimate - median)^2``.

    ``variances`` must be on the scale of the squared estimates (i.e. sampling
    variances of the estimator, not per-observation variances).
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if len(est) < 1 or len(est) != len(var):
        raise ValueError("need matching, non-empty estimate and variance lists")
    psi_med = float(np.median(est))
    return psi_med, float(np.median(var + (est - psi_med) ** 2))


def aggregate_repeats(psis, sigma2s, n, alpha):
    """Median-adjust per-repeat results given per-observation variances."""
    psi, v = median_adjust(psis, np.asarray(sigma2s) / n)
    sigma2 = v * n
    half = stats.norm.ppf(1 - alpha / 2) * np.sqrt(v)
    return psi, sigma2, (psi - half, psi + half)


# ---------------------------------------------------------------------------
# cross-fitting
# ---------------------------------------------------------------------------


def _fold_plan(dataset: Dataset, config: RunConfig, r: int):
    strata = 2 * dataset.a + dataset.z if config.stratify else None
    return make_fold_plan(dataset.n, config.k, repeat_seed(config.seed, r), strata)


def _half_surfaces(data, fit_idx, reg_idx, eval_idx, config, clip, seed):
    """Steps 1-2 on one ordering of the halves; returns surfaces on ``eval_idx``."""
    nf = fit_nuisances(data.subset(fit_idx), config.learners, clip, seed)
    reg = data.subset(reg_idx)
    nu_reg = nf.evaluate(reg.x)
    p_train = float(np.mean(reg.a)) if config.variant == "printed" else None
    fd = pseudo_outcome_delta(reg.y, reg.a, reg.z, nu_reg, config.variant, clip.tau, p_train)
    fo = pseudo_outcome_omega(reg.y, reg.a, reg.z, nu_reg, config.variant, clip.tau, p_train)
    m_d = fw_fit(reg.x, fd.values, config.basis, clip.c2, seed)
    # the relevance floor bounds |Omega| by 1/tau
    m_o = fw_fit(reg.x, fo.values, config.basis, min(clip.c2, 1.0 / clip.tau), seed + 1)
    x_eval = data.x[eval_idx]
    s = nf.evaluate(x_eval)
    s["delta"] = fw_predict(m_d, x_eval)
    s["omega"] = fw_predict(m_o, x_eval)
    info = {
        "prob_clip_rate": nf.clip_rate(x_eval),
        "fw_clip_rate": float(np.mean(np.r_[np.abs(s["delta"]) >= m_d.cap, np.abs(s["omega"]) >= m_o.cap])),
        "degrees": (m_d.degree, m_o.degree),
    }
    return s, info


def _average(a: dict, b: dict) -> dict:
    return {key: 0.5 * (a[key] + b[key]) for key in a}


def _single_split(dataset: Dataset, config: RunConfig, r: int, p_a1, clip, surfaces):
    plan = _fold_plan(dataset, config, r)
    gamma = np.empty(dataset.n)
    per_fold, infos = [], []
    weak = 0
    for k in range(config.k):
        idx = plan.fold(k)
        seed = repeat_seed(config.seed, r, k)
        if surfaces is not None:
            s = surfaces(dataset.x[idx])
            info = {}
        else:
            c1, c2 = plan.nested_halves[k]
            try:
                s1, i1 = _half_surfaces(dataset, c1, c2, idx, config, clip, seed)
                s2, i2 = _half_surfaces(dataset, c2, c1, idx, config, clip, seed + 7)
            except WeakInstrumentError as exc:
                raise WeakInstrumentError(f"{exc} (repeat {r}, fold {k})") from exc
            except ValueError as exc:
                if "arm absent" in str(exc):
                    raise EstimationError(
                        f"{exc} (repeat {r}, fold {k}); consider stratified folds"
                    ) from exc
                raise
            s = _average(s1, s2)
            info = {
                "prob_clip_rate": 0.5 * (i1["prob_clip_rate"] + i2["prob_clip_rate"]),
                "fw_clip_rate": 0.5 * (i1["fw_clip_rate"] + i2["fw_clip_rate"]),
                "degrees": [i1["degrees"], i2["degrees"]],
            }
        weak += int(np.sum(np.abs(s["p1"] - s["p0"]) < clip.tau))
        g = gamma_terms(dataset.y[idx], dataset.a[idx], dataset.z[idx], s, p_a1, config.theta_form)
        gamma[idx] = g
        per_fold.append(float(np.mean(g)))
        infos.append(info)
    psi = float(np.mean(per_fold))
    if config.variance == "eif":
        # linearisation of the ratio with an estimated P(A)
        g_var = gamma + psi * (1 - dataset.a / p_a1)
    else:
        g_var = gamma
    sigma2, _ = variance_and_ci(g_var, psi, config.alpha, dataset.n, plan.assignments)
    return {
        "psi": psi,
        "sigma2": sigma2,
        "per_fold": per_fold,
        "weak_share": weak / dataset.n,
        "fold_info": infos,
    }


def _require_valid(dataset: Dataset):
    issues = validate(dataset)
    if issues:
        raise ValueError("invalid dataset: " + "; ".join(issues))


def _run_repeats(fn, args_list, workers):
    if workers and workers > 1 and len(args_list) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, *zip(*args_list)))
    return [fn(*args) for args in args_list]


def cross_fit(
    dataset: Dataset,
    config: RunConfig = RunConfig(),
    surfaces: Optional[Callable] = None,
    workers: int = 1,
    diagnostics: bool = True,
) -> EstimateReport:
    """Cross-fitted EIF estimate with FW-learned ``delta`` and ``Omega``.

    ``surfaces`` optionally injects known nuisance functions (a callable
    returning ``p0, p1, pi1, e0, e1, delta, omega`` for a covariate matrix),
    bypassing Steps 1-2.
    """
    _require_valid(dataset)
    p_a1 = float(np.mean(dataset.a))
    clip = config.clip.resolve(dataset.y)
    args = [(dataset, config, r, p_a1, clip, surfaces) for r in range(config.repeats)]
    results = _run_repeats(_single_split, args, workers if surfaces is None else 1)
    psis = [res["psi"] for res in results]
    sig = [res["sigma2"] for res in results]
    psi, sigma2, ci = aggregate_repeats(psis, sig, dataset.n, config.alpha)
    diag = {
        "weak_instrument_share": float(np.mean([res["weak_share"] for res in results])),
        "prob_clip_rate": _mean_info(results, "prob_clip_rate"),
        "fw_clip_rate": _mean_info(results, "fw_clip_rate"),
    }
    if diagnostics:
        diag.update(_mivhr_diag(dataset))
    log.debug("EIF-FW psi=%.4f sigma2=%.4f", psi, sigma2)
    return EstimateReport(
        estimator="EIF-FW",
        psi_hat=psi,
        sigma2_hat=sigma2,
        ci=ci,
        n=dataset.n,
        alpha=config.alpha,
        per_fold=results[int(np.argsort(psis)[len(psis) // 2])]["per_fold"],
        repeats=[{"psi": p, "sigma2": s} for p, s in zip(psis, sig)],
        diagnostics=diag,
    )


def _mean_info(results, key):
    vals = [i[key] for res in results for i in res["fold_info"] if key in i]
    return float(np.mean(vals)) if vals else None


def _mivhr_diag(dataset):
    try:
        res = mivhr_test(dataset)
    except (ValueError, np.linalg.LinAlgError) as exc:
        return {"mivhr_p_value": None, "mivhr_note": str(exc)}
    return {"mivhr_p_value": res.p_value, "mivhr_ridge": res.ridge_used}


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MivhrResult:
    p_value: float
    statistic: float
    coef: float
    ridge_used: bool


def mivhr_test(dataset: Dataset) -> MivhrResult:
    """Linear-in-X t-test of ``Y independent of Z given A=1, X``.

    Among treated rows, regress Y on (1, X, Z) by least squares and test the Z
    coefficient. Only an approximate check of the conditional independence.
    """
    t = dataset.a == 1
    if not (t & (dataset.z == 0)).any() or not (t & (dataset.z == 1)).any():
        raise ValueError("treated rows missing in one instrument arm")
    y = dataset.y[t]
    D = np.column_stack([np.ones(t.sum()), dataset.x[t], dataset.z[t]])
    n, p = D.shape
    if n <= p:
        raise ValueError("too few treated rows for the MIVHR regression")
    XtX = D.T @ D
    ridge = np.linalg.matrix_rank(D) < p
    if ridge:
        XtX = XtX + 1e-8 * np.trace(XtX) / p * np.eye(p)
    inv = np.linalg.inv(XtX)
    beta = inv @ D.T @ y
    resid = y - D @ beta
    s2 = resid @ resid / (n - p)
    se = np.sqrt(s2 * inv[-1, -1])
    tstat = beta[-1] / se if se > 0 else np.inf
    pval = float(2 * stats.t.sf(abs(tstat), n - p))
    return MivhrResult(pval, float(tstat), float(beta[-1]), bool(ridge))


def mivhr_diagnostic(dataset: Dataset, config: Optional[RunConfig] = None) -> float:
    return mivhr_test(dataset).p_value


# ---------------------------------------------------------------------------
# multiple robustness
# ---------------------------------------------------------------------------

ROBUSTNESS_PATTERNS = {
    # names of the nuisances held at their true values
    "truth": {"p0", "p1", "pi", "e0", "delta"},
    "M1": {"p0", "e0", "delta"},
    "M2": {"p0", "p1", "pi"},
    "M3": {"delta", "pi"},
    "all": set(),
}


def distort_surfaces(true: dict, protected: set, c1: float = 0.01) -> dict:
    """Misspecify every unprotected nuisance in a fixed way.

    Probabilities are scaled by 1.3 and re-clipped; ``e0`` and ``delta`` are
    shifted by 0.3. The variation-independent parameterisation
    (p0, p1, pi, e0, delta) is used, so ``e1 = e0 + delta (p1 - p0)``,
    ``Omega = 1 / (p1 - p0)`` and ``rho`` are derived from the (possibly
    distorted) pieces.
    """
    def prob(key, v):
        return v if key in protected else np.clip(1.3 * v, c1, 1 - c1)

    p0 = prob("p0", true["p0"])
    p1 = prob("p1", true["p1"])
    pi1 = true["pi1"] if "pi" in protected else np.clip(1.3 * true["pi1"], c1, 1 - c1)
    e0 = true["e0"] if "e0" in protected else true["e0"] + 0.3
    delta = true["delta"] if "delta" in protected else true["delta"] + 0.3
    return {
        "p0": p0,
        "p1": p1,
        "pi1": pi1,
        "e0": e0,
        "e1": e0 + delta * (p1 - p0),
        "delta": delta,
        "omega": 1.0 / (p1 - p0),
    }


def robustness_moment_check(scenario: str, n_mc: int = 1_000_000, seed: int = 0, params=None):
    """Monte-Carlo mean of the EIF at the true ATT under a misspecification pattern.

    Returns ``(mean, mc_se)``.
    """
    from .simulation import Dgp4Params, OracleSurfaces, generate_dgp4

    if scenario not in ROBUSTNESS_PATTERNS:
        raise ValueError(f"unknown scenario {scenario!r}")
    params = params or Dgp4Params()
    sim = generate_dgp4(n_mc, seed, params)
    oracle = OracleSurfaces(params)
    s = distort_surfaces(oracle.evaluate(sim.data.x), ROBUSTNESS_PATTERNS[scenario])
    vals = eif_evaluate(sim.data.y, sim.data.a, sim.data.z, s, oracle.att(), oracle.p_treated())
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(n_mc))
