"""Data-generating processes, quadrature oracles and the replication harness."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .data import Dataset

log = logging.getLogger(__name__)

ESTIMATORS = ("EIF-FW", "EIF", "Wald", "2SLS")


class DgpRangeError(AssertionError):
    """A latent propensity fell outside (0, 1) for some draw."""


@dataclass(frozen=True)
class SimDraw:
    """Observed data plus the hidden side channel used by oracles."""

    data: Dataset
    u: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# the multiplicative-IV simulation design
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dgp4Params:
    """Two uniform covariates, a normal latent confounder and a log-linear propensity.

    ``log pr(A=1 | Z, X, U) = Z (0.5 + (x1 + x2)/2) - x1 - x2 - U/4``, so the
    instrument multiplies the latent propensity by ``exp(0.5 + (x1+x2)/2)``.
    ``z_effect`` scales the direct instrument term in the treated outcome; with
    ``z_effect=0`` the law satisfies ``Y independent of Z given A=1, X``.
    """

    u_mean: float = 4.0
    u_sd: float = 0.5
    noise_sd: float = 0.5
    z_intercept: float = -1.0
    z_effect: float = 1.0

    def propensity(self, z, x1, x2, u):
        return np.exp(z * (0.5 + (x1 + x2) / 2) - x1 - x2 - u / 4)

    def instrument_prob(self, x1, x2):
        return 1.0 / (1.0 + np.exp(-(self.z_intercept + x1 + x2)))

    def mean_y0(self, x1, x2, u):
        return (x1 + x2) * np.exp(u / 6)

    def mean_y1(self, x1, x2, u, z):
        return (x1 + x2 + x1 * x2 + self.z_effect * z) * np.exp(u / 4)


def generate_dgp4(n: int, seed: int = 0, params: Dgp4Params = Dgp4Params()) -> SimDraw:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x1 = rng.uniform(size=n)
    x2 = rng.uniform(size=n)
    u = rng.normal(params.u_mean, params.u_sd, size=n)
    z = (rng.uniform(size=n) < params.instrument_prob(x1, x2)).astype(float)
    prop = params.propensity(z, x1, x2, u)
    bad = np.flatnonzero((prop <= 0) | (prop >= 1))
    if len(bad):
        i = bad[0]
        raise DgpRangeError(
            f"propensity {prop[i]:.6g} outside (0,1) at row {i}: "
            f"x1={x1[i]:.6g} x2={x2[i]:.6g} z={z[i]:g} u={u[i]:.6g}"
        )
    a = (rng.uniform(size=n) < prop).astype(float)
    eps0 = rng.normal(0.0, 1.0, size=n) * params.noise_sd
    eps1 = rng.normal(0.0, 1.0, size=n) * params.noise_sd
    mu0 = params.mean_y0(x1, x2, u)
    mu1 = params.mean_y1(x1, x2, u, z)
    y0, y1 = mu0 + eps0, mu1 + eps1
    y = np.where(a == 1, y1, y0)
    data = Dataset(y, a, z, np.column_stack([x1, x2]), ("x1", "x2"))
    return SimDraw(data, u, y0, y1, mu0, mu1)


class OracleSurfaces:
    """True nuisance functions of the simulation design by Gauss-Hermite quadrature over U."""

    chunk = 65536

    def __init__(self, params: Dgp4Params = Dgp4Params(), nodes: int = 64):
        self.params = params
        t, w = hermegauss(nodes)
        self.u = params.u_mean + params.u_sd * t
        self.w = w / w.sum()

    def _eval_chunk(self, x):
        P = self.params
        x1, x2 = x[:, :1], x[:, 1:2]
        u = self.u[None, :]
        out = {}
        m0 = P.mean_y0(x1, x2, u)
        for z in (0, 1):
            prop = P.propensity(z, x1, x2, u)
            out[f"p{z}"] = (prop @ self.w)
            out[f"e{z}"] = ((1 - prop) * m0) @ self.w
            # E[A Y^1 | Z=z, X] and E[A Y^0 | Z=z, X]
            out[f"ay1_{z}"] = (prop * P.mean_y1(x1, x2, u, z)) @ self.w
            out[f"ay0_{z}"] = (prop * m0) @ self.w
        out["pi1"] = P.instrument_prob(x[:, 0], x[:, 1])
        return out

    def evaluate(self, x) -> dict:
        """All nuisance functions at the rows of ``x`` (first two columns used)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        parts = [self._eval_chunk(x[i : i + self.chunk]) for i in range(0, len(x), self.chunk)]
        s = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]} if parts else {}
        pi1, pi0 = s["pi1"], 1 - s["pi1"]
        s["rho"] = s["p1"] * pi1 + s["p0"] * pi0
        s["omega"] = 1.0 / (s["p1"] - s["p0"])
        s["delta"] = (s["e1"] - s["e0"]) * s["omega"]
        # E[Y | A=1, X] and E[Y^0 | A=1, X]
        s["psi1"] = (s["ay1_1"] * pi1 + s["ay1_0"] * pi0) / s["rho"]
        s["y0_treated"] = (s["ay0_1"] * pi1 + s["ay0_0"] * pi0) / s["rho"]
        return s

    @cached_property
    def _x_integrals(self):
        t, w = leggauss(48)
        g = 0.5 * (t + 1)
        wg = 0.5 * w
        x1, x2 = np.meshgrid(g, g, indexing="ij")
        W = np.outer(wg, wg).ravel()
        s = self.evaluate(np.column_stack([x1.ravel(), x2.ravel()]))
        p_a = float(W @ s["rho"])
        treated_effect = W @ (s["rho"] * (s["psi1"] - s["y0_treated"]))
        return p_a, float(treated_effect / p_a), float(W @ (s["rho"] * s["delta"]) / p_a)

    def p_treated(self) -> float:
        """Marginal pr(A=1)."""
        return self._x_integrals[0]

    def att(self) -> float:
        """The ATT ``E[Y^1 - Y^0 | A=1]`` by quadrature over X and U."""
        return self._x_integrals[1]

    def mean_delta_treated(self) -> float:
        """``E[delta(X) | A=1]``."""
        return self._x_integrals[2]


def oracle_att(params: Dgp4Params = Dgp4Params(), n_mc: int = 1_000_000, seed: int = 0):
    """Monte-Carlo ATT among draws with A=1; returns ``(estimate, mc_se)``.

    Uses the conditional means of the potential outcomes, so the additive
    outcome noise does not enter.
    """
    if n_mc < 100_000:
        raise ValueError("n_mc must be at least 1e5")
    sim = generate_dgp4(n_mc, seed, params)
    eff = (sim.mu1 - sim.mu0)[sim.data.a == 1]
    return float(eff.mean()), float(eff.std(ddof=1) / np.sqrt(len(eff)))


# ---------------------------------------------------------------------------
# generalised latent index models
# ---------------------------------------------------------------------------

GLIM_VARIANTS = ("multiplicative", "additive", "monotone")


@dataclass(frozen=True)
class GlimParams:
    """Treatment selection ``A^z = 1{h(z, U) >= eps_z}`` with ``U ~ Uniform(u_low, u_high)``.

    ``multiplicative``: ``h = g(z) U`` with independent uniform thresholds.
    ``additive``: ``h = g(z) + U`` with independent uniform thresholds.
    ``monotone``: ``h = g(z) + U`` with thresholds fixed at 1.
    """

    variant: str = "multiplicative"
    g0: float = 0.4
    g1: float = 0.8
    u_low: float = 0.0
    u_high: float = 1.0
    z_prob: float = 0.5
    outcome: str = "dgp4"
    noise_sd: float = 0.5

    def __post_init__(self):
        if self.variant not in GLIM_VARIANTS:
            raise ValueError(f"unknown GLIM variant {self.variant!r}")
        if self.outcome not in ("dgp4", "none"):
            raise ValueError(f"unknown GLIM outcome model {self.outcome!r}")
        if not self.u_low <= self.u_high:
            raise ValueError("u_low must not exceed u_high")
        if not 0 < self.z_prob < 1:
            raise ValueError("z_prob must lie in (0, 1)")

    def g(self, z):
        return np.where(z == 1, self.g1, self.g0)

    def index(self, z, u):
        if self.variant == "multiplicative":
            return self.g(z) * u
        return self.g(z) + u


def generate_glim(params: GlimParams, n: int, seed: int = 0) -> SimDraw:
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = rng.uniform(size=(n, 2))
    u = rng.uniform(params.u_low, params.u_high, size=n)
    z = (rng.uniform(size=n) < params.z_prob).astype(float)
    if params.variant == "monotone":
        eps = np.ones((n, 2))
    else:
        eps = rng.uniform(size=(n, 2))
    pot = np.empty((n, 2))
    for zz in (0, 1):
        h = params.index(np.full(n, zz), u)
        if params.variant != "monotone":
            bad = np.flatnonzero((h <= 0) | (h >= 1))
            if len(bad):
                i = bad[0]
                raise ValueError(f"index h({zz}, U)={h[i]:.6g} outside (0,1) at row {i} (U={u[i]:.6g})")
        pot[:, zz] = (h >= eps[:, zz]).astype(float)
    a = np.where(z == 1, pot[:, 1], pot[:, 0])
    x1, x2 = x[:, 0], x[:, 1]
    if params.outcome == "dgp4":
        mu0 = (x1 + x2) * np.exp(u / 6)
        mu1 = (x1 + x2 + x1 * x2 + z) * np.exp(u / 4)
    else:
        mu0 = np.zeros(n)
        mu1 = np.zeros(n)
    y0 = mu0 + params.noise_sd * rng.normal(size=n)
    y1 = mu1 + params.noise_sd * rng.normal(size=n)
    y = np.where(a == 1, y1, y0)
    data = Dataset(y, a, z, x, ("x1", "x2"))
    return SimDraw(data, u, y0, y1, mu0, mu1, {"a0": pot[:, 0], "a1": pot[:, 1]})


# ---------------------------------------------------------------------------
# replication harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    n: int
    replicates: int
    estimators: tuple = ("EIF-FW", "EIF", "Wald")
    config: Optional[object] = None
    dgp: str = "dgp4"
    glim: Optional[GlimParams] = None

    def __post_init__(self):
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimator(s): {', '.join(unknown)}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.dgp not in ("dgp4", "glim"):
            raise ValueError(f"unknown dgp {self.dgp!r}")


@dataclass
class EstimatorSummary:
    estimator: str
    n: int
    replicates: int
    failures: int
    bias: float
    ase: float
    ese: float
    coverage: float
    ese_defined: bool = True


@dataclass
class ReplicationSummary:
    n: int
    replicates: int
    truth: float
    rows: dict
    estimates: dict
    failures: dict

    def row(self, estimator) -> EstimatorSummary:
        return self.rows[estimator]


def _draw(scenario: Scenario, seed: int) -> SimDraw:
    if scenario.dgp == "glim":
        return generate_glim(scenario.glim or GlimParams(), scenario.n, seed)
    return generate_dgp4(scenario.n, seed)


def _truth(scenario: Scenario) -> float:
    if scenario.dgp == "glim":
        sim = generate_glim(scenario.glim or GlimParams(), 1_000_000, 0)
        return float((sim.mu1 - sim.mu0)[sim.data.a == 1].mean())
    return OracleSurfaces().att()


def run_one(scenario: Scenario, seed: int, rep: int) -> dict:
    """Every requested estimator on replicate ``rep``, sharing one fold seed."""
    from .baselines import substitution_estimates, tsls_estimate
    from .estimator import RunConfig, cross_fit, repeat_seed

    config = scenario.config or RunConfig()
    config = replace(config, seed=repeat_seed(seed, rep, 1))
    out = {}
    try:
        data = _draw(scenario, repeat_seed(seed, rep, 0)).data
    except Exception as exc:  # recorded as a failure for every estimator
        return {e: ("error", f"{type(exc).__name__}: {exc}") for e in scenario.estimators}
    if "EIF-FW" in scenario.estimators:
        try:
            r = cross_fit(data, config, diagnostics=False)
            out["EIF-FW"] = (r.psi_hat, r.se, r.ci)
        except Exception as exc:
            out["EIF-FW"] = ("error", f"{type(exc).__name__}: {exc}")
    subs = [e for e in ("EIF", "Wald") if e in scenario.estimators]
    if subs:
        try:
            reports = substitution_estimates(data, config, subs)
            for e in subs:
                out[e] = (reports[e].psi_hat, reports[e].se, reports[e].ci)
        except Exception as exc:
            for e in subs:
                out[e] = ("error", f"{type(exc).__name__}: {exc}")
    if "2SLS" in scenario.estimators:
        try:
            t = tsls_estimate(data, config.alpha)
            out["2SLS"] = (t.estimate, t.se, t.ci)
        except Exception as exc:
            out["2SLS"] = ("error", f"{type(exc).__name__}: {exc}")
    return out


def summarize(results: list, scenario: Scenario, truth: float) -> ReplicationSummary:
    rows, estimates, failures = {}, {}, {}
    for e in scenario.estimators:
        ok = [r[e] for r in results if r[e][0] != "error"]
        failures[e] = [r[e][1] for r in results if r[e][0] == "error"]
        est = np.array([o[0] for o in ok])
        estimates[e] = np.array([r[e][0] if r[e][0] != "error" else np.nan for r in results])
        if len(ok) == 0:
            rows[e] = EstimatorSummary(e, scenario.n, 0, len(failures[e]), np.nan, np.nan, np.nan, np.nan, False)
            continue
        se = np.array([o[1] for o in ok])
        cover = np.array([o[2][0] <= truth <= o[2][1] for o in ok])
        defined = len(ok) > 1
        rows[e] = EstimatorSummary(
            estimator=e,
            n=scenario.n,
            replicates=len(ok),
            failures=len(failures[e]),
            bias=float(np.mean(est - truth)),
            ase=float(np.mean(se)),
            ese=float(np.std(est, ddof=1)) if defined else float("nan"),
            coverage=float(np.mean(cover)),
            ese_defined=defined,
        )
    return ReplicationSummary(scenario.n, scenario.replicates, truth, rows, estimates, failures)


def _run_one_star(args):
    return run_one(*args)


def run_replications(scenario: Scenario, seed: int = 0, workers: int = 1, progress=None) -> ReplicationSummary:
    """Run ``scenario.replicates`` independent replicates and summarize per estimator.

    Replicate ``r`` depends only on ``(seed, r)``, so results do not depend on
    ``workers``. Failed replicates are excluded and counted.
    """
    truth = _truth(scenario)
    jobs = [(scenario, seed, r) for r in range(scenario.replicates)]
    results = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, res in enumerate(ex.map(_run_one_star, jobs, chunksize=max(1, len(jobs) // (4 * workers)))):
                results.append(res)
                if progress:
                    progress(i + 1, len(jobs))
    else:
        for i, job in enumerate(jobs):
            results.append(run_one(*job))
            if progress:
                progress(i + 1, len(jobs))
    return summarize(results, scenario, truth)
