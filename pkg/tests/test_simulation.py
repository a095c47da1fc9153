from dataclasses import replace

import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from miv_att.data import validate
from miv_att.estimator import RunConfig
from miv_att.learners import ClipPolicy, LearnerSpec, NuisanceSpecs
from miv_att.simulation import (
    Dgp4Params,
    DgpRangeError,
    GlimParams,
    OracleSurfaces,
    Scenario,
    generate_dgp4,
    generate_glim,
    oracle_att,
    run_replications,
    summarize,
)

LIN = LearnerSpec(interactions=False)
FAST = RunConfig(repeats=1, learners=NuisanceSpecs(LIN, LIN, LIN), clip=ClipPolicy(tau=0.1), bootstrap=100)


@pytest.fixture(scope="module")
def big_draw():
    return generate_dgp4(1_000_000, seed=123)


def test_instrument_share_matches_quadrature(big_draw):
    t, w = leggauss(40)
    g, wg = 0.5 * (t + 1), 0.5 * w
    s = g[:, None] + g[None, :]
    expected = np.sum(np.outer(wg, wg) / (1 + np.exp(1 - s)))
    assert abs(big_draw.data.z.mean() - expected) < 0.002


def test_empirical_att_near_reported_value(big_draw):
    a = big_draw.data.a == 1
    assert abs(np.mean(big_draw.y1[a] - big_draw.y0[a]) - 3.164) < 0.02


def test_generation_is_deterministic():
    a, b = generate_dgp4(50, seed=4), generate_dgp4(50, seed=4)
    np.testing.assert_array_equal(a.data.y, b.data.y)
    np.testing.assert_array_equal(a.u, b.u)
    assert not np.array_equal(a.data.y, generate_dgp4(50, seed=5).data.y)


def test_out_of_range_propensity_raises():
    with pytest.raises(DgpRangeError, match="outside \\(0,1\\) at row"):
        generate_dgp4(100, seed=0, params=Dgp4Params(u_mean=-4.0))
    with pytest.raises(ValueError):
        generate_dgp4(0)


def test_oracle_surfaces_match_monte_carlo():
    params = Dgp4Params()
    oracle = OracleSurfaces(params)
    rng = np.random.default_rng(7)
    probes = rng.uniform(size=(10, 2))
    s = oracle.evaluate(probes)
    half = rng.normal(params.u_mean, params.u_sd, size=500_000)
    u = np.r_[half, 2 * params.u_mean - half]  # antithetic pairs
    for i, (x1, x2) in enumerate(probes):
        for z in (0, 1):
            prop = params.propensity(z, x1, x2, u)
            assert abs(prop.mean() - s[f"p{z}"][i]) < 1e-3
            assert abs(((1 - prop) * params.mean_y0(x1, x2, u)).mean() - s[f"e{z}"][i]) < 1e-3
        assert s["pi1"][i] == pytest.approx(1 / (1 + np.exp(1 - x1 - x2)))


def test_oracle_att_and_treated_share(big_draw):
    oracle = OracleSurfaces()
    assert oracle.p_treated() == pytest.approx(big_draw.data.a.mean(), abs=0.002)
    assert oracle.att() == pytest.approx(3.164, abs=0.005)


def test_identification_of_untreated_mean_among_treated(big_draw):
    a = big_draw.data.a == 1
    y0 = big_draw.y0[a]
    mc_se = y0.std() / np.sqrt(a.sum())
    assert abs(y0.mean() + OracleSurfaces().mean_delta_treated()) < 3 * mc_se


def test_oracle_att_monte_carlo():
    est, se = oracle_att(n_mc=1_000_000, seed=1)
    assert abs(est - 3.164) < max(3 * se, 0.02) and se > 0
    with pytest.raises(ValueError):
        oracle_att(n_mc=1000)


def test_oracle_att_invariant_to_outcome_noise():
    assert oracle_att(Dgp4Params(noise_sd=0.0), 200_000, 3) == oracle_att(Dgp4Params(noise_sd=2.0), 200_000, 3)


def test_glim_multiplicative_ratio_constant_in_u():
    p = GlimParams("multiplicative", g0=0.4, g1=0.8, u_low=0.5, u_high=1.0, outcome="none")
    sim = generate_glim(p, 1_000_000, seed=2)
    edges = np.quantile(sim.u, np.linspace(0, 1, 11))
    bins = np.clip(np.searchsorted(edges, sim.u, side="right") - 1, 0, 9)
    ratios = [sim.extra["a1"][bins == b].mean() / sim.extra["a0"][bins == b].mean() for b in range(10)]
    assert max(abs(r / 2.0 - 1) for r in ratios) < 0.05


def test_glim_additive_ratio_varies_with_u():
    p = GlimParams("additive", g0=0.0, g1=0.3, u_low=0.05, u_high=0.65, outcome="none")
    sim = generate_glim(p, 400_000, seed=2)
    lo, hi = sim.u < 0.2, sim.u > 0.5
    r_lo = sim.extra["a1"][lo].mean() / sim.extra["a0"][lo].mean()
    r_hi = sim.extra["a1"][hi].mean() / sim.extra["a0"][hi].mean()
    assert r_lo > 1.5 * r_hi


def test_glim_monotone_has_no_defiers():
    sim = generate_glim(GlimParams("monotone", g0=0.1, g1=0.5), 100_000, seed=3)
    assert np.all(sim.extra["a1"] >= sim.extra["a0"])


def test_glim_equal_index_gives_irrelevant_instrument():
    sim = generate_glim(GlimParams(g0=0.6, g1=0.6), 400_000, seed=4)
    d = sim.data
    assert abs(d.a[d.z == 1].mean() - d.a[d.z == 0].mean()) < 0.005


def test_glim_range_violation_names_row():
    with pytest.raises(ValueError, match="at row \\d+"):
        generate_glim(GlimParams("additive", g0=0.1, g1=0.5), 100, seed=0)


def test_glim_output_validates():
    assert validate(generate_glim(GlimParams(), 1000, seed=1).data) == []


def test_single_replicate_summary_flags_ese():
    s = run_replications(Scenario(300, 1, ("Wald",), FAST), seed=1)
    row = s.row("Wald")
    assert not row.ese_defined and np.isnan(row.ese)
    assert row.bias == pytest.approx(s.estimates["Wald"][0] - s.truth)
    assert 0 <= row.coverage <= 1


def test_replicates_do_not_depend_on_workers():
    sc = Scenario(300, 3, ("EIF", "Wald", "2SLS"), FAST)
    a = run_replications(sc, seed=5, workers=1)
    b = run_replications(sc, seed=5, workers=2)
    for e in sc.estimators:
        np.testing.assert_array_equal(a.estimates[e], b.estimates[e])


def test_failures_are_counted_not_dropped():
    results = [{"Wald": (3.0, 0.1, (2.8, 3.2))}, {"Wald": ("error", "WeakInstrumentError: x")}]
    s = summarize(results, Scenario(300, 2, ("Wald",)), truth=3.1)
    row = s.row("Wald")
    assert row.failures == 1 and row.replicates == 1 and s.failures["Wald"] == ["WeakInstrumentError: x"]


def test_pairing_reduces_variance_of_differences():
    sc = Scenario(600, 16, ("EIF-FW", "Wald"), FAST)
    s = run_replications(sc, seed=8)
    fw, wald = s.estimates["EIF-FW"], s.estimates["Wald"]
    ok = np.isfinite(fw) & np.isfinite(wald)
    paired = np.var(fw[ok] - wald[ok], ddof=1)
    unpaired = np.var(fw[ok], ddof=1) + np.var(wald[ok], ddof=1)
    assert paired < unpaired


def test_scenario_validation():
    with pytest.raises(ValueError, match="unknown estimator"):
        Scenario(300, 2, ("OLS",))
    with pytest.raises(ValueError):
        Scenario(300, 0)
    with pytest.raises(ValueError):
        replace(GlimParams(), variant="logistic")
