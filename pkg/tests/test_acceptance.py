"""Acceptance checks, one test (or group of tests) per numbered criterion.

Each test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion at the end of the session. The simulation-based
criteria (4, 5, 6) share one module-scoped run of ``configs/desk_study.json``.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from miv_att.cli import main
from miv_att.config import load_config
from miv_att.data import Dataset
from miv_att.estimator import mivhr_test, robustness_moment_check, theta_term
from miv_att.fw import BasisSpec, fw_fit, fw_leverage, fw_predict, poly_features
from miv_att.simulation import (
    Dgp4Params,
    GlimParams,
    OracleSurfaces,
    Scenario,
    generate_dgp4,
    generate_glim,
    oracle_att,
    run_replications,
)

ROOT = Path(__file__).resolve().parents[1]
ATT = 3.164
SEED = 2024


def detail(record_property, text):
    record_property("detail", text)


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ---------------------------------------------------------------------------
# 1-3: ground truth, identification, robustness
# ---------------------------------------------------------------------------


@criterion(1, "oracle ATT at 1e6 draws is 3.164 +/- 0.02 in under 1 min")
def test_ground_truth_att(record_property):
    start = time.perf_counter()
    est, se = oracle_att(n_mc=1_000_000, seed=SEED)
    elapsed = time.perf_counter() - start
    detail(record_property, f"ATT {est:.4f} (MC-SE {se:.4f}), {elapsed:.1f} s")
    assert abs(est - ATT) <= 0.02
    assert elapsed < 60


@criterion(2, "plug-in with oracle surfaces at N=1e5 within 0.03 of 3.164")
def test_identification_plugin(record_property):
    start = time.perf_counter()
    d = generate_dgp4(100_000, seed=SEED).data
    s = OracleSurfaces().evaluate(d.x)
    plug_in = float(np.sum(d.a * (d.y + s["delta"])) / np.sum(d.a))
    elapsed = time.perf_counter() - start
    detail(record_property, f"plug-in {plug_in:.4f}, {elapsed:.1f} s")
    assert abs(plug_in - ATT) <= 0.03
    assert elapsed < 120


@pytest.fixture(scope="module")
def robustness():
    start = time.perf_counter()
    out = {sc: robustness_moment_check(sc, 1_000_000, seed=SEED) for sc in ("truth", "M1", "M2", "M3", "all")}
    return out, time.perf_counter() - start


@criterion(3, "EIF mean zero at truth and under M1/M2/M3; all-distorted control detected")
def test_multiple_robustness(robustness, record_property):
    res, elapsed = robustness
    z = {sc: m / se for sc, (m, se) in res.items()}
    detail(record_property, ", ".join(f"{sc} z={v:.2f}" for sc, v in z.items()) + f", {elapsed:.0f} s")
    for sc in ("truth", "M1", "M2", "M3"):
        assert abs(z[sc]) <= 3, sc
    assert abs(z["all"]) > 3
    assert elapsed < 300


# ---------------------------------------------------------------------------
# 4-6: the desk-scale simulation study
# ---------------------------------------------------------------------------


def _workers():
    env = os.environ.get("MIV_ATT_WORKERS")
    return int(env) if env else (os.cpu_count() or 1)


@pytest.fixture(scope="module")
def study():
    cfg = load_config(str(ROOT / "configs" / "desk_study.json"))
    sim = cfg.simulate
    out = {}
    for n in sim.sizes:
        out[n] = run_replications(Scenario(n, sim.replicates, sim.estimators, cfg.run), cfg.seed, _workers())
    return out


def _fmt(row):
    return f"bias {row.bias:+.3f}, ASE {row.ase:.3f}, ESE {row.ese:.3f}, cov {row.coverage:.3f}, failures {row.failures}"


@pytest.mark.slow
@criterion(4, "N=1200 EIF-FW coverage in [0.92, 0.99] and |bias| <= 0.12; N=300 Wald coverage < 0.92")
def test_desk_scale_study_targets(study, record_property):
    fw = study[1200].row("EIF-FW")
    wald = study[300].row("Wald")
    detail(record_property, f"EIF-FW@1200 {_fmt(fw)}; Wald@300 cov {wald.coverage:.3f}")
    assert fw.replicates + fw.failures == 300
    assert 0.92 <= fw.coverage <= 0.99
    assert abs(fw.bias) <= 0.12
    assert wald.coverage < 0.92


@pytest.mark.slow
@criterion(5, "EIF-FW |bias| at N=3600 below |bias| at N=300")
def test_bias_shrinks(study, record_property):
    small, large = study[300].row("EIF-FW"), study[3600].row("EIF-FW")
    detail(record_property, f"|bias| {abs(small.bias):.4f} at 300 ({small.failures} failures) vs {abs(large.bias):.4f} at 3600")
    assert abs(large.bias) < abs(small.bias)


@pytest.mark.slow
@criterion(6, "N=2400 EIF-FW mean ASE / ESE in [0.8, 1.25]")
def test_variance_calibration(study, record_property):
    row = study[2400].row("EIF-FW")
    ratio = row.ase / row.ese
    detail(record_property, f"ASE/ESE {ratio:.3f} ({_fmt(row)})")
    assert 0.8 <= ratio <= 1.25


@pytest.mark.slow
def test_empirical_standard_error_decreases_with_n(study):
    for est in study[300].estimates:
        assert study[3600].row(est).ese < study[300].row(est).ese, est


# ---------------------------------------------------------------------------
# 7-8: exactness of the FW learner and the reparameterisation identity
# ---------------------------------------------------------------------------


def dense_fw(phi_train, f, phi_query, ridge):
    G = phi_train.T @ phi_train + ridge * np.eye(phi_train.shape[1])
    b = phi_train.T @ f
    out = []
    for phi in phi_query:
        M = np.linalg.inv(G + np.outer(phi, phi))
        out.append((1 - phi @ M @ phi) * phi @ M @ b)
    return np.array(out)


@criterion(7, "FW closed forms to 1e-12, dense-formula equivalence to 1e-8, leverage in [0, 1]")
def test_fw_exactness(record_property):
    intercept = BasisSpec(degree_grid=(0,), standardize=False)
    assert fw_predict(fw_fit(np.zeros((0, 1)), np.zeros(0), intercept), [[0.2]])[0] == pytest.approx(0.0, abs=1e-12)
    assert fw_predict(fw_fit(np.array([[0.4]]), np.array([2.0]), intercept), [[3.0]])[0] == pytest.approx(0.5, abs=1e-12)

    rng = np.random.default_rng(SEED)
    worst = 0.0
    for n in (5, 12, 25, 50):
        for J in range(4):
            for d in (1, 2):
                x = rng.uniform(-1, 1, size=(n, d))
                f = np.cos(2 * x.sum(axis=1)) + rng.normal(size=n)
                m = fw_fit(x, f, BasisSpec(degree_grid=(J,), standardize=False))
                q = rng.uniform(-2, 2, size=(25, d))
                ref = dense_fw(poly_features(x, J), f, poly_features(q, J), m.ridge)
                err = np.max(np.abs(fw_predict(m, q) - ref) / np.maximum(1.0, np.abs(ref)))
                worst = max(worst, float(err))
    m = fw_fit(rng.uniform(size=(400, 2)), rng.normal(size=400), BasisSpec(degree_grid=(3,)))
    h = fw_leverage(m, rng.normal(scale=4, size=(10_000, 2)))
    detail(record_property, f"max dense discrepancy {worst:.1e}, leverage range [{h.min():.3f}, {h.max():.3f}]")
    assert worst <= 1e-8
    assert np.all((h >= 0) & (h <= 1))


@criterion(8, "e_Z/p_Z reparameterisation cancels to 1e-12 on 1e4 surface tuples")
def test_reparameterisation_identity(record_property):
    rng = np.random.default_rng(SEED)
    n = 10_000
    p0 = rng.uniform(0.01, 0.99, n)
    p1 = rng.uniform(0.01, 0.99, n)
    delta = rng.normal(scale=3, size=n)
    e0 = rng.normal(scale=3, size=n)
    s = {"p0": p0, "p1": p1, "pi1": rng.uniform(0.01, 0.99, n), "e0": e0, "e1": e0 + delta * (p1 - p0), "delta": delta, "omega": 1 / (p1 - p0)}
    y, a, z = rng.normal(scale=5, size=n), rng.integers(0, 2, n), rng.integers(0, 2, n)
    # both forms share the weight rho (2Z - 1) Omega / pi_Z; the identity concerns the residual it multiplies
    rho = p1 * s["pi1"] + p0 * (1 - s["pi1"])
    weight = rho * (2 * z - 1) / np.where(z == 1, s["pi1"], 1 - s["pi1"]) * s["omega"]
    resid_gap = (theta_term(y, a, z, s, "eZ") - theta_term(y, a, z, s, "e0")) / weight
    gap = np.abs(resid_gap) / np.maximum(1.0, np.abs(y))
    detail(record_property, f"max relative gap {gap.max():.1e}")
    assert gap.max() <= 1e-12


# ---------------------------------------------------------------------------
# 9-10: GLIM factorisation and the MIVHR diagnostic
# ---------------------------------------------------------------------------


@criterion(9, "multiplicative GLIM z1/z0 propensity ratio u-invariant within 5% over deciles")
def test_glim_factorisation(record_property):
    p = GlimParams("multiplicative", g0=0.4, g1=0.8, u_low=0.5, u_high=1.0, outcome="none")
    sim = generate_glim(p, 1_000_000, seed=SEED)
    edges = np.quantile(sim.u, np.linspace(0, 1, 11))
    bins = np.clip(np.searchsorted(edges, sim.u, side="right") - 1, 0, 9)
    ratios = np.array([sim.extra["a1"][bins == b].mean() / sim.extra["a0"][bins == b].mean() for b in range(10)])
    spread = np.max(np.abs(ratios / ratios.mean() - 1))
    detail(record_property, f"decile ratios {ratios.min():.3f}..{ratios.max():.3f}, max deviation {spread:.3f}")
    assert spread < 0.05


@criterion(10, "MIVHR size in [0.02, 0.09] over 500 nulls; power > 0.95 at n=2000")
def test_mivhr_size_and_power(record_property):
    null = Dgp4Params(z_effect=0.0)
    size = np.mean([mivhr_test(generate_dgp4(2000, seed=SEED + r, params=null).data).p_value < 0.05 for r in range(500)])
    power = np.mean([mivhr_test(generate_dgp4(2000, seed=SEED + 10_000 + r).data).p_value < 0.05 for r in range(200)])
    detail(record_property, f"size {size:.3f}, power {power:.3f}")
    assert 0.02 <= size <= 0.09
    assert power > 0.95


# ---------------------------------------------------------------------------
# 11: CLI determinism
# ---------------------------------------------------------------------------


@criterion(11, "every CLI command byte-identical across runs and across 1 vs 8 workers")
def test_cli_determinism(tmp_path, record_property):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        json.dumps(
            {
                "seed": 17,
                "run": {"repeats": 3, "bootstrap": 200, "clip": {"tau": 0.1}},
                "simulate": {"sizes": [300], "replicates": 4, "estimators": ["EIF-FW", "EIF", "Wald", "2SLS"]},
                "generate": {"n": 600},
            }
        )
    )
    data = tmp_path / "data.csv"
    assert main(["generate", "--config", str(cfg), "--out", str(data)]) == 0
    outputs = {}
    for run, workers in (("a", "1"), ("b", "1"), ("c", "8")):
        files = {
            "generate": tmp_path / f"gen_{run}.csv",
            "estimate": tmp_path / f"est_{run}.json",
            "simulate": tmp_path / f"sim_{run}.csv",
        }
        common = ["--config", str(cfg), "--workers", workers]
        assert main(["generate", *common, "--out", str(files["generate"])]) == 0
        assert main(["estimate", *common, "--data", str(data), "--out", str(files["estimate"])]) == 0
        assert main(["simulate", *common, "--out", str(files["simulate"])]) == 0
        blobs = {k: v.read_bytes() for k, v in files.items()}
        blobs["simulate.json"] = files["simulate"].with_suffix(".json").read_bytes()
        outputs[run] = blobs
    same = all(outputs["a"][k] == outputs[r][k] for r in ("b", "c") for k in outputs["a"])
    detail(record_property, "identical" if same else "outputs differ")
    assert same
