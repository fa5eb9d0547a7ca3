"""Desk-scale acceptance suite.

Each criterion function returns one or more :class:`CriterionResult` rows.
Fits shared between criteria are cached per process.
"""

from __future__ import annotations

import functools
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import baselines, nn, simlab
from .energy import energy_distance
from .errors import DegenerateDesignError
from .model import (
    FitConfig,
    NoiseConfig,
    Standardizer,
    build_networks,
    div_loss,
    extract_linear_beta,
    fit_div,
    generate_joint,
    interventional_mean,
    qte,
)


@dataclass(frozen=True)
class CriterionResult:
    criterion: str
    measured: float
    threshold: float
    comparator: str  # "<" or ">"
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def as_dict(self):
        return {
            "criterion": self.criterion,
            "measured": _json_float(self.measured),
            "threshold": _json_float(self.threshold),
            "comparator": self.comparator,
            "pass": bool(self.passed),
            "detail": self.detail,
            "seconds": round(self.seconds, 3),
        }

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.criterion}: measured={self.measured:.6g} {self.comparator} {self.threshold:.6g}  {self.detail}"


def _json_float(v):
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _judge(criterion, measured, threshold, comparator, detail="", scale=1.0, seconds=0.0):
    """Compare with the threshold loosened (scale > 1) or tightened (scale < 1)."""
    if comparator == "<":
        eff = threshold * scale
        ok = measured < eff
    elif comparator == ">":
        eff = threshold / scale if scale > 0 else np.inf
        ok = measured > eff
    else:
        raise ValueError(f"unknown comparator {comparator!r}")
    return CriterionResult(criterion, float(measured), float(eff), comparator, bool(ok), detail, seconds)


# ---------------------------------------------------------------------------
# desk-scale settings
# ---------------------------------------------------------------------------

LINEAR_SCENARIO = "cont_linear_contZ"
SETTINGS = {
    "C3": dict(scenario=LINEAR_SCENARIO, n=2000, epochs=2000, seed=11),
    "C5": dict(scenario="cont_sine_contZ", n=4000, epochs=4000, seed=13),
    "C6": dict(scenario="under_identified", n=1000, epochs=10000, seed=17),
    "C7": dict(scenario="weak_instrument:0", n=2000, epochs=1000, seed=19, runs=10),
    "C8": dict(scenario="binary_s2", n=5000, epochs=1000, seed=23),
    "C9": dict(scenario="illustrative_softplus", n=2000, epochs=1000, seed=29),
}
MEAN_M = 1000


@functools.lru_cache(maxsize=None)
def _scenario_fit(key, **overrides):
    s = SETTINGS[key]
    data = simlab.generate_scenario(s["scenario"], s["n"], s["seed"])
    config = FitConfig(epochs=s["epochs"], seed=s["seed"], **overrides)
    model, trace = fit_div(data, config)
    return data, model, trace


def _mean_mse(model, spec, grid, seed):
    est = interventional_mean(model, grid[:, None], m=MEAN_M, rng=np.random.default_rng(seed))[:, 0]
    return simlab.eval_mean_mse(est, simlab.oracle_mean(spec, grid))


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def c1_gradient(scale=1.0):
    """Finite differences against reverse mode on the full joint loss."""
    rng = np.random.default_rng(0)
    n, k = 16, 2
    config = FitConfig(num_layers=2, hidden_width=8, noise=NoiseConfig.uniform(4), dtype="float64")
    data = simlab.generate_scenario("cont_sine_contZ", n, 0)
    st = Standardizer.fit(data)
    z = np.tile(st.transform("z", data.z), (k, 1))
    obs = np.concatenate([st.transform("x", data.x), st.transform("y", data.y)], axis=1)
    nets = list(build_networks({"q": 1, "d": 1, "p": 1, "l": 0}, config, rng))
    draws = tuple(rng.standard_normal((k * n, 4)) for _ in range(3))
    err = nn.finite_diff_check(div_loss(st, False, z, None, obs, draws, k), nets)
    return [_judge("C1 gradient check", err, 1e-4, "<", "max relative error, 2-layer width-8 nets", scale)]


def c2_proper_scoring(scale=1.0, n=5000, n_boot=2000):
    """The true generator scores better than shifted/widened ones."""
    rng = np.random.default_rng(1)
    y = rng.standard_normal(n)
    e1, e2 = rng.standard_normal(n), rng.standard_normal(n)

    def per_row(a, b):
        return 0.5 * (np.abs(y - a) + np.abs(y - b)) - 0.5 * np.abs(a - b)

    true = per_row(e1, e2)
    boot = rng.integers(0, n, size=(n_boot, n))
    zs = {}
    for name, (loc, sd) in {"N(1,1)": (1.0, 1.0), "N(0,4)": (0.0, 2.0)}.items():
        diff = per_row(loc + sd * e1, loc + sd * e2) - true
        se = diff[boot].mean(axis=1).std(ddof=1)
        zs[name] = diff.mean() / se
    worst = min(zs.values())
    detail = ", ".join(f"{k}: {v:.1f} SE" for k, v in zs.items())
    return [_judge("C2 proper scoring", worst, 3.0, ">", detail, scale)]


def c3_diagnostic(scale=1.0):
    _, _, trace = _scenario_fit("C3")
    r = trace.final
    gap = abs(r.s1 - r.s2) / r.s2
    return [_judge("C3 s1/s2 diagnostic", gap, 0.1, "<", f"s1={r.s1:.4f} s2={r.s2:.4f} epoch {r.epoch}", scale)]


def c4_linear_mean(scale=1.0):
    data, model, _ = _scenario_fit("C3")
    spec = simlab.get_scenario(SETTINGS["C3"]["scenario"])
    mse = _mean_mse(model, spec, simlab.default_grid(data.x), 4)
    return [_judge("C4 linear mean MSE", mse, 0.1, "<", f"{spec.id}, n={data.n}", scale)]


def c5_sine_mean(scale=1.0):
    data, model, _ = _scenario_fit("C5")
    spec = simlab.get_scenario(SETTINGS["C5"]["scenario"])
    mse = _mean_mse(model, spec, np.linspace(-1.0, 4.0, 200), 5)
    wide = _mean_mse(model, spec, simlab.default_grid(data.x), 5)
    return [_judge("C5 sine mean MSE", mse, 0.5, "<", f"grid [-1,4]; 1%-99% quantile grid: {wide:.4f}", scale)]


def c6_under_identified(scale=1.0):
    s = SETTINGS["C6"]
    data, model, _ = _scenario_fit("C6", outcome_head="linear_no_bias")
    beta = extract_linear_beta(model)
    err = simlab.eval_beta_error(beta, (1.0, 2.0))
    rows = [_judge("C6 under-identified beta", err, 0.35, "<", f"beta_hat={np.round(beta, 4).tolist()}, epochs={s['epochs']}", scale)]
    try:
        fit = baselines.fit_tsls(data)
        raised, detail = 0.0, f"2SLS returned beta={np.round(fit.beta, 4).tolist()}"
    except DegenerateDesignError as exc:
        raised, detail = 1.0, f"degenerate design, condition number {exc.condition_number:.3g}"
    rows.append(_judge("C6 2SLS degenerate", raised, 0.5, ">", detail, scale))
    return rows


def c7_weak_instrument(scale=1.0):
    """Mean MSE over repeated data sets, both methods on the same data.

    The control-function error is heavy tailed across data sets (it divides
    by a sample covariance whose population value is zero), so single-set
    ratios are dominated by luck; averaging over runs mirrors the reported
    protocol.
    """
    s = SETTINGS["C7"]
    spec = simlab.get_scenario(s["scenario"])
    div_mse, cf_mse = [], []
    for r in range(s["runs"]):
        seed = s["seed"] + r
        data = simlab.generate_scenario(spec, s["n"], seed)
        model, _ = fit_div(data, FitConfig(epochs=s["epochs"], seed=seed))
        grid = simlab.default_grid(data.x)
        oracle = simlab.oracle_mean(spec, grid)
        div_mse.append(_mean_mse(model, spec, grid, seed))
        cf_mse.append(simlab.eval_mean_mse(baselines.predict_mean(baselines.fit_cf(data, "linear"), grid), oracle))
    div_mean, cf_mean = float(np.mean(div_mse)), float(np.mean(cf_mse))
    ratio = cf_mean / div_mean if div_mean > 0 else np.inf
    first = f"first data set: DIV {div_mse[0]:.3g}, CF {cf_mse[0]:.3g}"
    return [
        _judge("C7 weak-instrument DIV MSE", div_mean, 0.1, "<", f"mean over {s['runs']} data sets, n={s['n']}; max {max(div_mse):.3g}", scale),
        _judge("C7 CF/DIV MSE ratio", ratio, 10.0, ">", f"cf_linear mean MSE={cf_mean:.4g}, median CF/DIV {np.median(np.divide(cf_mse, div_mse)):.3g}; {first}", scale),
    ]


def c8_binary_qte(scale=1.0):
    data, model, _ = _scenario_fit("C8", binary_treatment=True)
    spec = simlab.get_scenario(SETTINGS["C8"]["scenario"])
    alphas = np.array(simlab.QTE_ALPHAS)
    est = qte(model, [1.0], [0.0], alphas, m=10_000, rng=np.random.default_rng(8))[:, 0]
    oracle = simlab.oracle_qte(spec, alphas)
    mae = float(np.mean(np.abs(est - oracle)))
    return [_judge("C8 binary QTE MAE", mae, 1.0, "<", f"qte={np.round(est, 2).tolist()}", scale)]


def c9_distribution_matching(scale=1.0, n_eval=2000):
    s = SETTINGS["C9"]
    _, model, trace = _scenario_fit("C9")
    fresh = simlab.generate_scenario(s["scenario"], n_eval, s["seed"] + 1000)
    truth = np.column_stack([fresh.x, fresh.y])

    def distance(m):
        gx, gy = generate_joint(m, fresh.z, m=1, rng=np.random.default_rng(9))
        return energy_distance(np.column_stack([gx[:, 0], gy[:, 0]]), truth)

    early, final = distance(trace.snapshots[100]), distance(model)
    return [_judge("C9 distribution matching", final, early, "<", f"energy distance at epoch 100: {early:.4g}", scale)]


def c10_baseline_oracles(scale=1.0):
    data = simlab.generate_scenario(LINEAR_SCENARIO, 3000, 31)
    fit = baselines.fit_tsls(data)
    n = data.n
    zm = np.column_stack([np.ones(n), data.z])
    xm = np.column_stack([np.ones(n), data.x])
    pz = zm @ np.linalg.solve(zm.T @ zm, zm.T)
    closed = np.linalg.solve(xm.T @ pz @ xm, xm.T @ pz @ data.y)[:, 0]
    tsls_err = float(np.max(np.abs(np.concatenate([fit.intercept, np.ravel(fit.beta)]) - closed)))
    grid = simlab.default_grid(data.x)
    cf_gap = float(np.max(np.abs(baselines.predict_mean(baselines.fit_cf(data, "linear"), grid) - baselines.predict_mean(fit, grid))))
    return [
        _judge("C10 2SLS closed form", tsls_err, 1e-8, "<", "max abs coefficient difference", scale),
        _judge("C10 CF equals 2SLS", cf_gap, 1e-6, "<", "max abs mean-prediction difference", scale),
    ]


def c11_determinism(scale=1.0):
    from .cli import main
    from .io import dumps_model, load_model, write_csv

    data = simlab.generate_scenario(LINEAR_SCENARIO, 200, 37)
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = os.path.join(tmp, "data.csv")
        write_csv(csv_path, ["z", "x", "y"], np.column_stack([data.z, data.x, data.y]).tolist())
        blobs = []
        for run in (1, 2):
            out = os.path.join(tmp, f"model{run}.div")
            code = main(["fit", csv_path, "--z", "z", "--x", "x", "--y", "y", "--epochs", "30", "--seed", "5", "--out", out])
            if code != 0:
                return [_judge("C11 determinism", np.inf, 1.0, "<", f"fit exited with {code}", scale)]
            with open(out, "rb") as fh:
                blobs.append(fh.read())
        differing = sum(a != b for a, b in zip(blobs[0], blobs[1])) + abs(len(blobs[0]) - len(blobs[1]))
        round_trip = dumps_model(load_model(os.path.join(tmp, "model1.div")))
        rt_diff = sum(a != b for a, b in zip(round_trip, blobs[0])) + abs(len(round_trip) - len(blobs[0]))
    return [
        _judge("C11 repeated fit bytes differing", differing, 1.0, "<", f"file size {len(blobs[0])} bytes", scale),
        _judge("C11 round-trip bytes differing", rt_diff, 1.0, "<", "save -> load -> save", scale),
    ]


CRITERIA = {
    "C1": c1_gradient,
    "C2": c2_proper_scoring,
    "C3": c3_diagnostic,
    "C4": c4_linear_mean,
    "C5": c5_sine_mean,
    "C6": c6_under_identified,
    "C7": c7_weak_instrument,
    "C8": c8_binary_qte,
    "C9": c9_distribution_matching,
    "C10": c10_baseline_oracles,
    "C11": c11_determinism,
}


def run(ids=None, tolerance_scale=1.0):
    """Run the selected criteria (all by default); unknown ids raise KeyError."""
    ids = list(CRITERIA) if ids is None else [i.upper() for i in ids]
    for i in ids:
        if i not in CRITERIA:
            raise KeyError(i)
    results = []
    for i in ids:
        start = time.perf_counter()
        rows = CRITERIA[i](scale=tolerance_scale)
        elapsed = time.perf_counter() - start
        results.extend(CriterionResult(**{**r.__dict__, "seconds": elapsed}) for r in rows)
    return results
