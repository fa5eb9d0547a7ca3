"""Simulation scenarios with ground-truth interventional oracles, plus metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import ConfigurationError, InputError, ShapeError

QTE_ALPHAS = (0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99)


def softplus(v):
    return np.logaddexp(0.0, v)


@dataclass(frozen=True)
class OracleConfig:
    n_mc: int = 200_000
    seed: int = 12345

    def __post_init__(self):
        if self.n_mc < 10_000:
            raise ConfigurationError("n_mc must be >= 10000")


# ---------------------------------------------------------------------------
# data generating processes
#
# Each DGP is split into a noise sampler and structural equations so that the
# same equations serve both observational sampling and do(X := x) oracles.
# ---------------------------------------------------------------------------


def _gauss(rng, n):
    return rng.standard_normal(n)


def _logistic(rng, n):
    return rng.logistic(0.0, 1.0, n)


def _cont_noise(rng, n):
    return {"h": _gauss(rng, n), "ex": _gauss(rng, n), "ey": _gauss(rng, n)}


def _treat_cont(z, nz):
    return z + nz["h"] + nz["ex"]


def _out_linear(x, nz):
    return x - 3.0 * nz["h"] + nz["ey"]


def _out_case(x, nz):
    h, ey = nz["h"], nz["ey"]
    low = (5.5 + 2.0 * x + 3.0 * h + ey) / 5.0
    # |.| keeps the log defined when eps_y pushes the argument below zero
    with np.errstate(divide="ignore"):
        high = np.log(np.abs((2.0 * x + h) ** 2 + ey))
    return np.where(x <= 1.0, low, high)


def _out_sine(x, nz):
    return 3.0 * np.sin(2.0 * x) + 2.0 * x - 3.0 * nz["h"] + nz["ey"]


def _binary_noise(rng, n):
    return {"h": _logistic(rng, n), "ex": _logistic(rng, n), "ey": _logistic(rng, n)}


def _treat_binary(z, nz):
    return (4.0 * z + 4.0 * nz["h"] > nz["ex"]).astype(np.float64)


def _out_binary_s1(x, nz):
    return softplus(18.0 + 8.0 * x + 6.0 * nz["h"])


def _out_binary_s2(x, nz):
    return 2.0 + (x + 1.0) ** 2 + 3.0 * (x + 1.0) + 2.0 * nz["h"] + nz["ey"]


def _under_noise(rng, n):
    return {"h": _gauss(rng, n), "ex1": _gauss(rng, n), "ex2": _gauss(rng, n), "ey": _gauss(rng, n)}


def _treat_under(z, nz):
    x1 = z * (2.0 * nz["h"] - 0.5 * nz["ex1"])
    x2 = np.log(7.0 + z + nz["h"] + nz["ex2"])
    return np.column_stack([x1, x2])


def _out_under(x, nz):
    x = np.atleast_2d(x)
    return x[:, 0] + 2.0 * x[:, 1] + 2.0 * nz["h"] + nz["ey"]


def _weak_noise(rng, n):
    return {"h": rng.uniform(-1, 1, n), "ex": rng.uniform(-1, 1, n), "ey": rng.uniform(-1, 1, n)}


def _out_weak(x, nz):
    return expit((x + 2.0 * nz["h"] + nz["ey"]) / 3.0)


def _softplus_noise(rng, n):
    return {"h": rng.normal(2.0, 1.0, n), "ex": _gauss(rng, n), "ey": _gauss(rng, n)}


def _appf_noise(rng, n):
    return _cont_noise(rng, n)


@dataclass(frozen=True)
class ScenarioSpec:
    """A named data-generating process.

    ``treatment(z, noise)`` and ``outcome(x, noise)`` are the structural
    equations; ``noise(rng, n)`` samples (H, eps) jointly.  ``mean_fn``, when
    set, is the closed-form interventional mean.
    """

    name: str
    q: int
    d: int
    p: int
    instrument: Callable
    noise: Callable
    treatment: Callable
    outcome: Callable
    mean_fn: Callable | None = None
    binary_treatment: bool = False
    beta: tuple | None = None
    params: dict = field(default_factory=dict)

    @property
    def id(self):
        if "alpha" in self.params:
            return f"{self.name}:{self.params['alpha']:g}"
        return self.name

    @property
    def kind(self):
        if self.beta is not None:
            return "beta"
        if self.binary_treatment:
            return "qte"
        return "mean"


def _bern(rng, n):
    return rng.binomial(1, 0.5, n).astype(np.float64)


def _unif03(rng, n):
    return rng.uniform(0.0, 3.0, n)


def _make_registry():
    reg = {}
    cont = [("linear", _out_linear, lambda x: x), ("case", _out_case, None), ("sine", _out_sine, lambda x: 3 * np.sin(2 * x) + 2 * x)]
    for label, outcome, mean_fn in cont:
        for suffix, instrument in (("binZ", _bern), ("contZ", _unif03)):
            name = f"cont_{label}_{suffix}"
            reg[name] = ScenarioSpec(name, 1, 1, 1, instrument, _cont_noise, _treat_cont, outcome, mean_fn)
    reg["binary_s1"] = ScenarioSpec(
        "binary_s1", 1, 1, 1, _logistic, _binary_noise, _treat_binary, _out_binary_s1, binary_treatment=True
    )
    reg["binary_s2"] = ScenarioSpec(
        "binary_s2", 1, 1, 1, _logistic, _binary_noise, _treat_binary, _out_binary_s2, binary_treatment=True
    )
    reg["under_identified"] = ScenarioSpec(
        "under_identified",
        1,
        2,
        1,
        _bern,
        _under_noise,
        _treat_under,
        _out_under,
        mean_fn=lambda x: np.atleast_2d(x)[:, 0] + 2.0 * np.atleast_2d(x)[:, 1],
        beta=(1.0, 2.0),
    )
    reg["illustrative_softplus"] = ScenarioSpec(
        "illustrative_softplus",
        1,
        1,
        1,
        lambda rng, n: rng.uniform(-3.0, 3.0, n),
        _softplus_noise,
        lambda z, nz: z + nz["h"] + 0.1 * nz["ex"],
        lambda x, nz: softplus(x + 2.0 * nz["h"] + nz["ey"]),
    )
    reg["appendix_f_linear"] = ScenarioSpec(
        "appendix_f_linear",
        1,
        1,
        1,
        _unif03,
        _appf_noise,
        lambda z, nz: z + nz["h"] + 0.5 * nz["ex"],
        lambda x, nz: x - 3.0 * nz["h"] + 0.5 * nz["ey"],
        mean_fn=lambda x: x,
    )
    return reg


_REGISTRY = _make_registry()
SCENARIO_NAMES = tuple(sorted(_REGISTRY)) + ("weak_instrument",)


def weak_instrument(alpha: float) -> ScenarioSpec:
    alpha = float(alpha)
    return ScenarioSpec(
        "weak_instrument",
        1,
        1,
        1,
        lambda rng, n: rng.uniform(-3.0, 3.0, n),
        _weak_noise,
        lambda z, nz: z * (alpha + 2.0 * nz["h"] + nz["ex"]),
        _out_weak,
        params={"alpha": alpha},
    )


def get_scenario(spec_id) -> ScenarioSpec:
    """Look up a scenario by id, e.g. ``"cont_sine_contZ"`` or ``"weak_instrument:0"``."""
    if isinstance(spec_id, ScenarioSpec):
        return spec_id
    name, _, arg = str(spec_id).partition(":")
    if name == "weak_instrument":
        try:
            return weak_instrument(float(arg) if arg else 0.0)
        except ValueError:
            raise ConfigurationError(f"bad weak_instrument parameter {arg!r}") from None
    if name not in _REGISTRY or arg:
        raise ConfigurationError(f"unknown scenario {spec_id!r}; known: {', '.join(SCENARIO_NAMES)}")
    return _REGISTRY[name]


def generate_scenario(spec, n: int, seed: int) -> Dataset:
    """Draw ``n`` observations; the confounder H rides along in ``hidden``."""
    spec = get_scenario(spec)
    if int(n) < 1:
        raise InputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    z = spec.instrument(rng, n)
    nz = spec.noise(rng, n)
    x = spec.treatment(z, nz)
    y = spec.outcome(x, nz)
    return Dataset(z, x, y, hidden=nz["h"])


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def _grid_rows(spec, x_grid):
    x = np.asarray(x_grid, dtype=np.float64)
    if spec.d == 1:
        return x.reshape(-1)
    x = np.atleast_2d(x)
    if x.shape[1] != spec.d:
        raise ShapeError(f"scenario {spec.name} expects {spec.d} treatment columns")
    return x


def _outcome_draws(spec, x, cfg: OracleConfig):
    """(n_mc,) outcome draws at a single treatment value, common noise across x."""
    rng = np.random.default_rng(cfg.seed)
    nz = spec.noise(rng, cfg.n_mc)
    if spec.d == 1:
        xv = np.full(cfg.n_mc, float(np.squeeze(x)))
    else:
        xv = np.tile(np.asarray(x, dtype=np.float64).reshape(1, -1), (cfg.n_mc, 1))
    return spec.outcome(xv, nz)


def oracle_mean(spec, x_grid, cfg: OracleConfig | None = None):
    """True interventional mean on a grid; closed form when available."""
    spec = get_scenario(spec)
    cfg = cfg or OracleConfig()
    x = _grid_rows(spec, x_grid)
    if spec.mean_fn is not None:
        return np.asarray(spec.mean_fn(x), dtype=np.float64).reshape(len(x))
    return np.array([_outcome_draws(spec, xi, cfg).mean() for xi in x])


def oracle_quantile(spec, x, alphas, cfg: OracleConfig | None = None):
    """Monte Carlo lower quantiles of Y under do(X := x)."""
    spec = get_scenario(spec)
    cfg = cfg or OracleConfig()
    a = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    if np.any((a < 0) | (a > 1)):
        raise InputError("every alpha must lie in [0, 1]")
    return np.quantile(_outcome_draws(spec, x, cfg), a, method="inverted_cdf")


def oracle_qte(spec, alphas=QTE_ALPHAS, cfg: OracleConfig | None = None, x1=1.0, x0=0.0):
    """q_alpha(x1) - q_alpha(x0); both arms use the same noise draws."""
    return oracle_quantile(spec, x1, alphas, cfg) - oracle_quantile(spec, x0, alphas, cfg)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def default_grid(x_train, num: int = 200):
    """Equispaced points between the 1% and 99% quantiles of training X."""
    x = np.asarray(x_train, dtype=np.float64).reshape(-1)
    lo, hi = np.quantile(x, [0.01, 0.99])
    return np.linspace(lo, hi, num)


def sample_treatments(spec, n: int = 10_000, seed: int = 0):
    """Treatment values drawn from the observational X distribution."""
    return generate_scenario(spec, n, seed).x


def eval_mean_mse(estimates, oracle) -> float:
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    ora = np.asarray(oracle, dtype=np.float64).reshape(-1)
    if est.shape != ora.shape:
        raise ShapeError("estimates and oracle differ in length")
    return float(np.mean((est - ora) ** 2))


def eval_qte_rmse(est, oracle) -> float:
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ora = np.asarray(oracle, dtype=np.float64).reshape(-1)
    if est.shape != ora.shape:
        raise ShapeError("estimated and true QTE differ in length")
    return float(np.sqrt(np.mean((est - ora) ** 2)))


def eval_beta_error(beta_hat, beta_true) -> float:
    b = np.asarray(beta_hat, dtype=np.float64).reshape(-1)
    t = np.asarray(beta_true, dtype=np.float64).reshape(-1)
    if b.shape != t.shape:
        raise ShapeError("coefficient vectors differ in length")
    return float(np.linalg.norm(b - t))


def stability_measure(mean_fns) -> float:
    """Mean over x of sum over ordered environment pairs of squared differences.

    ``mean_fns`` is a list (or array) of per-environment estimates evaluated
    on the same x rows.
    """
    if len(mean_fns) < 2:
        raise InputError("stability needs at least two estimates")
    shapes = {np.shape(m) for m in mean_fns}
    if len(shapes) != 1:
        raise ShapeError("all estimates must be evaluated on the same x rows")
    est = np.asarray(mean_fns, dtype=np.float64)
    est = est.reshape(est.shape[0], est.shape[1], -1) if est.ndim > 1 else est[:, None, None]
    diffs = est[:, None] - est[None, :]  # (E, E, n, p)
    per_x = np.sum(diffs**2, axis=(0, 1, 3))
    return float(np.mean(per_x))
