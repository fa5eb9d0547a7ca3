"""Classical comparators: 2SLS, control functions and engression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset, as_matrix
from .energy import energy_terms
from .errors import ConfigurationError, DegenerateDesignError, InputError, NumericalError, ShapeError
from .model import FitConfig, Standardizer

COND_THRESHOLD = 1e10
SPLINE_QUANTILES = (1 / 6, 2 / 6, 3 / 6, 4 / 6, 5 / 6)


def _with_intercept(*blocks):
    n = len(blocks[0])
    return np.column_stack([np.ones(n), *[b for b in blocks if b is not None]])


def _condition_number(design):
    s = np.linalg.svd(design, compute_uv=False)
    if s[-1] == 0.0:
        return np.inf
    return float(s[0] / s[-1])


def _ols(design, target, what):
    cond = _condition_number(design)
    if not cond <= COND_THRESHOLD:
        raise DegenerateDesignError(
            f"{what} design is rank deficient (condition number {cond:.3g} > {COND_THRESHOLD:.0e})",
            condition_number=cond,
        )
    coef = np.linalg.pinv(design) @ target
    return coef, cond


# ---------------------------------------------------------------------------
# 2SLS
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearIVFit:
    beta: np.ndarray  # (d,) or (d, p)
    intercept: np.ndarray
    first_stage: np.ndarray  # (1 + q + l, d) incl. intercept row
    condition_number: float
    w_coef: np.ndarray | None = None


def fit_tsls(data: Dataset) -> LinearIVFit:
    """Two-stage least squares: X on (1, Z, W), then Y on (1, X_hat, W)."""
    q, d = data.z.shape[1], data.x.shape[1]
    l = 0 if data.w is None else data.w.shape[1]
    if data.n <= q + d + l + 1:
        raise InputError(f"2SLS needs more than {q + d + l + 1} rows, got {data.n}")
    data.check_finite()
    first = _with_intercept(data.z, data.w)
    gamma, _ = _ols(first, data.x, "first-stage")
    x_hat = first @ gamma
    second = _with_intercept(x_hat, data.w)
    coef, cond = _ols(second, data.y, "second-stage")
    beta = coef[1 : 1 + d]
    return LinearIVFit(
        beta=beta[:, 0] if beta.shape[1] == 1 else beta,
        intercept=coef[0],
        first_stage=gamma,
        condition_number=cond,
        w_coef=None if l == 0 else coef[1 + d :],
    )


# ---------------------------------------------------------------------------
# control functions
# ---------------------------------------------------------------------------


def spline_knots(values, quantiles=SPLINE_QUANTILES):
    """Boundary knots at min/max plus interior knots at the given quantiles."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    knots = np.unique(np.concatenate([[v.min()], np.quantile(v, quantiles), [v.max()]]))
    if len(knots) < 3:
        raise DegenerateDesignError("too few distinct values for a spline basis")
    return knots


def natural_spline_basis(values, knots):
    """Truncated-power natural cubic spline basis without the constant.

    Columns: x, then d_k(x) - d_{K-1}(x) for k = 1..K-2 where
    d_k(x) = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k).  The fit is
    linear beyond the boundary knots.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    t = np.asarray(knots, dtype=np.float64)
    if np.any(np.diff(t) <= 0):
        raise ConfigurationError("knots must be strictly increasing")
    K = len(t)

    def dk(k):
        return (np.maximum(x - t[k], 0.0) ** 3 - np.maximum(x - t[-1], 0.0) ** 3) / (t[-1] - t[k])

    last = dk(K - 2)
    cols = [x] + [dk(k) - last for k in range(K - 2)]
    return np.column_stack(cols)


def _basis(block, kind, knots):
    if kind == "linear":
        return block
    return np.column_stack([natural_spline_basis(block[:, j], knots[j]) for j in range(block.shape[1])])


@dataclass(frozen=True)
class CfFit:
    basis: str
    first_stage: np.ndarray
    intercept: np.ndarray
    x_coef: np.ndarray
    v_coef: np.ndarray | None
    x_knots: tuple
    v_knots: tuple
    z_knots: tuple
    residual_term_mean: np.ndarray  # average of basis(V) @ v_coef over training residuals


def fit_cf(data: Dataset, basis: str = "linear") -> CfFit:
    """Control-function IV regression.

    The first stage regresses X on basis(Z); its residuals V enter the outcome
    regression as extra covariates.  The interventional mean integrates V
    out by averaging over the training residuals.
    """
    if basis not in ("linear", "natural_cubic_spline", "spline"):
        raise ConfigurationError(f"unknown basis {basis!r}")
    basis = "natural_cubic_spline" if basis == "spline" else basis
    if basis == "natural_cubic_spline" and data.n < 100:
        raise InputError("spline control functions need at least 100 rows")
    if data.w is not None:
        raise ConfigurationError("control functions with covariates w are not supported")
    data.check_finite()
    z, x, y = data.z, data.x, data.y

    z_knots = tuple(spline_knots(z[:, j]) for j in range(z.shape[1])) if basis != "linear" else ()
    first = _with_intercept(_basis(z, basis, z_knots))
    gamma, _ = _ols(first, x, "first-stage")
    v = x - first @ gamma

    scale = max(1.0, float(np.max(np.abs(x))))
    v_free = np.max(np.abs(v)) <= 1e-10 * scale
    x_knots = tuple(spline_knots(x[:, j]) for j in range(x.shape[1])) if basis != "linear" else ()
    bx = _basis(x, basis, x_knots)
    if v_free:
        v_knots = ()
        design = _with_intercept(bx)
    else:
        v_knots = tuple(spline_knots(v[:, j]) for j in range(v.shape[1])) if basis != "linear" else ()
        bv = _basis(v, basis, v_knots)
        design = _with_intercept(bx, bv)
    coef, _ = _ols(design, y, "outcome")
    kx = bx.shape[1]
    x_coef = coef[1 : 1 + kx]
    if v_free:
        v_coef, resid_mean = None, np.zeros(y.shape[1])
    else:
        v_coef = coef[1 + kx :]
        resid_mean = (bv @ v_coef).mean(axis=0)
    return CfFit(basis, gamma, coef[0], x_coef, v_coef, x_knots, v_knots, z_knots, resid_mean)


# ---------------------------------------------------------------------------
# engression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EngressionFit:
    net: nn.Mlp
    noise_dim: int
    standardizer: Standardizer


def _xy(data_xy):
    if isinstance(data_xy, Dataset):
        return data_xy.x, data_xy.y
    x, y = data_xy
    return as_matrix(x, "x"), as_matrix(y, "y")


def fit_engression(data_xy, config: FitConfig | None = None) -> EngressionFit:
    """Conditional generator Y | X = x trained with the energy loss.

    This targets the observational conditional law, not the interventional
    one.  Uses the same optimizer settings as the DIV fit.
    """
    config = config or FitConfig()
    x, y = _xy(data_xy)
    if len(x) < 50:
        raise InputError(f"need at least 50 rows to fit, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InputError("non-finite values in engression data")
    st = Standardizer.from_blocks({"x": x, "y": y}, allow_constant=("y",))
    constant_y = np.ptp(y, axis=0) == 0
    dtype = np.dtype(config.dtype)
    xs = st.transform("x", x).astype(dtype)
    ys = st.transform("y", y).astype(dtype)
    noise_dim = config.noise.dim_eps_y
    init_seq, batch_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
    hidden = [config.hidden_width] * (config.num_layers - 1)
    net = nn.init_mlp([x.shape[1] + noise_dim, *hidden, y.shape[1]], config.activation, np.random.default_rng(init_seq))
    net = net.with_params([p.astype(dtype) for p in net.params()])
    batch_rng = np.random.default_rng(batch_seq)
    noise_rng = np.random.default_rng(noise_seq)
    n = len(x)
    full_batch = n <= config.full_batch_below or config.batch_size >= n
    n_batches = 1 if full_batch else int(np.ceil(n / config.batch_size))
    k = config.n_draws
    state = nn.AdamState.for_models([net])
    nets = [net]
    for epoch in range(1, config.epochs + 1):
        order = np.arange(n) if full_batch else batch_rng.permutation(n)
        for rows in np.array_split(order, n_batches):
            b = len(rows)
            xb = np.tile(xs[rows], (k, 1))
            yb = ys[rows]
            eps = noise_rng.standard_normal((k * b, noise_dim), dtype=dtype)

            def loss_fn(ms):
                gen = nn.mlp_forward(ms[0], np.concatenate([xb, eps], axis=1))
                draws = [nn.take_rows(gen, slice(i * b, (i + 1) * b)) for i in range(k)]
                s1, s2 = energy_terms(yb, draws)
                return nn.sub(s1, nn.mul(s2, 0.5))

            try:
                bundle = nn.value_and_grad(loss_fn, nets)
            except NumericalError as exc:
                raise NumericalError(f"non-finite loss at epoch {epoch}: {exc.value}", exc.value, epoch) from exc
            nets, state = nn.adam_step(nets, bundle, state, config.lr)
    params = [np.array(p, dtype=np.float64) for p in nets[0].params()]
    # constant outcomes: pin the output layer so the generator is exactly constant
    k_out = len(nets[0].weights) - 1
    params[k_out][constant_y] = 0.0
    params[-1][constant_y] = 0.0
    final = nets[0].with_params(params)
    return EngressionFit(final, noise_dim, st)


def sample_engression(fit: EngressionFit, x_rows, m: int = 1000, rng=None):
    """(n, m, p) draws from the fitted conditional law of Y | X = x."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = as_matrix(x_rows, "x")
    if x.shape[1] != fit.net.in_dim - fit.noise_dim:
        raise ShapeError(f"x has {x.shape[1]} columns, fit expects {fit.net.in_dim - fit.noise_dim}")
    n = len(x)
    xs = np.repeat(fit.standardizer.transform("x", x), m, axis=0)
    eps = rng.standard_normal((n * m, fit.noise_dim))
    out = nn.mlp_forward(fit.net, np.concatenate([xs, eps], axis=1))
    return fit.standardizer.inverse("y", out).reshape(n, m, -1)


# ---------------------------------------------------------------------------
# predictions
# ---------------------------------------------------------------------------


def predict_mean(fit, x_rows, m: int = 1000, rng=None):
    """Mean prediction at treatment rows: (n,) for a single outcome, else (n, p).

    For 2SLS and control functions this is the interventional mean; for
    engression it is the Monte Carlo conditional mean.
    """
    x = as_matrix(x_rows, "x")
    if isinstance(fit, LinearIVFit):
        beta = fit.beta.reshape(len(fit.beta), -1)
        if x.shape[1] != beta.shape[0]:
            raise ShapeError(f"x has {x.shape[1]} columns, fit expects {beta.shape[0]}")
        if fit.w_coef is not None:
            raise ConfigurationError("2SLS fitted with covariates needs w for prediction")
        out = fit.intercept + x @ beta
    elif isinstance(fit, CfFit):
        d = fit.x_coef.shape[0] if fit.basis == "linear" else len(fit.x_knots)
        if x.shape[1] != d:
            raise ShapeError("x column count does not match the control-function fit")
        out = fit.intercept + _basis(x, fit.basis, fit.x_knots) @ fit.x_coef + fit.residual_term_mean
    elif isinstance(fit, EngressionFit):
        out = sample_engression(fit, x, m, rng).mean(axis=1)
    else:
        raise ConfigurationError(f"unsupported fit type {type(fit).__name__}")
    return out[:, 0] if out.shape[1] == 1 else out
