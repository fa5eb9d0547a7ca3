"""Distributional IV model: joint generator of (X, Y) | Z trained with the energy loss.

Two networks are learned.  The treatment generator maps
``(z, w, eps_x, eps_h) -> x`` and the outcome generator maps
``(x, w, eps_y, eps_h) -> y``.  The shared noise ``eps_h`` plays the role of
the hidden confounder.  Under ``do(X := x)`` only the outcome generator is
evaluated, with ``x`` clamped and fresh ``(eps_y, eps_h)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset, as_matrix
from .energy import energy_loss_parts, energy_terms
from .errors import ConfigurationError, InputError, NumericalError, ShapeError

log = logging.getLogger(__name__)

OUTCOME_HEADS = ("mlp", "linear_no_bias")
DEFAULT_M = 1000
_CHUNK_ROWS = 50_000


@dataclass(frozen=True)
class NoiseConfig:
    dim_eps_x: int = 50
    dim_eps_y: int = 50
    dim_eps_h: int = 50

    def __post_init__(self):
        for name in ("dim_eps_x", "dim_eps_y", "dim_eps_h"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    @classmethod
    def uniform(cls, dim):
        return cls(dim, dim, dim)


@dataclass(frozen=True)
class Standardizer:
    """Per-column location/scale for every variable role."""

    means: dict
    scales: dict

    def __post_init__(self):
        for role, sd in self.scales.items():
            if np.any(~(np.asarray(sd) > 0)):
                raise InputError(f"non-positive scale stored for {role!r}")

    @classmethod
    def fit(cls, data: Dataset) -> "Standardizer":
        return cls.from_blocks({role: getattr(data, role) for role in data.roles}, data.names)

    @classmethod
    def from_blocks(cls, blocks: dict, names: dict | None = None, allow_constant=()) -> "Standardizer":
        """Column means and standard deviations; roles in ``allow_constant`` get scale 1 when constant."""
        means, scales = {}, {}
        for role, block in blocks.items():
            mu = block.mean(axis=0)
            sd = block.std(axis=0)
            if role in allow_constant:
                sd = np.where(sd > 0, sd, 1.0)
            for j, s in enumerate(sd):
                if not s > 0:
                    label = names[role][j] if names else f"{role}[{j}]"
                    raise InputError(f"column {label!r} has zero variance")
            means[role] = mu
            scales[role] = sd
        return cls(means, scales)

    @classmethod
    def identity(cls, dims: dict) -> "Standardizer":
        return cls({r: np.zeros(k) for r, k in dims.items()}, {r: np.ones(k) for r, k in dims.items()})

    def transform(self, role, values):
        return (values - self.means[role]) / self.scales[role]

    def inverse(self, role, values):
        return values * self.scales[role] + self.means[role]


@dataclass(frozen=True)
class FitConfig:
    """Training hyperparameters.

    ``num_layers`` counts affine layers, so the default 4 gives three hidden
    layers of ``hidden_width`` units.  ``batch_size`` is ignored (full batch)
    when the data has at most ``full_batch_below`` rows.
    """

    num_layers: int = 4
    hidden_width: int = 100
    lr: float = 1e-3
    epochs: int = 10_000
    batch_size: int = 256
    full_batch_below: int = 1000
    seed: int = 0
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    outcome_head: str = "mlp"
    binary_treatment: bool = False
    activation: str = "relu"
    diagnostics_every: int = 100
    n_draws: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("lr must be > 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.num_layers < 1 or self.hidden_width < 1:
            raise ConfigurationError("num_layers and hidden_width must be >= 1")
        if self.outcome_head not in OUTCOME_HEADS:
            raise ConfigurationError(f"outcome_head must be one of {OUTCOME_HEADS}")
        if self.activation not in nn.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.diagnostics_every < 1:
            raise ConfigurationError("diagnostics_every must be >= 1")
        if self.n_draws < 2:
            raise ConfigurationError("n_draws must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be 'float32' or 'float64'")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "noise"}
        d["noise"] = [self.noise.dim_eps_x, self.noise.dim_eps_y, self.noise.dim_eps_h]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["noise"] = NoiseConfig(*d["noise"])
        return cls(**d)


@dataclass(frozen=True)
class DIVModel:
    g_net: nn.Mlp
    f_net: nn.Mlp
    noise: NoiseConfig
    standardizer: Standardizer
    dims: dict  # q, d, p, l
    outcome_head: str = "mlp"
    binary_treatment: bool = False
    names: dict = field(default_factory=dict)
    config: FitConfig | None = None

    def __post_init__(self):
        q, d, p, l = (self.dims[k] for k in ("q", "d", "p", "l"))
        nz = self.noise
        if self.g_net.in_dim != q + l + nz.dim_eps_x + nz.dim_eps_h or self.g_net.out_dim != d:
            raise ShapeError("treatment network dimensions do not match (q, l, noise, d)")
        if self.f_net.in_dim != d + l + nz.dim_eps_y + nz.dim_eps_h or self.f_net.out_dim != p:
            raise ShapeError("outcome network dimensions do not match (d, l, noise, p)")

    @property
    def has_w(self):
        return self.dims["l"] > 0


@dataclass
class TraceRecord:
    epoch: int
    loss: float
    s1: float
    s2: float


@dataclass
class TrainTrace:
    """Full-data diagnostics recorded every ``diagnostics_every`` epochs.

    ``snapshots`` holds models at epoch 100 (when reached) and at the end.
    """

    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def append(self, record: TraceRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("trace epochs must be strictly increasing")
        self.records.append(record)

    @property
    def final(self) -> TraceRecord:
        return self.records[-1]

    def as_array(self):
        return np.array([[r.epoch, r.loss, r.s1, r.s2] for r in self.records], dtype=np.float64)


# ---------------------------------------------------------------------------
# construction and forward passes
# ---------------------------------------------------------------------------


def _dims_of(data: Dataset):
    return {
        "q": data.z.shape[1],
        "d": data.x.shape[1],
        "p": data.y.shape[1],
        "l": 0 if data.w is None else data.w.shape[1],
    }


def build_networks(dims, config: FitConfig, rng):
    nz = config.noise
    hidden = [config.hidden_width] * (config.num_layers - 1)
    g_in = dims["q"] + dims["l"] + nz.dim_eps_x + nz.dim_eps_h
    f_in = dims["d"] + dims["l"] + nz.dim_eps_y + nz.dim_eps_h
    g_net = nn.init_mlp([g_in, *hidden, dims["d"]], config.activation, rng)
    if config.outcome_head == "linear_no_bias":
        f_net = nn.init_mlp([f_in, dims["p"]], "identity", rng, use_bias=False)
    else:
        f_net = nn.init_mlp([f_in, *hidden, dims["p"]], config.activation, rng)
    return g_net, f_net


def _binarize(model_std, x_std):
    """Straight-through threshold at 0.5 on the original treatment scale."""
    mu, sd = model_std.means["x"], model_std.scales["x"]
    return nn.straight_through_step(x_std, (0.5 - mu) / sd, (0.0 - mu) / sd, (1.0 - mu) / sd)


def _joint_forward(g_net, f_net, standardizer, binary, z_std, w_std, eps_x, eps_y, eps_h):
    """Standardized (x_hat, y_hat); y_hat is computed from x_hat and shares eps_h."""
    wblock = [] if w_std is None else [w_std]
    x_hat = nn.mlp_forward(g_net, nn.concat([z_std, *wblock, eps_x, eps_h]))
    if binary:
        x_hat = _binarize(standardizer, x_hat)
    y_hat = nn.mlp_forward(f_net, nn.concat([x_hat, *wblock, eps_y, eps_h]))
    return x_hat, y_hat


def _draw_noise(rng, rows, noise: NoiseConfig, dtype=np.float64):
    eps_x = rng.standard_normal((rows, noise.dim_eps_x), dtype=dtype)
    eps_y = rng.standard_normal((rows, noise.dim_eps_y), dtype=dtype)
    eps_h = rng.standard_normal((rows, noise.dim_eps_h), dtype=dtype)
    return eps_x, eps_y, eps_h


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def div_loss(standardizer, binary, z_std, w_std, observed, noise_draws, k=2):
    """Energy-loss closure over ``[g_net, f_net]`` for one batch.

    ``z_std``/``w_std`` hold the batch rows tiled ``k`` times; the noise
    arrays in ``noise_draws = (eps_x, eps_y, eps_h)`` have the same row count.
    Draw ``i`` occupies rows ``i*b:(i+1)*b`` where ``b = len(observed)``.
    """
    b = len(observed)
    eps_x, eps_y, eps_h = noise_draws

    def loss_fn(ms):
        x_hat, y_hat = _joint_forward(ms[0], ms[1], standardizer, binary, z_std, w_std, eps_x, eps_y, eps_h)
        gen = nn.concat([x_hat, y_hat])
        draws = [nn.take_rows(gen, slice(i * b, (i + 1) * b)) for i in range(k)]
        s1, s2 = energy_terms(observed, draws)
        return nn.sub(s1, nn.mul(s2, 0.5))

    return loss_fn


def _check_training_data(data: Dataset):
    if data.n < 50:
        raise InputError(f"need at least 50 rows to fit, got {data.n}")
    data.check_finite()


def fit_div(data: Dataset, config: FitConfig | None = None, callback=None):
    """Fit the joint generative model by minimizing the empirical energy loss.

    Returns ``(model, trace)``.  The run is deterministic given
    ``config.seed``.  ``callback(record, model)`` is invoked at every
    diagnostic checkpoint with the current model.
    """
    config = config or FitConfig()
    _check_training_data(data)
    dims = _dims_of(data)
    standardizer = Standardizer.fit(data)
    dtype = np.dtype(config.dtype)
    z = standardizer.transform("z", data.z).astype(dtype)
    x = standardizer.transform("x", data.x).astype(dtype)
    y = standardizer.transform("y", data.y).astype(dtype)
    w = None if data.w is None else standardizer.transform("w", data.w).astype(dtype)
    observed = np.concatenate([x, y], axis=1)

    init_seq, batch_seq, noise_seq, diag_seq = np.random.SeedSequence(config.seed).spawn(4)
    g_net, f_net = build_networks(dims, config, np.random.default_rng(init_seq))
    g_net, f_net = _cast(g_net, dtype), _cast(f_net, dtype)
    batch_rng = np.random.default_rng(batch_seq)
    noise_rng = np.random.default_rng(noise_seq)
    diag_rng = np.random.default_rng(diag_seq)

    n = data.n
    full_batch = n <= config.full_batch_below or config.batch_size >= n
    n_batches = 1 if full_batch else int(np.ceil(n / config.batch_size))
    k = config.n_draws
    binary = config.binary_treatment

    def make_model(g, f):
        g, f = _cast(g, np.float64), _cast(f, np.float64)
        return DIVModel(g, f, config.noise, standardizer, dims, config.outcome_head, binary, data.names, config)

    state = nn.AdamState.for_models([g_net, f_net])
    trace = TrainTrace()
    nets = [g_net, f_net]
    for epoch in range(1, config.epochs + 1):
        order = np.arange(n) if full_batch else batch_rng.permutation(n)
        for rows in np.array_split(order, n_batches):
            zb = np.tile(z[rows], (k, 1))
            wb = None if w is None else np.tile(w[rows], (k, 1))
            obs_b = observed[rows]
            eps_x, eps_y, eps_h = _draw_noise(noise_rng, k * len(rows), config.noise, dtype)

            loss_fn = div_loss(standardizer, binary, zb, wb, obs_b, (eps_x, eps_y, eps_h), k)
            try:
                bundle = nn.value_and_grad(loss_fn, nets)
            except NumericalError as exc:
                raise NumericalError(f"non-finite loss at epoch {epoch}: {exc.value}", exc.value, epoch) from exc
            nets, state = nn.adam_step(nets, bundle, state, config.lr)

        if epoch == 100 and config.epochs > 100:
            trace.snapshots[100] = make_model(*nets)
        if epoch % config.diagnostics_every == 0 or epoch == config.epochs:
            parts = _full_data_parts(nets, standardizer, binary, z, w, observed, config.noise, diag_rng)
            if not np.isfinite(parts.loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}", parts.loss, epoch)
            trace.append(TraceRecord(epoch, parts.loss, parts.s1, parts.s2))
            if callback is not None:
                callback(trace.records[-1], make_model(*nets))
            log.debug("epoch %d loss %.5f s1 %.5f s2 %.5f", epoch, parts.loss, parts.s1, parts.s2)

    model = make_model(*nets)
    trace.snapshots[config.epochs] = model
    return model, trace


def _cast(net: nn.Mlp, dtype) -> nn.Mlp:
    return net.with_params([np.asarray(p, dtype=dtype) for p in net.params()])


def _full_data_parts(nets, standardizer, binary, z, w, observed, noise, rng):
    rows = len(z)
    draws = []
    for _ in range(2):
        eps_x, eps_y, eps_h = _draw_noise(rng, rows, noise)
        x_hat, y_hat = _joint_forward(nets[0], nets[1], standardizer, binary, z, w, eps_x, eps_y, eps_h)
        draws.append(np.concatenate([x_hat, y_hat], axis=1))
    return energy_loss_parts(observed, draws[0], draws[1])


def loss_parts(model: DIVModel, data: Dataset, rng) -> "EnergyLossParts":
    """Energy-loss decomposition of a fitted model on (standardized) data."""
    st = model.standardizer
    z = st.transform("z", data.z)
    w = None if data.w is None else st.transform("w", data.w)
    observed = np.concatenate([st.transform("x", data.x), st.transform("y", data.y)], axis=1)
    return _full_data_parts([model.g_net, model.f_net], st, model.binary_treatment, z, w, observed, model.noise, _rng(rng))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _check_m(m):
    if int(m) < 1:
        raise InputError(f"number of samples m must be >= 1, got {m}")
    return int(m)


def _rows_for(model, values, role, width_key):
    arr = np.asarray(values, dtype=np.float64)
    single = arr.ndim <= 1
    arr = arr.reshape(1, -1) if single else arr
    if arr.shape[1] != model.dims[width_key]:
        raise ShapeError(f"{role} has {arr.shape[1]} columns, model expects {model.dims[width_key]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{role} contains non-finite values")
    return arr, single


def _w_rows(model, w, n):
    if not model.has_w:
        if w is not None:
            raise ShapeError("model was fitted without covariates w")
        return None
    if w is None:
        raise ShapeError("model was fitted with covariates w; pass w")
    w_arr, _ = _rows_for(model, w, "w", "l")
    if len(w_arr) == 1 and n > 1:
        w_arr = np.repeat(w_arr, n, axis=0)
    if len(w_arr) != n:
        raise ShapeError("w must have one row per x row")
    return w_arr


def generate_joint(model: DIVModel, z_rows, w_rows=None, m: int = 1, rng=None):
    """Draw ``m`` samples of (X, Y) from the fitted law of (X, Y) | Z = z per row.

    Returns arrays of shape ``(n, m, d)`` and ``(n, m, p)``.
    """
    m = _check_m(m)
    rng = _rng(rng)
    z = np.asarray(z_rows, dtype=np.float64)
    if z.ndim <= 1:
        z = z.reshape(-1, 1) if model.dims["q"] == 1 else z.reshape(1, -1)
    z, _ = _rows_for(model, z, "z", "q")
    w = _w_rows(model, w_rows, len(z))
    st = model.standardizer
    n = len(z)
    zs = np.repeat(st.transform("z", z), m, axis=0)
    ws = None if w is None else np.repeat(st.transform("w", w), m, axis=0)
    eps_x, eps_y, eps_h = _draw_noise(rng, n * m, model.noise)
    x_hat, y_hat = _joint_forward(
        model.g_net, model.f_net, st, model.binary_treatment, zs, ws, eps_x, eps_y, eps_h
    )
    x_out = st.inverse("x", x_hat).reshape(n, m, -1)
    y_out = st.inverse("y", y_hat).reshape(n, m, -1)
    return x_out, y_out


def sample_observational(model: DIVModel, z_rows, w_rows=None, m: int = 1, rng=None):
    """Samples from the fitted observational law, same as :func:`generate_joint`.

    Per row: draw (eps_h, eps_x, eps_y), evaluate the treatment generator at
    z, then the outcome generator at the generated treatment.
    """
    return generate_joint(model, z_rows, w_rows, m, rng)


def _interventional_draws(model: DIVModel, x_rows, w_rows, m, rng):
    """(n, m, p) outcome draws with X clamped to each row of ``x_rows``."""
    st = model.standardizer
    n = len(x_rows)
    xs = st.transform("x", x_rows)
    ws = None if w_rows is None else st.transform("w", w_rows)
    out = np.empty((n, m, model.dims["p"]))
    per_chunk = max(1, _CHUNK_ROWS // m)
    for lo in range(0, n, per_chunk):
        hi = min(n, lo + per_chunk)
        rows = (hi - lo) * m
        eps_y = rng.standard_normal((rows, model.noise.dim_eps_y))
        eps_h = rng.standard_normal((rows, model.noise.dim_eps_h))
        blocks = [np.repeat(xs[lo:hi], m, axis=0)]
        if ws is not None:
            blocks.append(np.repeat(ws[lo:hi], m, axis=0))
        y_hat = nn.mlp_forward(model.f_net, np.concatenate([*blocks, eps_y, eps_h], axis=1))
        out[lo:hi] = st.inverse("y", y_hat).reshape(hi - lo, m, -1)
    return out


def sample_interventional(model: DIVModel, x, w=None, m: int = DEFAULT_M, rng=None):
    """Samples of Y under do(X := x).

    ``x`` of shape (d,) gives an (m, p) array; an (n, d) matrix of
    treatment rows gives (n, m, p).
    """
    m = _check_m(m)
    x_arr, single = _rows_for(model, x, "x", "d")
    w_arr = _w_rows(model, w, len(x_arr))
    draws = _interventional_draws(model, x_arr, w_arr, m, _rng(rng))
    return draws[0] if single else draws


def interventional_mean(model: DIVModel, x, w=None, m: int = DEFAULT_M, rng=None):
    """Monte Carlo interventional mean, (p,) per treatment value."""
    return sample_interventional(model, x, w, m, rng).mean(axis=-2)


def _check_alphas(alphas):
    a = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    if a.ndim != 1 or a.size == 0:
        raise InputError("alphas must be a non-empty list")
    if np.any((a < 0) | (a > 1)) or not np.all(np.isfinite(a)):
        raise InputError("every alpha must lie in [0, 1]")
    return a


def lower_quantile(samples, alphas, axis=0):
    """inf{t : F_n(t) >= alpha} of the empirical CDF along ``axis``."""
    a = _check_alphas(alphas)
    return np.quantile(samples, a, axis=axis, method="inverted_cdf")


def interventional_quantile(model: DIVModel, x, alphas, w=None, m: int = DEFAULT_M, rng=None):
    """Lower empirical quantiles of Y under do(X := x).

    Returns (|alphas|, p) for a single treatment value, (n, |alphas|, p) for
    treatment rows.
    """
    a = _check_alphas(alphas)
    samples = sample_interventional(model, x, w, m, rng)
    q = lower_quantile(samples, a, axis=-2)  # alphas first
    return q if samples.ndim == 2 else np.moveaxis(q, 0, 1)


def qte(model: DIVModel, x1, x0, alphas, w=None, m: int = DEFAULT_M, rng=None):
    """Quantile treatment effect q_alpha(x1) - q_alpha(x0).

    Both arms reuse one sub-seed drawn from ``rng`` (common random numbers).
    """
    a = _check_alphas(alphas)
    sub_seed = int(_rng(rng).integers(0, 2**63 - 1))
    q1 = interventional_quantile(model, x1, a, w, m, np.random.default_rng(sub_seed))
    q0 = interventional_quantile(model, x0, a, w, m, np.random.default_rng(sub_seed))
    return q1 - q0


def extract_linear_beta(model: DIVModel):
    """Treatment coefficients of a ``linear_no_bias`` outcome head, original scale.

    Returns a (d,) vector for a single outcome, (p, d) otherwise.
    """
    if model.outcome_head != "linear_no_bias":
        raise ConfigurationError("extract_linear_beta needs outcome_head='linear_no_bias'")
    d = model.dims["d"]
    weight = np.asarray(model.f_net.weights[0])[:, :d]
    st = model.standardizer
    beta = weight * st.scales["y"][:, None] / st.scales["x"][None, :]
    return beta[0] if beta.shape[0] == 1 else beta


def with_networks(model: DIVModel, g_net=None, f_net=None) -> DIVModel:
    return replace(model, g_net=g_net or model.g_net, f_net=f_net or model.f_net)
