"""Command line front end: ``distiv fit | predict | simulate | benchmark``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import baselines, simlab
from .data import Dataset
from .errors import DegenerateDesignError, DivError, InputError, ModelFormatError, NumericalError
from .io import load_model, numeric_columns, read_csv, save_model, write_csv
from .model import FitConfig, NoiseConfig, extract_linear_beta, fit_div, interventional_mean, interventional_quantile, qte, sample_interventional

log = logging.getLogger("distiv")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_VERSION = 4
METHODS = ("div", "tsls", "cf_linear", "cf_spline", "engression")


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message.replace("\n", " "))


def _names(value):
    return [c.strip() for c in value.split(",") if c.strip()] if value else []


def _float_list(value):
    try:
        return [float(v) for v in _names(value)]
    except ValueError:
        raise CliError(f"cannot parse number list {value!r}") from None


def _seed_list(value):
    seeds = []
    for part in _names(value):
        lo, sep, hi = part.partition("..")
        try:
            seeds.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise CliError(f"cannot parse seed list {value!r}") from None
    return seeds


def _add_fit_flags(p, defaults: FitConfig):
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--batch", type=int, default=defaults.batch_size)
    p.add_argument("--noise-dim", type=int, default=defaults.noise.dim_eps_x)
    p.add_argument("--num-layers", type=int, default=defaults.num_layers)
    p.add_argument("--hidden-width", type=int, default=defaults.hidden_width)
    p.add_argument("--outcome-head", choices=("mlp", "linear_no_bias"), default=defaults.outcome_head)
    p.add_argument("--binary-treatment", action="store_true")
    p.add_argument("--diagnostics-every", type=int, default=defaults.diagnostics_every)
    p.add_argument("--seed", type=int, default=0)


def _fit_config(args, **overrides) -> FitConfig:
    kwargs = dict(
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch,
        noise=NoiseConfig.uniform(args.noise_dim),
        num_layers=args.num_layers,
        hidden_width=args.hidden_width,
        outcome_head=args.outcome_head,
        binary_treatment=args.binary_treatment,
        diagnostics_every=args.diagnostics_every,
        seed=args.seed,
    )
    kwargs.update(overrides)
    return FitConfig(**kwargs)


def build_parser():
    parser = _Parser(prog="distiv", description="Distributional instrumental variable estimation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a DIV model on a CSV file")
    p.add_argument("data", help="input CSV with header")
    p.add_argument("--z", required=True, help="comma-separated instrument columns")
    p.add_argument("--x", required=True, help="comma-separated treatment columns")
    p.add_argument("--y", required=True, help="comma-separated outcome columns")
    p.add_argument("--w", default="", help="comma-separated exogenous covariate columns")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--trace", help="trace CSV (default: <out>.trace.csv)")
    _add_fit_flags(p, FitConfig())

    p = sub.add_parser("predict", help="interventional predictions from a fitted model")
    p.add_argument("model")
    p.add_argument("data", help="CSV with the treatment (and covariate) columns")
    p.add_argument("--mode", choices=("mean", "quantile", "sample"), default="mean")
    p.add_argument("--alphas", default="0.1,0.5,0.9")
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("simulate", help="run methods on a simulated scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--methods", default="div")
    p.add_argument("--seeds", default="1")
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--out", required=True, help="output directory")
    _add_fit_flags(p, FitConfig())

    p = sub.add_parser("benchmark", help="run the acceptance criteria and write a JSON summary")
    p.add_argument("--out", required=True)
    p.add_argument("--criteria", default="", help="comma-separated criterion ids (default: all)")
    p.add_argument("--tolerance-scale", type=float, default=1.0, help="0 makes every criterion fail")
    return parser


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def cmd_fit(args):
    roles = {r: _names(getattr(args, r)) for r in ("z", "x", "y", "w")}
    for r in ("z", "x", "y"):
        if not roles[r]:
            raise CliError(f"--{r} needs at least one column")
    seen = {}
    for r, cols in roles.items():
        for c in cols:
            if c in seen:
                raise CliError(f"column {c!r} assigned to both {seen[c]} and {r}")
            seen[c] = r
    header, rows = read_csv(args.data)
    for c in seen:
        if c not in header:
            raise CliError(f"column {c!r} not found in {args.data}")
    blocks = {r: numeric_columns(header, rows, cols, args.data) for r, cols in roles.items() if cols}
    data = Dataset(
        blocks["z"], blocks["x"], blocks["y"], blocks.get("w"), names={r: tuple(c) for r, c in roles.items() if c}
    )
    config = _fit_config(args)
    model, trace = fit_div(data, config)
    save_model(model, args.out)
    write_csv(
        args.trace or f"{args.out}.trace.csv",
        ["epoch", "loss", "s1", "s2"],
        [[r.epoch, float(r.loss), float(r.s1), float(r.s2)] for r in trace.records],
    )
    final = trace.final
    log.info("fitted %d rows; final loss %.6g (s1 %.6g, s2 %.6g)", data.n, final.loss, final.s1, final.s2)
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def cmd_predict(args):
    model = load_model(args.model)
    header, rows = read_csv(args.data)
    x_cols = list(model.names.get("x", ()))
    w_cols = list(model.names.get("w", ())) if model.has_w else []
    missing = [c for c in x_cols + w_cols if c not in header]
    if missing:
        raise CliError(f"input lacks model columns {missing}; model expects x={x_cols} w={w_cols}")
    x = numeric_columns(header, rows, x_cols, args.data)
    w = numeric_columns(header, rows, w_cols, args.data) if w_cols else None
    y_cols = list(model.names.get("y", ()))
    rng = np.random.default_rng(args.seed)
    in_cols = x_cols + w_cols
    inputs = x if w is None else np.concatenate([x, w], axis=1)
    out_rows = []
    if args.mode == "mean":
        est = interventional_mean(model, x, w, args.m, rng)
        header_out = in_cols + y_cols
        out_rows = [[*map(float, inputs[i]), *map(float, est[i])] for i in range(len(x))]
    elif args.mode == "quantile":
        alphas = _float_list(args.alphas)
        if not alphas:
            raise CliError("--alphas is empty")
        order = np.argsort(alphas, kind="stable")
        alphas = [alphas[i] for i in order]
        q = interventional_quantile(model, x, alphas, w, args.m, rng)
        header_out = in_cols + ["alpha"] + y_cols
        out_rows = [[*map(float, inputs[i]), a, *map(float, q[i, j])] for i in range(len(x)) for j, a in enumerate(alphas)]
    else:
        s = sample_interventional(model, x, w, args.m, rng)
        header_out = in_cols + ["sample_index"] + y_cols
        out_rows = [[*map(float, inputs[i]), j, *map(float, s[i, j])] for i in range(len(x)) for j in range(args.m)]
    write_csv(args.out, header_out, out_rows)
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


_APPLICABLE = {
    "mean": {"div", "tsls", "cf_linear", "cf_spline", "engression"},
    "qte": {"div", "tsls", "engression"},
    "beta": {"div", "tsls"},
}


def run_cell(spec, method, seed, n, config: FitConfig, m=1000):
    """Fit one method on one simulated data set; return (metrics, predictions)."""
    data = simlab.generate_scenario(spec, n, seed)
    config = FitConfig(**{**config.__dict__, "seed": seed})
    metrics = {"mse": "", "qte_rmse": "", "beta_error": "", "note": ""}
    rng = np.random.default_rng(seed)
    preds = []
    if spec.kind == "mean":
        grid = simlab.default_grid(data.x)
        oracle = simlab.oracle_mean(spec, grid)
        if method == "div":
            model, _ = fit_div(data, config)
            est = interventional_mean(model, grid[:, None], m=m, rng=rng)[:, 0]
        elif method == "engression":
            est = baselines.predict_mean(baselines.fit_engression(data, config), grid, m, rng)
        else:
            try:
                fit = _linear_fit(method, data)
            except DegenerateDesignError as exc:
                metrics["note"] = _degenerate_note(exc)
                return metrics, preds
            est = baselines.predict_mean(fit, grid)
        metrics["mse"] = simlab.eval_mean_mse(est, oracle)
        preds = [(float(g), float(e)) for g, e in zip(grid, est)]
    elif spec.kind == "qte":
        alphas = np.array(simlab.QTE_ALPHAS)
        oracle = simlab.oracle_qte(spec, alphas)
        if method == "div":
            model, _ = fit_div(data, config)
            est = qte(model, [1.0], [0.0], alphas, m=max(m, 1000), rng=rng)[:, 0]
        elif method == "engression":
            fit = baselines.fit_engression(data, config)
            sub_seed = int(rng.integers(0, 2**63 - 1))
            draws = [baselines.sample_engression(fit, [[v]], max(m, 1000), sub_seed)[0, :, 0] for v in (1.0, 0.0)]
            est = np.quantile(draws[0], alphas, method="inverted_cdf") - np.quantile(draws[1], alphas, method="inverted_cdf")
        else:
            try:
                fit = baselines.fit_tsls(data)
            except DegenerateDesignError as exc:
                metrics["note"] = _degenerate_note(exc)
                return metrics, preds
            est = np.full(len(alphas), float(fit.beta[0]))
        metrics["qte_rmse"] = simlab.eval_qte_rmse(est, oracle)
        preds = [(float(a), float(e)) for a, e in zip(alphas, est)]
    else:
        if method == "div":
            model, _ = fit_div(data, FitConfig(**{**config.__dict__, "outcome_head": "linear_no_bias"}))
            beta = extract_linear_beta(model)
        else:
            try:
                beta = baselines.fit_tsls(data).beta
            except DegenerateDesignError as exc:
                metrics["note"] = _degenerate_note(exc)
                return metrics, preds
        metrics["beta_error"] = simlab.eval_beta_error(beta, spec.beta)
        preds = [(j + 1, float(b)) for j, b in enumerate(np.ravel(beta))]
    return metrics, preds


def _degenerate_note(exc):
    if exc.condition_number is None:
        return f"degenerate design ({exc})"
    return f"degenerate design (condition number {exc.condition_number:.3g})"


def _linear_fit(method, data):
    if method == "tsls":
        return baselines.fit_tsls(data)
    return baselines.fit_cf(data, "linear" if method == "cf_linear" else "natural_cubic_spline")


def cmd_simulate(args):
    try:
        spec = simlab.get_scenario(args.scenario)
    except DivError as exc:
        raise CliError(str(exc)) from None
    methods = _names(args.methods)
    seeds = _seed_list(args.seeds)
    if not methods:
        raise CliError("--methods is empty")
    if not seeds:
        raise CliError("--seeds is empty")
    for meth in methods:
        if meth not in METHODS:
            raise CliError(f"unknown method {meth!r}; known: {', '.join(METHODS)}")
        if meth not in _APPLICABLE[spec.kind]:
            raise CliError(f"method {meth!r} does not apply to scenario {spec.id}")
    config = _fit_config(args)
    os.makedirs(args.out, exist_ok=True)
    cells = [(meth, s) for meth in methods for s in seeds]
    workers = max(1, int(os.environ.get("DIV_THREADS", "1") or 1))

    def work(cell):
        return run_cell(spec, cell[0], cell[1], args.n, config, args.m)

    if workers == 1:
        results = [work(c) for c in cells]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, cells))

    metric_keys = ("mse", "qte_rmse", "beta_error")
    rows = []
    for (meth, s), (metrics, _) in zip(cells, results):
        rows.append([spec.id, meth, str(s), *[metrics[k] for k in metric_keys], metrics["note"]])
    for meth in methods:
        agg = []
        for k in metric_keys:
            vals = [metrics[k] for (mm, _), (metrics, _) in zip(cells, results) if mm == meth and metrics[k] != ""]
            agg.append(float(np.mean(vals)) if vals else "")
        rows.append([spec.id, meth, "mean", *agg, ""])
    write_csv(os.path.join(args.out, "metrics.csv"), ["scenario", "method", "seed", *metric_keys, "note"], rows)

    first_col = {"mean": "x", "qte": "alpha", "beta": "term"}[spec.kind]
    for meth in methods:
        pred_rows = [
            [a, e, meth, str(s)] for (mm, s), (_, preds) in zip(cells, results) if mm == meth for a, e in preds
        ]
        write_csv(os.path.join(args.out, f"predictions_{meth}.csv"), [first_col, "estimate", "method", "seed"], pred_rows)
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def cmd_benchmark(args):
    from . import benchmark

    ids = _names(args.criteria) or None
    try:
        results = benchmark.run(ids, tolerance_scale=args.tolerance_scale)
    except KeyError as exc:
        raise CliError(f"unknown criterion {exc.args[0]!r}") from None
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump([r.as_dict() for r in results], fh, indent=2)
        fh.write("\n")
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ModelFormatError as exc:
        code, msg = EXIT_VERSION, str(exc)
    except NumericalError as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (DivError, OSError) as exc:
        code, msg = EXIT_USAGE, str(exc)
    print(f"error: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
