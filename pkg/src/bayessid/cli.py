"""Command line interface.

Subcommands: ``identify`` (fit one dataset and report the prediction error),
``experiment`` (config-driven comparison grid), ``simulate`` (generate
synthetic data files) and ``risk`` (Monte-Carlo risk table).

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure in all cells.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import expharness
from .bayes import ChainConfig
from .expharness import (
    ConfigError,
    DataError,
    DatasetSpec,
    default_synthetic_model,
    default_weights,
    estimate_markov,
    generate_synthetic_timeseries,
    risk_monte_carlo,
    run_experiment,
    write_daisy,
    write_records,
)
from .subspace import assemble, default_weights as _default_weights, recover_system, row_length
from .sysmodel import predict_one_step


def _add_chain_flags(parser):
    parser.add_argument("--seed", type=int, default=0, help="master random seed")
    parser.add_argument("--rank", type=int, default=None, help="truncation rank (default: auto)")
    parser.add_argument(
        "--variant",
        choices=["exact", "approx"],
        default="approx",
        help="residual model for the noise-matrix draw",
    )
    parser.add_argument("--iters", type=int, default=500, help="total Gibbs iterations")
    parser.add_argument("--burnin", type=int, default=100, help="burn-in iterations")
    parser.add_argument("--out", default="results", help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bayessid",
        description="MIMO subspace identification with a Bayesian Gibbs-sampled "
        "Markov-parameter estimator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_id = sub.add_parser("identify", help="fit one dataset and report the prediction error")
    p_id.add_argument("--data", required=True, help="whitespace-separated data file")
    p_id.add_argument("--inputs", required=True, help="comma-separated input column indices")
    p_id.add_argument("--outputs", required=True, help="comma-separated output column indices")
    p_id.add_argument("--skip", default="", help="comma-separated ignored column indices")
    p_id.add_argument("--name", default="", help="dataset name (enables built-in splits)")
    p_id.add_argument("--est", type=int, default=0, help="estimation length")
    p_id.add_argument("--val", type=int, default=0, help="validation length")
    p_id.add_argument("--method", default="gibbs", help="ls, svd or gibbs")
    _add_chain_flags(p_id)

    p_exp = sub.add_parser("experiment", help="run a config-driven comparison grid")
    p_exp.add_argument("--config", required=True, help="experiment description file")
    p_exp.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_exp.add_argument("--out", default=None, help="override the output directory")

    p_sim = sub.add_parser("simulate", help="write synthetic data in the column format")
    p_sim.add_argument("--samples", type=int, default=1200, help="number of samples")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output file path")

    p_risk = sub.add_parser("risk", help="Monte-Carlo risk table on the built-in system")
    p_risk.add_argument("--trials", type=int, default=20)
    p_risk.add_argument("--alpha", type=float, default=0.5, help="added noise level")
    p_risk.add_argument("--methods", default="ls,svd,gibbs")
    p_risk.add_argument("--samples", type=int, default=600, help="estimation length per trial")
    p_risk.add_argument("--horizon", type=int, default=6, help="Hankel row length")
    _add_chain_flags(p_risk)
    return parser


def _int_list(text):
    return [int(tok) for tok in text.replace(",", " ").split() if tok]


def _cmd_identify(args):
    spec = DatasetSpec(
        path=args.data,
        input_columns=_int_list(args.inputs),
        output_columns=_int_list(args.outputs),
        skip_columns=_int_list(args.skip),
        estimation_length=args.est,
        validation_length=args.val,
        name=args.name or args.data,
    )
    ts = expharness.load_daisy(spec)
    N, N_val = spec.estimation_length, spec.validation_length
    needed = N + (0 if spec.reuse_flag else N_val)
    if ts.length < needed:
        raise DataError(f"{args.data} has {ts.length} samples, needs {needed}")
    ts = expharness.detrend(ts, est_length=N)
    est_ts = ts.segment(0, N)
    val_ts = ts.segment(0, N_val) if spec.reuse_flag else ts.segment(N, N + N_val)
    f = row_length(N, ts.n_o, ts.n_i)
    ds = assemble(est_ts, f, f)
    if args.rank is None:
        from .subspace import ls_markov, select_rank

        sv = np.linalg.svd(ls_markov(ds).Hfp @ ds.Zp, compute_uv=False)
        rank = max(1, select_rank(sv))
    else:
        rank = args.rank
    cfg = ChainConfig(
        total_iterations=args.iters,
        burn_in=args.burnin,
        gf_variant=args.variant,
        seed=args.seed,
    )
    weights = _default_weights(ds, np.atleast_2d(np.cov(est_ts.y.T)))
    est = estimate_markov(ds, args.method, rank, chain_cfg=cfg, weights=weights)
    model = recover_system(est.Gamma, est.Lp, est.Hf, ds, rank)
    yhat = predict_one_step(model, val_ts)
    skip = max(f, 20)
    npe = expharness.normalized_prediction_error(yhat[skip:], val_ts.y[skip:])
    report = {
        "dataset": spec.name,
        "method": args.method,
        "rank": rank,
        "horizon": f,
        "npe": npe,
        "model": {
            key: getattr(model, key).tolist() for key in ("A", "B", "C", "D", "K", "Sigma")
        },
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _cmd_experiment(args):
    cfg = expharness.parse_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.output_path
    records = run_experiment(cfg)
    if all(rec.failure for rec in records):
        print("all experiment cells failed", file=sys.stderr)
        for rec in records:
            print(f"  {rec.dataset}/a={rec.alpha}/{rec.method}: {rec.failure}", file=sys.stderr)
        return 3
    csv_path, json_path = write_records(records, out_dir, cfg)
    for (alpha, method), mean_npe in expharness.aggregate_records(records).items():
        print(f"alpha={alpha:g} method={method}: mean npe {mean_npe:.6g}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_simulate(args):
    model = default_synthetic_model()
    ts = generate_synthetic_timeseries(model, args.samples, args.seed)
    write_daisy(args.out, ts, header="columns: u0 u1 y0 y1 (synthetic)")
    print(f"wrote {args.samples} samples to {args.out}")
    return 0


def _cmd_risk(args):
    model = default_synthetic_model()
    methods = [tok for tok in args.methods.replace(",", " ").split() if tok]
    rank = args.rank if args.rank is not None else model.n_x
    cfg = ChainConfig(
        total_iterations=args.iters,
        burn_in=args.burnin,
        gf_variant=args.variant,
        seed=args.seed,
    )
    rows = []
    for method in methods:
        def estimator(ds, seed_seq, _method=method):
            chain = ChainConfig(
                total_iterations=cfg.total_iterations,
                burn_in=cfg.burn_in,
                gf_variant=cfg.gf_variant,
                seed=int(np.random.default_rng(seed_seq).integers(0, 2**31 - 1)),
            )
            return estimate_markov(ds, _method, rank, chain_cfg=chain)

        est = risk_monte_carlo(
            model,
            estimator,
            default_weights,
            trials=args.trials,
            f=args.horizon,
            p=args.horizon,
            N=args.samples,
            seed=args.seed,
            alpha=args.alpha,
        )
        rows.append((method, est))
        print(
            f"method={method}: risk {est.mean:.6g} +/- {est.stderr:.3g} "
            f"({est.failures} failures of {est.trials})"
        )
    if args.out:
        import os

        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "risk.csv")
        with open(path, "w") as fh:
            fh.write("method,risk,stderr,trials,failures\n")
            for method, est in rows:
                fh.write(f"{method},{est.mean:.12g},{est.stderr:.12g},{est.trials},{est.failures}\n")
        print(f"wrote {path}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "identify": _cmd_identify,
        "experiment": _cmd_experiment,
        "simulate": _cmd_simulate,
        "risk": _cmd_risk,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except np.linalg.LinAlgError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
