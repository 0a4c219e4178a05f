"""Experiment orchestration: dataset ingestion, noise contamination,
prediction-error and Monte-Carlo risk metrics, and the config-driven
comparison grid behind the command line interface.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.signal

from . import sysmodel
from .bayes import ChainConfig, init_chain, run_chain
from .subspace import (
    WeightPair,
    assemble,
    default_weights,
    ls_markov,
    recover_system,
    row_length,
    select_rank,
    truncation_factors,
    weighted_truncate,
)
from .sysmodel import StateSpaceModel, TimeSeries, predict_one_step, simulate


class ConfigError(Exception):
    """Invalid experiment configuration."""


class DataError(Exception):
    """Unreadable or inconsistent input data."""


METHODS = ("ls", "svd", "gibbs")
METHOD_ALIASES = {
    "svd-truncated": "svd",
    "bayes-gibbs": "gibbs",
}

#: Published estimation/validation split lengths for the standard DAISY
#: benchmark sets ("reuse" marks sets whose two segments coincide).
DAISY_SPLITS = {
    "heating system": (280, 521, False),
    "powerplant": (120, 80, False),
    "winding": (875, 1625, False),
    "wall thermal resistance": (1260, 420, False),
    "reactor": (2625, 4875, False),
    "glass furnace": (436, 811, False),
    "evaporator": (2206, 4099, False),
    "industrial dryer": (303, 564, False),
    "ball beam": (1000, 1000, True),
    "hair dryer": (350, 650, False),
    "cd player arm": (716, 1332, False),
    "flutter": (1024, 1024, True),
    "robot arm": (768, 256, False),
    "flexible structure": (2983, 5540, False),
}


@dataclass
class DatasetSpec:
    """One dataset of an experiment grid.

    ``path`` is a whitespace-separated numeric file, or ``synthetic[:seed]``
    for the built-in synthetic system.  Column indices are 0-based.
    """

    path: str
    input_columns: list
    output_columns: list
    skip_columns: list = field(default_factory=list)
    estimation_length: int = 0
    validation_length: int = 0
    name: str = ""
    reuse_flag: bool = False

    def __post_init__(self):
        if not self.name:
            self.name = self.path
        key = self.name.strip().lower()
        if (not self.estimation_length or not self.validation_length) and key in DAISY_SPLITS:
            n, n_val, reuse = DAISY_SPLITS[key]
            self.estimation_length = self.estimation_length or n
            self.validation_length = self.validation_length or n_val
            self.reuse_flag = self.reuse_flag or reuse
        if self.estimation_length < 1 or self.validation_length < 1:
            raise ConfigError(
                f"dataset {self.name!r} needs positive estimation and validation lengths"
            )
        used = set(self.input_columns) & set(self.output_columns)
        if used or set(self.skip_columns) & (set(self.input_columns) | set(self.output_columns)):
            raise ConfigError(f"dataset {self.name!r} has overlapping column selections")


@dataclass
class ExperimentConfig:
    datasets: list
    noise_levels: list
    methods: list
    trials_per_cell: int = 1
    chain: ChainConfig = field(default_factory=ChainConfig)
    rank_policy: object = "auto"
    output_path: str = "results"
    seed: int = 0
    horizon: int | None = None
    clean_denominator: bool = False

    def __post_init__(self):
        if not self.datasets or not self.methods or not len(self.noise_levels):
            raise ConfigError("datasets, methods and noise levels must be nonempty")
        if any(a < 0 for a in self.noise_levels):
            raise ConfigError("noise levels must be nonnegative")
        methods = [METHOD_ALIASES.get(m, m) for m in self.methods]
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {METHODS}")
        self.methods = methods
        if self.trials_per_cell < 1:
            raise ConfigError("trials_per_cell must be >= 1")


@dataclass
class ResultRecord:
    dataset: str
    alpha: float
    method: str
    trial: int
    seed: int
    npe: float
    risk: float
    wall_time: float
    failure: str = ""


def load_daisy(spec):
    """Read a whitespace-separated numeric file into a :class:`TimeSeries`.

    Lines starting with ``#`` or ``%`` are skipped; any NaN in a selected
    column is rejected.
    """
    rows = []
    try:
        with open(spec.path) as fh:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith(("#", "%")):
                    continue
                try:
                    rows.append([float(tok) for tok in stripped.split()])
                except ValueError as err:
                    raise DataError(f"{spec.path}:{lineno}: {err}") from err
    except OSError as err:
        raise DataError(f"cannot read {spec.path}: {err}") from err
    if not rows:
        raise DataError(f"{spec.path}: no data lines")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{spec.path}: inconsistent column counts {sorted(widths)}")
    data = np.asarray(rows, dtype=float)
    ncols = data.shape[1]
    if not spec.output_columns:
        raise DataError(f"{spec.path}: no output columns selected")
    for col in list(spec.input_columns) + list(spec.output_columns):
        if not 0 <= col < ncols:
            raise DataError(f"{spec.path}: column {col} out of range (file has {ncols})")
    u = data[:, list(spec.input_columns)]
    y = data[:, list(spec.output_columns)]
    if np.isnan(u).any() or np.isnan(y).any():
        raise DataError(f"{spec.path}: selected columns contain NaN")
    return TimeSeries(u, y)


def write_daisy(path, ts, header=None):
    """Write a :class:`TimeSeries` in the whitespace-separated column format
    (inputs first, then outputs)."""
    data = np.hstack([ts.u, ts.y])
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        for row in data:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def detrend(ts, est_length=None):
    """Remove the per-channel mean of the estimation segment from both
    channels of the whole series."""
    n = ts.length if est_length is None else min(est_length, ts.length)
    mu_u = ts.u[:n].mean(axis=0)
    mu_y = ts.y[:n].mean(axis=0)
    return TimeSeries(ts.u - mu_u, ts.y - mu_y)


def contaminate(ts, alpha, Sigma_y, seed):
    """Add colored output noise ``v[k] = 0.5 v[k-1] + sqrt(3)/2 w[k]`` with
    ``w[k] ~ N(0, alpha^2 Sigma_y)``, one continuous realization over the
    whole series.

    The AR gain makes the stationary variance of ``v`` equal ``alpha^2 Sigma_y``.
    """
    if alpha < 0:
        raise ValueError(f"noise level must be nonnegative, got {alpha}")
    if alpha == 0:
        return TimeSeries(ts.u.copy(), ts.y.copy())
    Sigma_y = np.atleast_2d(np.asarray(Sigma_y, dtype=float))
    # symmetric PSD factor; tolerates singular output covariances
    from .structops import spd_sqrt

    L = spd_sqrt(Sigma_y)
    rng = np.random.default_rng(seed)
    w = alpha * rng.standard_normal((ts.length, ts.n_o)) @ L.T
    v = scipy.signal.lfilter([np.sqrt(3.0) / 2.0], [1.0, -0.5], w, axis=0)
    return TimeSeries(ts.u.copy(), ts.y + v)


def normalized_prediction_error(yhat, y):
    """Channel-averaged ratio of squared one-step prediction error to output
    energy; zero-energy channels are excluded with a warning."""
    yhat = np.atleast_2d(np.asarray(yhat, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    num = np.sum((yhat - y) ** 2, axis=0)
    den = np.sum(y**2, axis=0)
    keep = den > 0
    if not keep.all():
        warnings.warn(
            f"excluded {int((~keep).sum())} zero-energy output channel(s)",
            RuntimeWarning,
            stacklevel=2,
        )
    if not keep.any():
        raise ValueError("all output channels have zero energy")
    return float(np.mean(num[keep] / den[keep]))


@dataclass
class HfpEstimate:
    """Markov-parameter estimate with its rank-``r`` factors."""

    Hfp: np.ndarray
    Gamma: np.ndarray
    Lp: np.ndarray
    Hf: np.ndarray
    info: dict = field(default_factory=dict)


def estimate_markov(ds, method, rank, chain_cfg=None, weights=None):
    """Run one Markov-parameter estimator on an assembled dataset.

    ``ls`` returns the raw least-squares estimate, ``svd`` its weighted
    rank-``r`` truncation, ``gibbs`` the chain average.  All three report
    rank-``r`` factors split through ``Zp`` so downstream recovery is shared.
    """
    method = METHOD_ALIASES.get(method, method)
    ls = ls_markov(ds)
    if method == "ls":
        Gamma, Lp, s = truncation_factors(ls.Hfp, ds, rank)
        return HfpEstimate(ls.Hfp, Gamma, Lp, ls.Hf, {"singular_values": s})
    if method == "svd":
        if weights is None:
            weights = WeightPair(W1=np.eye(ds.f * ds.n_o), W2=ds.Zp)
        Hfp_low = weighted_truncate(ls.Hfp, weights, rank)
        Gamma, Lp, s = truncation_factors(ls.Hfp, ds, rank, W1=weights.W1)
        return HfpEstimate(Hfp_low, Gamma, Lp, ls.Hf, {"singular_values": s})
    if method == "gibbs":
        cfg = chain_cfg if chain_cfg is not None else ChainConfig()
        priors, state = init_chain(ds, rank)
        result = run_chain(ds, priors, cfg, initial_state=state)
        Gamma, Lp, s = truncation_factors(result.Hfp, ds, rank)
        return HfpEstimate(
            result.Hfp,
            Gamma,
            Lp,
            result.Hf,
            {"singular_values": s, "chain": result},
        )
    raise ConfigError(f"unknown method {method!r}")


def weighted_risk(Hfp_true, Hfp_est, weights):
    """Squared weighted Frobenius distance ``||W1 (H - Hhat) W2||_F^2``."""
    diff = Hfp_true - Hfp_est
    if weights is not None:
        diff = weights.W1 @ diff
        if weights.W2 is not None:
            diff = diff @ weights.W2
    return float(np.sum(diff**2))


@dataclass
class RiskEstimate:
    mean: float
    stderr: float
    trials: int
    failures: int
    per_trial: np.ndarray


def risk_monte_carlo(
    model,
    estimator,
    weights_policy,
    trials,
    f,
    p,
    N,
    seed,
    alpha=0.0,
    burn_in=100,
):
    """Monte-Carlo estimate of the weighted Frobenius risk of an estimator.

    Each trial simulates a fresh white Gaussian input and innovation
    realization of length ``N`` (after ``burn_in`` warm-up samples),
    optionally contaminates the outputs with colored noise at level
    ``alpha``, assembles the Hankel blocks, runs ``estimator(ds, seed)`` and
    scores the result against the true Markov-parameter matrix.  Estimator
    failures are counted, not fatal.
    """
    if trials < 2:
        raise ValueError(f"need at least 2 trials, got {trials}")
    Hfp_true, _, _ = sysmodel.markov_Hfp(model, f, p)
    values = []
    failures = 0
    for trial in range(trials):
        ss = np.random.SeedSequence([int(seed), trial])
        s_input, s_sim, s_noise, s_est = ss.spawn(4)
        rng = np.random.default_rng(s_input)
        u = rng.standard_normal((N + burn_in, model.n_i))
        ts = simulate(model, u, seed=s_sim).segment(burn_in, burn_in + N)
        ts = detrend(ts)
        Sigma_y = np.atleast_2d(np.cov(ts.y.T))
        if alpha > 0:
            ts = contaminate(ts, alpha, Sigma_y, s_noise)
        ds = assemble(ts, f, p)
        weights = weights_policy(ds, Sigma_y) if callable(weights_policy) else weights_policy
        try:
            est = estimator(ds, s_est)
            Hfp_est = est.Hfp if isinstance(est, HfpEstimate) else np.asarray(est)
            values.append(weighted_risk(Hfp_true, Hfp_est, weights))
        except (np.linalg.LinAlgError, ValueError) as err:
            failures += 1
            warnings.warn(f"trial {trial} failed: {err}", RuntimeWarning, stacklevel=2)
    values = np.asarray(values)
    if values.size == 0:
        raise np.linalg.LinAlgError("all risk trials failed")
    stderr = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return RiskEstimate(float(values.mean()), stderr, trials, failures, values)


def default_synthetic_model():
    """Third-order two-input two-output test system with a well-damped
    predictor and a modest innovation level."""
    A_K = np.array([[0.25, 0.10, 0.00], [0.00, 0.15, -0.12], [0.05, 0.00, 0.05]])
    K = np.array([[0.30, -0.10], [0.12, 0.20], [-0.05, 0.15]])
    C = np.array([[1.0, 0.4, -0.3], [-0.2, 1.0, 0.5]])
    A = A_K + K @ C
    B = np.array([[1.0, 0.2], [-0.3, 0.9], [0.4, -0.5]])
    D = np.array([[0.6, -0.1], [0.2, 0.5]])
    Sigma = 0.02 * np.eye(2)
    return StateSpaceModel(A, B, C, D, K, Sigma)


def generate_synthetic_timeseries(model, T, seed, burn_in=100):
    """Simulate ``T`` samples driven by unit white Gaussian input, after a
    warm-up stretch that removes the initial-state transient."""
    ss = np.random.SeedSequence([int(seed), 0x5EED])
    s_u, s_sim = ss.spawn(2)
    u = np.random.default_rng(s_u).standard_normal((T + burn_in, model.n_i))
    return simulate(model, u, seed=s_sim).segment(burn_in, burn_in + T)


def _load_dataset(spec, data_seed):
    """Return ``(series, truth_model_or_None)`` for a dataset spec."""
    if spec.path.startswith("synthetic"):
        model = default_synthetic_model()
        _, _, sseed = spec.path.partition(":")
        seed = int(sseed) if sseed else data_seed
        total = spec.estimation_length + (
            0 if spec.reuse_flag else spec.validation_length
        )
        return generate_synthetic_timeseries(model, total, seed), model
    ts = load_daisy(spec)
    needed = spec.estimation_length + (0 if spec.reuse_flag else spec.validation_length)
    if ts.length < needed:
        raise DataError(
            f"dataset {spec.name!r} has {ts.length} samples, needs {needed}"
        )
    return ts, None


def run_experiment(cfg):
    """Run the full (dataset x noise level x method x trial) grid.

    Per cell: detrend, contaminate, split, assemble with the row-length rule,
    estimate the Markov parameters, recover a state-space model and score the
    one-step predictions on the validation segment.  Failures are recorded
    with a reason and the grid continues.  Returns the records sorted by
    (dataset, alpha, method, trial).
    """
    records = []
    for d_idx, spec in enumerate(cfg.datasets):
        for a_idx, alpha in enumerate(cfg.noise_levels):
            for m_idx, method in enumerate(cfg.methods):
                for trial in range(cfg.trials_per_cell):
                    cell_seed = np.random.SeedSequence(
                        [cfg.seed, d_idx, a_idx, m_idx, trial]
                    )
                    record = _run_cell(cfg, spec, alpha, method, trial, cell_seed)
                    records.append(record)
    records.sort(key=lambda rec: (rec.dataset, rec.alpha, rec.method, rec.trial))
    return records


def _run_cell(cfg, spec, alpha, method, trial, cell_seed):
    seed_id = int(cell_seed.generate_state(1)[0])
    s_noise, s_est = cell_seed.spawn(2)
    start = time.perf_counter()
    try:
        ts_raw, truth = _load_dataset(spec, data_seed=cfg.seed + trial)
        N, N_val = spec.estimation_length, spec.validation_length
        ts = detrend(ts_raw, est_length=N)
        clean_val = ts.segment(0, N_val) if spec.reuse_flag else ts.segment(N, N + N_val)
        Sigma_y = np.atleast_2d(np.cov(ts.y[:N].T))
        noisy = contaminate(ts, alpha, Sigma_y, s_noise) if alpha > 0 else ts
        est_ts = noisy.segment(0, N)
        val_ts = noisy.segment(0, N_val) if spec.reuse_flag else noisy.segment(N, N + N_val)

        f = cfg.horizon or row_length(N, ts.n_o, ts.n_i)
        ds = assemble(est_ts, f, f)
        Sigma_noisy = np.atleast_2d(np.cov(est_ts.y.T))
        weights = default_weights(ds, Sigma_noisy)
        if cfg.rank_policy == "auto":
            ls = ls_markov(ds)
            _, sv, _ = np.linalg.svd(ls.Hfp @ ds.Zp, full_matrices=False)
            rank = max(1, select_rank(sv))
        else:
            rank = int(cfg.rank_policy)

        chain_cfg = ChainConfig(
            total_iterations=cfg.chain.total_iterations,
            burn_in=cfg.chain.burn_in,
            gf_variant=cfg.chain.gf_variant,
            seed=int(np.random.default_rng(s_est).integers(0, 2**31 - 1)),
            average_mode=cfg.chain.average_mode,
            extra_gamma_refresh=cfg.chain.extra_gamma_refresh,
        )
        est = estimate_markov(ds, method, rank, chain_cfg=chain_cfg, weights=weights)
        model = recover_system(est.Gamma, est.Lp, est.Hf, ds, rank)
        yhat = predict_one_step(model, val_ts)
        skip = max(f, 20)
        y_ref = clean_val.y if cfg.clean_denominator else val_ts.y
        npe = normalized_prediction_error(yhat[skip:], y_ref[skip:])
        if not np.isfinite(npe):
            raise ValueError("prediction error is not finite")
        risk = np.nan
        if truth is not None:
            Hfp_true, _, _ = sysmodel.markov_Hfp(truth, f, f)
            risk = weighted_risk(Hfp_true, est.Hfp, weights)
        elapsed = time.perf_counter() - start
        rec = ResultRecord(spec.name, alpha, method, trial, seed_id, npe, risk, elapsed)
        if method == "gibbs":
            rec.chain = est.info.get("chain")
        return rec
    except (ValueError, np.linalg.LinAlgError, DataError) as err:
        elapsed = time.perf_counter() - start
        return ResultRecord(
            spec.name, alpha, method, trial, seed_id, np.nan, np.nan, elapsed, str(err)
        )


def _fmt(value):
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return f"{value:.12g}"
    return str(value)


def write_records(records, out_dir, cfg=None):
    """Write ``results.csv``, ``results.json`` and per-cell chain traces.

    The CSV is deterministic for a fixed seed except for the wall_time
    column.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "results.csv")
    columns = ["dataset", "alpha", "method", "trial", "seed", "npe", "risk", "wall_time"]
    with open(csv_path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for rec in records:
            fh.write(
                ",".join(_fmt(getattr(rec, col)) for col in columns) + "\n"
            )
    json_path = os.path.join(out_dir, "results.json")
    payload = {
        "records": [
            {col: (None if isinstance(v := getattr(rec, col), float) and np.isnan(v) else v)
             for col in columns + ["failure"]}
            for rec in records
        ],
    }
    if cfg is not None:
        payload["config"] = {
            "seed": cfg.seed,
            "noise_levels": list(cfg.noise_levels),
            "methods": list(cfg.methods),
            "trials_per_cell": cfg.trials_per_cell,
            "rank_policy": cfg.rank_policy,
            "datasets": [spec.name for spec in cfg.datasets],
            "chain": asdict(cfg.chain),
        }
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for rec in records:
        chain = getattr(rec, "chain", None)
        if chain is None:
            continue
        cell = f"{rec.dataset}_a{rec.alpha:g}_{rec.method}_t{rec.trial}".replace(" ", "-")
        cell_dir = os.path.join(out_dir, "chains", cell)
        os.makedirs(cell_dir, exist_ok=True)
        with open(os.path.join(cell_dir, "trace.csv"), "w") as fh:
            fh.write("iteration,logdet_g11,gamma_lp_norm\n")
            for it, (ld, nm) in enumerate(
                zip(chain.logdet_g11_trace, chain.gamma_lp_norm_trace), start=1
            ):
                fh.write(f"{it},{ld:.12g},{nm:.12g}\n")
    return csv_path, json_path


def aggregate_records(records):
    """Mean prediction error per (alpha, method), for plotting-ready output."""
    table = {}
    for rec in records:
        if rec.failure or not np.isfinite(rec.npe):
            continue
        table.setdefault((rec.alpha, rec.method), []).append(rec.npe)
    return {key: float(np.mean(vals)) for key, vals in sorted(table.items())}


def _parse_scalar(text):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _parse_list(text):
    return [tok for tok in text.replace(",", " ").split() if tok]


def parse_config(path):
    """Parse the plain ``key = value`` experiment description with repeated
    ``dataset { ... }`` blocks."""
    top = {}
    datasets = []
    block = None
    try:
        lines = open(path).read().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.rstrip("{").strip() == "dataset" and line.endswith("{"):
            if block is not None:
                raise ConfigError(f"{path}:{lineno}: nested dataset block")
            block = {}
            continue
        if line == "}":
            if block is None:
                raise ConfigError(f"{path}:{lineno}: unmatched '}}'")
            datasets.append(block)
            block = None
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        target = top if block is None else block
        target[key.strip().lower()] = value.strip()
    if block is not None:
        raise ConfigError(f"{path}: unterminated dataset block")
    if not datasets:
        raise ConfigError(f"{path}: no dataset blocks")

    specs = []
    for entry in datasets:
        try:
            specs.append(
                DatasetSpec(
                    path=entry["path"],
                    input_columns=[int(c) for c in _parse_list(entry.get("inputs", ""))],
                    output_columns=[int(c) for c in _parse_list(entry.get("outputs", ""))],
                    skip_columns=[int(c) for c in _parse_list(entry.get("skip", ""))],
                    estimation_length=int(entry.get("est", 0)),
                    validation_length=int(entry.get("val", 0)),
                    name=entry.get("name", ""),
                    reuse_flag=bool(_parse_scalar(entry.get("reuse", "false"))),
                )
            )
        except (KeyError, ValueError) as err:
            raise ConfigError(f"{path}: bad dataset block: {err}") from err

    chain = ChainConfig(
        total_iterations=int(top.get("iters", 500)),
        burn_in=int(top.get("burnin", 100)),
        gf_variant=top.get("variant", "independent-approx"),
        average_mode=top.get("average", "rao-blackwell"),
        extra_gamma_refresh=bool(_parse_scalar(top.get("refresh", "true"))),
    )
    rank = top.get("rank", "auto")
    return ExperimentConfig(
        datasets=specs,
        noise_levels=[float(a) for a in _parse_list(top.get("alphas", "0"))],
        methods=_parse_list(top.get("methods", "ls svd gibbs")),
        trials_per_cell=int(top.get("trials", 1)),
        chain=chain,
        rank_policy=rank if rank == "auto" else int(rank),
        output_path=top.get("out", "results"),
        seed=int(top.get("seed", 0)),
        horizon=int(top["horizon"]) if "horizon" in top else None,
        clean_denominator=bool(_parse_scalar(top.get("clean_denominator", "false"))),
    )
