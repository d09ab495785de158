"""Command-line experiment harness.

Subcommands ``verify-exactness``, ``time-factors``, ``train`` and ``marglik``
each read an optional YAML config, apply command-line overrides, write a CSV
of result rows plus a JSON manifest next to it, and exit with 0 on success,
2 on a configuration error and 3 on a numeric failure.

Precedence: built-in defaults < config file < command-line flags.
"""

import argparse
import copy
import csv
import hashlib
import json
import math
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__, curvature, kfac, net, tasks, train
from .losses import GaussianLoss
from .rng import Streams
from .tensor import DefinitenessError, DimensionError, NumericError, rel_frobenius

KINDS = ("verify-exactness", "time-factors", "train", "marglik")
METRICS = ("rel_frob_error", "wall_micros", "loss", "steps_to_target", "marglik", "delta")
COLUMNS = ("kind", "seed", "layer", "flavour", "metric", "value", "units")

DEFAULTS = {
    "seeds": [0],
    "flavour": "both",
    "out": "results.csv",
    "verify-exactness": {
        "model": {"kind": "deep_linear", "dims": [8, 8, 8], "setting": "expand", "c": "mean",
                  "weights": None, "aggregate_at": None, "nonlinearity": "identity", "bias": False},
        "batch": {"N": 4, "R": 2},
        "loss": {"kind": "gaussian", "covariance": "random"},
        "dump_matrices": False,
    },
    "time-factors": {"R": [8, 16, 32, 64], "P": 64, "N": 32, "warmup": 5, "repeats": 20},
    "train": {
        "task": "deep_linear_regression",
        "steps": 1000,
        "target": None,
        "damping": 1e-2,
        "curvature": "mc",
        "mc_samples": 1,
        "factor_interval": 1,
        "precond_interval": 1,
        "ema_decay": 0.0,
        "lr_grid_gd": [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0],
        "lr_grid_kfac": [0.02, 0.05, 0.1, 0.2, 0.5, 1.0],
        "trace": True,
    },
    "marglik": {
        "N": 40, "D": 10, "noise_std": 0.5, "weight_std": 1.0,
        "delta_init": 1.0, "epochs": 30, "steps_per_epoch": 5, "every": 5,
        "ascent_steps": 10, "lr": 1.0, "damping": 1e-3,
    },
}


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list
    flavours: tuple
    out: Path
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise net.ConfigurationError(f"unknown experiment kind {self.kind!r}")
        if not self.seeds:
            raise net.ConfigurationError("seeds must be non-empty")
        for s in self.seeds:
            if not isinstance(s, int) or s < 0:
                raise net.ConfigurationError(f"seeds must be non-negative integers, got {s!r}")


@dataclass(frozen=True)
class ResultRow:
    kind: str
    seed: int
    layer: str
    flavour: str
    metric: str
    value: float
    units: str = ""

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric {self.metric!r} not in the result vocabulary")

    def as_list(self):
        return [self.kind, self.seed, self.layer, self.flavour, self.metric, repr(float(self.value)), self.units]


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _flavours(spec):
    if spec == "both":
        return ("expand", "reduce")
    if spec in ("expand", "reduce"):
        return (spec,)
    raise net.ConfigurationError(f"flavour must be expand, reduce or both, got {spec!r}")


def build_config(kind, file_cfg=None, seed=None, out=None, flavour=None):
    """Merge defaults, a parsed config mapping and flag overrides."""
    file_cfg = dict(file_cfg or {})
    if "experiment" in file_cfg and file_cfg["experiment"] != kind:
        raise net.ConfigurationError(
            f"config is for {file_cfg['experiment']!r}, command is {kind!r}")
    unknown = set(file_cfg) - {"experiment", "seeds", "flavour", "out", kind}
    if unknown:
        raise net.ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    seeds = file_cfg.get("seeds", DEFAULTS["seeds"])
    if seed is not None:
        seeds = [seed]
    if isinstance(seeds, int):
        seeds = [seeds]
    params = _merge(DEFAULTS[kind], file_cfg.get(kind))
    return ExperimentConfig(
        kind=kind,
        seeds=list(seeds),
        flavours=_flavours(flavour or file_cfg.get("flavour", DEFAULTS["flavour"])),
        out=Path(out or file_cfg.get("out", DEFAULTS["out"])),
        params=params,
    )


def load_config_file(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as err:
            raise net.ConfigurationError(f"cannot parse {path}: {err}") from err
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise net.ConfigurationError("config file must hold a mapping")
    return data


def _positive_ints(values, what):
    for v in values:
        if not isinstance(v, int) or v < 1:
            raise net.ConfigurationError(f"{what} must be positive integers, got {v!r}")


def exactness_model(params, streams):
    """Deep linear model (optionally with one simplified attention block) and a batch."""
    m, b, lcfg = params["model"], params["batch"], params["loss"]
    if m.get("nonlinearity", "identity") != "identity":
        raise net.ConfigurationError("exactness runs need a linear model; drop the nonlinearity")
    dims = list(m["dims"])
    _positive_ints(dims, "model dims")
    _positive_ints([b["N"], b["R"]], "batch dims")
    if len(dims) < 2:
        raise net.ConfigurationError("model needs at least two dims")
    init = streams("init")
    setting = m.get("setting", "expand")
    if setting not in (net.EXPAND, net.REDUCE):
        raise net.ConfigurationError(f"unknown setting {setting!r}")
    C = dims[-1]
    cov = lcfg.get("covariance", "random")
    if lcfg.get("kind", "gaussian") != "gaussian":
        raise net.ConfigurationError("exactness runs use a Gaussian likelihood")
    if cov == "random":
        cov = tasks.random_spd(streams("loss"), C)
    elif cov == "identity":
        cov = np.eye(C)
    else:
        cov = np.asarray(cov, dtype=np.float64)
    loss = GaussianLoss(cov)
    layers = [net.DenseWS.init(init, dims[i], dims[i + 1], m.get("bias", False)) for i in range(len(dims) - 1)]
    if m["kind"] == "attention":
        d = dims[-1]
        layers.append(net.SimplifiedSelfAttention.init(init, d, d, d))
    elif m["kind"] != "deep_linear":
        raise net.ConfigurationError(f"unknown exactness model kind {m['kind']!r}")
    if setting == net.REDUCE:
        pos = len(layers) if m.get("aggregate_at") is None else int(m["aggregate_at"])
        if m.get("weights") is not None:
            agg = net.WeightedSumAggregate(m["weights"])
        else:
            c = m.get("c", "mean")
            agg = net.ScaledSumAggregate(None if c == "mean" else float(c))
        layers.insert(pos, agg)
    model = net.ModelSpec(layers, loss, setting)
    X = streams("data").standard_normal((b["N"], b["R"], dims[0]))
    return model, net.Batch(X, None, setting)


def _write_grid(path, M):
    np.savetxt(path, M, delimiter=",", fmt="%.17g")


def run_verify_exactness(config):
    rows = []
    p = config.params
    dump_dir = None
    if p.get("dump_matrices"):
        dump_dir = config.out.with_name(config.out.stem + "_matrices")
        dump_dir.mkdir(parents=True, exist_ok=True)
    for seed in config.seeds:
        streams = Streams(seed)
        model, batch = exactness_model(p, streams)
        oracle = curvature.exact_block_ggn(model, batch)
        _, tape = net.forward(model, batch)
        bp = kfac.ggn_backprops(model, tape)
        names = model.unit_names()
        for fl in config.flavours:
            approx = kfac.kron_assemble(kfac.compute_factors(tape, bp, fl))
            for u, (F, G) in enumerate(zip(approx, oracle)):
                rows.append(ResultRow(config.kind, seed, names[u], fl, "rel_frob_error",
                                      rel_frobenius(F, G), "ratio"))
                if dump_dir is not None:
                    stem = f"seed{seed}_unit{u}_{fl}"
                    _write_grid(dump_dir / f"{stem}_oracle.csv", G)
                    _write_grid(dump_dir / f"{stem}_approx.csv", F)
                    _write_grid(dump_dir / f"{stem}_abs_error.csv", np.abs(F - G))
    return rows


def median_micros(fn, warmup=5, repeats=20):
    """Median wall time of ``fn`` in microseconds after discarded warmup calls."""
    if warmup < 5:
        raise net.ConfigurationError("at least 5 warmup repeats are required")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times)) / 1e3


def capture_rows(seed, N, R, P):
    """Layer inputs and one MC backprop per example for a ``P -> P`` layer."""
    streams = Streams(seed)
    model = net.ModelSpec([net.DenseWS.init(streams("init"), P, P)], GaussianLoss(np.eye(P)), net.EXPAND)
    batch = net.Batch(streams("data").standard_normal((N, R, P)), None, net.EXPAND)
    _, tape = net.forward(model, batch)
    g = kfac.mc_backprops(model, tape, 1, streams("mc"))
    return tape.inputs[0], g[0]


def run_time_factors(config):
    p = config.params
    _positive_ints(list(p["R"]) + [p["P"], p["N"], p["repeats"]], "timing dims")
    fns = {"expand": kfac.expand_factors, "reduce": kfac.reduce_factors}
    rows = []
    summary = {}
    for seed in config.seeds:
        for R in p["R"]:
            a, g = capture_rows(seed, p["N"], R, p["P"])
            for fl in config.flavours:
                us = median_micros(lambda: fns[fl](a, g, p["N"]), p["warmup"], p["repeats"])
                rows.append(ResultRow(config.kind, seed, f"R={R}", fl, "wall_micros", us, "us"))
                summary.setdefault(fl, {})[R] = us
    config.params["_summary"] = {
        "ratio_last_first": {fl: t[max(t)] / t[min(t)] for fl, t in summary.items()},
        "captured_rows": {"expand": {R: p["N"] * R for R in p["R"]}, "reduce": {R: p["N"] for R in p["R"]}},
    }
    return rows


TASKS = {
    "deep_linear_regression": tasks.deep_linear_regression,
    "attention_classification": tasks.attention_classification,
    "graph_classification": tasks.graph_classification,
}


def train_task(seed, p):
    if p["task"] not in TASKS:
        raise net.ConfigurationError(f"unknown task {p['task']!r}")
    streams = Streams(seed)
    task = TASKS[p["task"]](streams("data"), streams("init"))
    if p.get("target") is not None:
        task.target = float(p["target"])
    return task


def head_to_head(seed, p, flavours):
    """Grid-tuned gradient descent and K-FAC runs on one task; returns ``{name: TrainResult}``."""
    task = train_task(seed, p)
    steps = int(p["steps"])
    if steps < 0:
        raise net.ConfigurationError("steps must be >= 0")
    base = train.OptimizerConfig(
        damping=float(p["damping"]), curvature=p["curvature"], mc_samples=int(p["mc_samples"]),
        factor_interval=int(p["factor_interval"]), precond_interval=int(p["precond_interval"]),
        ema_decay=float(p["ema_decay"]), total_steps=max(steps, 1))
    results = {}
    runs = [("gd", p["lr_grid_gd"])] + [(fl, p["lr_grid_kfac"]) for fl in flavours]
    for name, grid in runs:
        cfg = replace(base, flavour=name)
        with np.errstate(all="ignore"):
            res = train.tune_lr(task.make_model, task.batch, cfg, grid, steps, task.target,
                                lambda: Streams(seed)("mc"))
        results[name] = res if res is not None else train.TrainResult([], None, True)
    return task, results


def run_train(config):
    p = config.params
    rows = []
    for seed in config.seeds:
        task, results = head_to_head(seed, p, config.flavours)
        for name, res in results.items():
            if res.steps_to_target is None:
                rows.append(ResultRow(config.kind, seed, "all", name, "steps_to_target",
                                      float(p["steps"]), "budget_exhausted"))
            else:
                rows.append(ResultRow(config.kind, seed, "all", name, "steps_to_target",
                                      res.steps_to_target, "steps"))
            if p.get("trace", True):
                for t, value in enumerate(res.losses, start=1):
                    rows.append(ResultRow(config.kind, seed, f"step={t}", name, "loss", value, "nats"))
    return rows


def marglik_run(seed, p, flavour, select=True):
    """Online weight-decay selection on the linear-Gaussian task.

    Returns per-event ``(deltas, log marglik)`` pairs, the final validation
    loss and the closed-form evidence optimum.
    """
    streams = Streams(seed)
    task = tasks.linear_gaussian(streams("data"), p["N"], p["D"], p["noise_std"], p["weight_std"])
    model = task.make_model()
    deltas = np.full(model.n_units, float(p["delta_init"]))
    if np.any(deltas <= 0):
        raise net.ConfigurationError("delta_init must be positive")
    cfg = train.OptimizerConfig(lr=float(p["lr"]), damping=float(p["damping"]), flavour=flavour,
                                curvature="ggn")
    trainer = train.Trainer(model, cfg, streams("mc"), deltas)
    events = []
    for epoch in range(1, int(p["epochs"]) + 1):
        for _ in range(int(p["steps_per_epoch"])):
            trainer.train_step(task.batch)
        if epoch % int(p["every"]) == 0:
            factors = train.laplace_factors(model, task.batch, flavour)
            if select:
                state = train.marglik_select_decay(model, task.batch, factors, trainer.deltas,
                                                   steps=int(p["ascent_steps"]))
                trainer.deltas = state.deltas
                value = state.log_marglik
            else:
                value = train.laplace_log_marglik(model, task.batch, factors, trainer.deltas)
            if not math.isfinite(value):
                raise NumericError("marginal likelihood is not finite")
            events.append((trainer.deltas.copy(), value))
    val = train.mean_loss(model, task.val_batch)
    return events, val, task.optimal_delta()


def run_marglik(config):
    p = config.params
    rows = []
    for seed in config.seeds:
        for fl in config.flavours:
            for select, kind in ((True, config.kind), (False, config.kind + "-control")):
                events, val, opt = marglik_run(seed, p, fl, select)
                for e, (deltas, value) in enumerate(events, start=1):
                    rows.append(ResultRow(kind, seed, "all", fl, "marglik", value, f"nats@event={e}"))
                    for u, d in enumerate(deltas):
                        rows.append(ResultRow(kind, seed, str(u), fl, "delta", d, f"precision@event={e}"))
                rows.append(ResultRow(kind, seed, "validation", fl, "loss", val, "nats"))
            rows.append(ResultRow(config.kind, seed, "closed_form", fl, "delta", opt, "precision"))
    return rows


RUNNERS = {
    "verify-exactness": run_verify_exactness,
    "time-factors": run_time_factors,
    "train": run_train,
    "marglik": run_marglik,
}


def source_digest():
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_results(config, rows):
    config.out.parent.mkdir(parents=True, exist_ok=True)
    with open(config.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_list())
    params = {k: v for k, v in config.params.items() if not k.startswith("_")}
    manifest = {
        "kind": config.kind,
        "seeds": config.seeds,
        "flavours": list(config.flavours),
        "out": str(config.out),
        "config": params,
        "summary": config.params.get("_summary"),
        "version": __version__,
        "source_sha256": source_digest(),
        "numpy": np.__version__,
        "rows": len(rows),
    }
    with open(config.out.with_suffix(config.out.suffix + ".manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def run(config):
    rows = RUNNERS[config.kind](config)
    write_results(config, rows)
    return rows


def make_parser():
    parser = argparse.ArgumentParser(prog="kfac-ws", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int, help="run a single seed (overrides the seeds list)")
        sp.add_argument("--out", help="CSV output path; the manifest goes to <out>.manifest.json")
        sp.add_argument("--flavour", choices=("expand", "reduce", "both"))
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        file_cfg = load_config_file(args.config) if args.config else {}
        config = build_config(args.kind, file_cfg, args.seed, args.out, args.flavour)
        rows = run(config)
    except (net.ConfigurationError, net.CapabilityError, DimensionError, OSError, KeyError, TypeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (NumericError, DefinitenessError, np.linalg.LinAlgError, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3
    print(f"wrote {len(rows)} rows to {config.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
