"""Command-line entry point for reproducible experiment runs.

Subcommands: generate | train | evaluate | check-ident | report | sweep.
Global flags: --config PATH, --seed INT, --out DIR, --threads INT (env
MCD_THREADS as fallback). Every run writes its fully-resolved configuration
beside its outputs, and re-running from that file reproduces the outputs
exactly.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import datagen as dg
from . import identifiability as ident
from . import metrics as mt
from . import mixture as mx
from .datagen import TimeSeriesDataset
from .graphs import GraphError
from .metrics import MetricError
from .models import ModelError
from .splines import SplineError


class UsageError(ValueError):
    """Bad command line or configuration."""


class DataError(ValueError):
    """Broken or incompatible data on disk."""


DATA_ERRORS = (dg.DatagenError, ModelError, MetricError, GraphError,
               SplineError, FileNotFoundError, DataError)


# ---------------------------------------------------------------------------
# key=value configuration documents


def parse_config_text(text: str) -> dict:
    """Parse a key=value document: one pair per line, '#' comments, values
    auto-typed (int/float/bool/list/string)."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, "
                             f"got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise UsageError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value.strip())
    return out


def _parse_value(text: str):
    if "," in text:
        return [_parse_value(part.strip()) for part in text.split(",")]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file {args.config!r} does not exist")
        with open(args.config) as fh:
            cfg = parse_config_text(fh.read())
    for key in ("seed", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "extra", None):
        for item in args.extra:
            cfg.update(parse_config_text(item))
    return cfg


def _take(cfg: dict, key: str, default=None, required: bool = False,
          message: str | None = None):
    if key in cfg:
        return cfg.pop(key)
    if required:
        raise UsageError(message or f"missing required config key {key!r}")
    return default


def _reject_unknown(cfg: dict, command: str) -> None:
    if cfg:
        keys = ", ".join(sorted(cfg))
        raise UsageError(f"unknown config keys for {command}: {keys}")


def _write_resolved(out_dir: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w") as fh:
        fh.write(format_config(resolved))


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    out = _take(cfg, "out", required=True,
                message="generate needs an output directory (--out)")
    seed = int(_take(cfg, "seed", 0) or 0)
    kind = _take(cfg, "kind", required=True,
                 message="generate needs kind=linear|nonlinear|toy")
    rng = np.random.default_rng(seed)
    resolved = {"kind": kind, "seed": seed, "out": out}
    if kind == "toy":
        n = int(_take(cfg, "n", 400))
        t = int(_take(cfg, "t", 50))
        noise_std = float(_take(cfg, "noise_std", 1.0))
        _reject_unknown(cfg, "generate")
        ds = dg.toy_example(n, t, rng, noise_std=noise_std, seed=seed)
        resolved.update(n=n, t=t, noise_std=noise_std)
    elif kind in ("linear", "nonlinear"):
        d = int(_take(cfg, "d", required=True))
        k_star = int(_take(cfg, "k_star", required=True))
        n = int(_take(cfg, "n", required=True))
        t = int(_take(cfg, "t", required=True))
        lag = int(_take(cfg, "lag", required=True))
        family = _take(cfg, "graphs", "er")
        edge_prob = _take(cfg, "edge_prob", None)
        flip_prob = _take(cfg, "flip_prob", None)
        if family == "er":
            pool = dg.gen_er_graphs(k_star, d, lag, edge_prob=edge_prob,
                                    rng=rng)
        elif family == "perturbed":
            if flip_prob is None:
                raise UsageError("perturbed graphs need flip_prob")
            base = dg.gen_er_graphs(1, d, lag, edge_prob=edge_prob,
                                    rng=rng)[0]
            pool = dg.gen_perturbed_graphs(base, k_star, float(flip_prob),
                                           rng=rng)
        else:
            raise UsageError(f"unknown graph family {family!r}")
        resolved.update(d=d, k_star=k_star, n=n, t=t, lag=lag,
                        graphs=family)
        if edge_prob is not None:
            resolved["edge_prob"] = edge_prob
        if flip_prob is not None:
            resolved["flip_prob"] = flip_prob
        if kind == "linear":
            noise_std = float(_take(cfg, "noise_std", 0.5))
            _reject_unknown(cfg, "generate")
            ds = dg.simulate_linear(pool, n, t, lag, rng,
                                    noise_std=noise_std, seed=seed)
            resolved["noise_std"] = noise_std
        else:
            spline_init = _take(cfg, "spline_init", "random")
            _reject_unknown(cfg, "generate")
            ds = dg.simulate_nonlinear(
                pool, n, t, lag, rng,
                spline_init=dg.SplineInit(kind=spline_init), seed=seed)
            resolved["spline_init"] = spline_init
    else:
        raise UsageError(f"unknown dataset kind {kind!r}")
    ds.save(out)
    _write_resolved(out, resolved)
    manifest = {"kind": kind, "seed": seed, "n": ds.n, "t": ds.t, "d": ds.d,
                "lag": ds.lag, "k_star": ds.k_star}
    if ds.graphs is not None and len(ds.graphs) >= 2:
        stats = mt.pairwise_shd_stats(ds.graphs)
        manifest["pairwise_shd"] = {
            "mean": stats.mean, "std": stats.std,
            "min": stats.min, "max": stats.max}
    with open(os.path.join(out, "provenance.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote dataset ({ds.n}x{ds.t}x{ds.d}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# train


_TRAIN_KEYS = {f.name for f in dataclasses.fields(mx.TrainConfig)}


def _train_config_from(cfg: dict, dataset: TimeSeriesDataset
                       ) -> tuple[mx.TrainConfig, bool]:
    preset = _take(cfg, "preset", None)
    overrides = {}
    if preset == "synthetic":
        if dataset.k_star is None:
            raise UsageError("preset=synthetic needs a dataset with a "
                             "ground-truth graph pool (to set K = 2 K*)")
        overrides.update(k=2 * dataset.k_star, batch_size=128,
                         matrix_lr=1e-2, likelihood_lr=1e-3,
                         sparsity_lambda=5.0, spline_kind="quadratic")
    elif preset is not None:
        raise UsageError(f"unknown preset {preset!r}")
    single = bool(_take(cfg, "single_scm", False))
    for key in list(cfg):
        if key in _TRAIN_KEYS:
            overrides[key] = cfg.pop(key)
    if "lag" not in overrides:
        overrides["lag"] = dataset.lag
    if "k" not in overrides:
        raise UsageError(
            "k is a required hyperparameter: the number of mixture "
            "components must be chosen (e.g. k = 2 K*); pass k=... or "
            "preset=synthetic")
    try:
        config = mx.TrainConfig(**overrides)
    except (mx.ConfigError, TypeError) as exc:
        raise UsageError(f"invalid training configuration: {exc}") from exc
    return config, single


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _take(cfg, "out", required=True,
                message="train needs an output directory (--out)")
    dataset_dir = _take(cfg, "dataset", required=True,
                        message="train needs dataset=<directory>")
    if "seed" in cfg:
        cfg["seed"] = int(cfg["seed"])
    dataset = TimeSeriesDataset.load(dataset_dir)
    config, single = _train_config_from(cfg, dataset)
    _reject_unknown(cfg, "train")
    resolved = dataclasses.asdict(config)
    resolved.update(dataset=dataset_dir, out=out, single_scm=single)
    _write_resolved(out, resolved)
    trainer = mx.train_single_scm if single else mx.train
    state = trainer(dataset, config, out_dir=out)
    if not state.dag_converged:
        print("warning: DAG tolerance not reached; inspect history.csv",
              file=sys.stderr)
    print(f"run complete: best validation ELBO {state.best_val_elbo:.3f}; "
          f"outputs in {out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _load_run(run_dir: str) -> mx.TrainedState:
    ckpt = os.path.join(run_dir, "checkpoint_best")
    if not os.path.isdir(ckpt):
        raise DataError(f"{run_dir!r} has no checkpoint_best directory")
    return mx.TrainedState.load(ckpt)


def _check_compat(state: mx.TrainedState, dataset: TimeSeriesDataset):
    d = state.graph_post.dims
    if dataset.d != d:
        raise DataError(f"dataset has D={dataset.d} variables, run was "
                        f"trained with D={d}")
    if dataset.lag != state.config.lag:
        raise DataError(f"dataset lag {dataset.lag} != run lag "
                        f"{state.config.lag}")


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    run_dir = _take(cfg, "run", required=True,
                    message="evaluate needs run=<run directory>")
    dataset_dir = _take(cfg, "dataset", required=True,
                        message="evaluate needs dataset=<directory>")
    out = _take(cfg, "out", None) or run_dir
    threshold = float(_take(cfg, "threshold", 0.5))
    _take(cfg, "seed", None)
    _reject_unknown(cfg, "evaluate")
    state = _load_run(run_dir)
    dataset = TimeSeriesDataset.load(dataset_dir)
    _check_compat(state, dataset)
    os.makedirs(out, exist_ok=True)
    if dataset.graphs is None or dataset.labels is None:
        doc = mt.unsupervised_report(state, dataset)
        doc["best_val_elbo"] = state.best_val_elbo
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        print("dataset has no ground truth; wrote unsupervised report")
        return 0
    report = mt.evaluate_run(state, dataset, threshold=threshold)
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(mt.EvalReport.CSV_FIELDS)
        writer.writerow(report.csv_row())
    print(f"f1={report.f1:.4f} auroc={report.auroc:.4f} "
          f"cluster_acc={report.cluster_acc:.4f} "
          f"effective_components={report.effective_components}")
    return 0


# ---------------------------------------------------------------------------
# identifiability check


def cmd_check_ident(args) -> int:
    cfg = _load_config(args)
    run_dir = _take(cfg, "run", required=True,
                    message="check-ident needs run=<run directory>")
    dataset_dir = _take(cfg, "dataset", required=True,
                        message="check-ident needs dataset=<directory>")
    out = _take(cfg, "out", None) or run_dir
    tol = float(_take(cfg, "tol", 1e-6))
    _take(cfg, "seed", None)
    _reject_unknown(cfg, "check-ident")
    state = _load_run(run_dir)
    dataset = TimeSeriesDataset.load(dataset_dir)
    _check_compat(state, dataset)
    witness = ident.find_witnesses(state, dataset)
    colliding: list = []
    svar_identifiable = None
    if state.config.variant == "linear":
        comps = ident.svar_components_from_state(state)
        svar = ident.check_svar_condition(comps, tol=tol)
        colliding = [list(p) for p in svar.colliding_pairs]
        svar_identifiable = svar.identifiable
    verdict = {
        "identifiable": bool(witness.satisfied
                             and svar_identifiable is not False),
        "margins": [float(m) for m in witness.log_margins],
        "colliding_pairs": colliding,
        "condition_star": bool(witness.satisfied),
        "svar_condition": svar_identifiable,
        "reasons": witness.reasons,
    }
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "identifiability.json"), "w") as fh:
        json.dump(verdict, fh, indent=2, sort_keys=True)
    print(json.dumps(verdict, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# report plots


def cmd_report(args) -> int:
    cfg = _load_config(args)
    run_dir = _take(cfg, "run", required=True,
                    message="report needs run=<run directory>")
    out = _take(cfg, "out", None) or run_dir
    _take(cfg, "seed", None)
    _reject_unknown(cfg, "report")
    history_path = os.path.join(run_dir, "history.csv")
    if not os.path.exists(history_path):
        raise DataError(f"{run_dir!r} has no history.csv")
    state = _load_run(run_dir)
    history = mx.load_history_csv(history_path)
    os.makedirs(out, exist_ok=True)
    paths = _render_plots(state, history, out)
    print("wrote " + ", ".join(paths))
    return 0


def _render_plots(state: mx.TrainedState, history: list[dict],
                  out: str) -> list[str]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    train_rows = [r for r in history if r["phase"] == "train"]
    val_rows = [r for r in history if r["phase"] == "val"]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot([r["step"] for r in train_rows],
                 [r["elbo"] for r in train_rows], lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("batch ELBO")
    axes[0].set_title("training objective")
    if val_rows:
        axes[1].semilogy(
            [r["step"] for r in val_rows],
            [max(r["max_h_probs"], 1e-16) for r in val_rows], marker="o")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("max h (edge probabilities)")
    axes[1].set_title("acyclicity constraint")
    fig.tight_layout()
    curve_path = os.path.join(out, "training_curves.svg")
    fig.savefig(curve_path)
    plt.close(fig)
    paths.append(curve_path)

    probs = state.edge_probs()
    k, lp1 = probs.shape[0], probs.shape[1]
    occupancy = np.bincount(state.labels(), minlength=k)
    fig, axes = plt.subplots(k, lp1, figsize=(3 * lp1, 2.6 * k),
                             squeeze=False)
    for comp in range(k):
        for tau in range(lp1):
            ax = axes[comp][tau]
            ax.imshow(probs[comp, tau], vmin=0, vmax=1, cmap="viridis")
            label = "instantaneous" if tau == 0 else f"lag {tau}"
            ax.set_title(f"component {comp} ({occupancy[comp]} samples), "
                         f"{label}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    heat_path = os.path.join(out, "edge_probabilities.svg")
    fig.savefig(heat_path)
    plt.close(fig)
    paths.append(heat_path)

    if state.membership is not None:
        resp = state.membership.probabilities()
        fig, ax = plt.subplots(figsize=(8, 2.5))
        ax.imshow(resp.T, aspect="auto", vmin=0, vmax=1, cmap="magma",
                  interpolation="nearest")
        ax.set_xlabel("sample")
        ax.set_ylabel("component")
        ax.set_title("membership responsibilities")
        fig.tight_layout()
        strip_path = os.path.join(out, "membership.svg")
        fig.savefig(strip_path)
        plt.close(fig)
        paths.append(strip_path)
    return paths


# ---------------------------------------------------------------------------
# sweep


def _sweep_worker(payload: tuple) -> dict:
    dataset_dir, cfg_items, single, seed, out_dir = payload
    dataset = TimeSeriesDataset.load(dataset_dir)
    config = mx.TrainConfig(**dict(cfg_items, seed=seed))
    trainer = mx.train_single_scm if single else mx.train
    state = trainer(dataset, config, out_dir=out_dir)
    row = {"seed": seed, "best_val_elbo": state.best_val_elbo,
           "dag_converged": state.dag_converged}
    if dataset.graphs is not None and dataset.labels is not None:
        report = mt.evaluate_run(state, dataset)
        for field in mt.EvalReport.CSV_FIELDS:
            row[field] = getattr(report, field)
    return row


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _take(cfg, "out", required=True,
                message="sweep needs an output directory (--out)")
    dataset_dir = _take(cfg, "dataset", required=True,
                        message="sweep needs dataset=<directory>")
    seeds = _take(cfg, "seeds", None)
    if seeds is None:
        n_seeds = int(_take(cfg, "n_seeds", 5))
        base = int(_take(cfg, "seed", 0) or 0)
        seeds = list(range(base, base + n_seeds))
    elif isinstance(seeds, (int, float)):
        seeds = [int(seeds)]
    else:
        seeds = [int(s) for s in seeds]
    dataset = TimeSeriesDataset.load(dataset_dir)
    config, single = _train_config_from(cfg, dataset)
    _reject_unknown(cfg, "sweep")
    resolved = dataclasses.asdict(config)
    resolved.update(dataset=dataset_dir, out=out, seeds=seeds,
                    single_scm=single)
    del resolved["seed"]
    _write_resolved(out, resolved)
    cfg_items = tuple(sorted(
        (k, v) for k, v in dataclasses.asdict(config).items()
        if k != "seed"))
    payloads = [(dataset_dir, cfg_items, single, seed,
                 os.path.join(out, f"seed_{seed:04d}")) for seed in seeds]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            rows = list(pool.map(_sweep_worker, payloads))
    else:
        rows = [_sweep_worker(p) for p in payloads]
    fields = ["seed", "best_val_elbo", "dag_converged"]
    fields += [f for f in mt.EvalReport.CSV_FIELDS if f in rows[0]]
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
        numeric = [f for f in fields
                   if f not in ("seed", "dag_converged")]
        mean_row = {"seed": "mean"}
        std_row = {"seed": "std"}
        for f in numeric:
            vals = np.array([float(r[f]) for r in rows])
            mean_row[f] = vals.mean()
            std_row[f] = vals.std()
        writer.writerow(mean_row)
        writer.writerow(std_row)
    print(f"sweep over seeds {seeds} complete; wrote "
          f"{os.path.join(out, 'sweep.csv')}")
    return 0


# ---------------------------------------------------------------------------
# dispatch


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": "synthesize a mixture-of-SCM dataset directory",
        "train": "fit the mixture on a dataset directory",
        "evaluate": "score a trained run against ground truth",
        "check-ident": "run the identifiability checkers on a trained run",
        "report": "render training-curve / heatmap / membership plots",
        "sweep": "train and evaluate across several seeds",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("MCD_THREADS", "1")))
        p.add_argument("extra", nargs="*",
                       help="inline key=value overrides")
    return parser


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "check-ident": cmd_check_ident,
    "report": cmd_report,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return HANDLERS[args.command](args)
    except (UsageError, mx.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except mx.NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
