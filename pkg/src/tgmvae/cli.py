"""Command-line driver: simulate, train, eval, baseline, mnist, report.

Every command writes under ``--out``: its outputs, the fully resolved
``config.txt`` and a ``manifest.json``. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, connsim, dataio, evalkit, mixmath, model
from .dataio import Checkpoint, PipelineOptions
from .model import ConfigError, ModelConfig, Normalizer, TrainingAborted
from .ndcore import NonFiniteError, ShapeError

log = logging.getLogger("tgmvae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MNIST_DIR_ENV = "TGMVAE_MNIST_DIR"
MNIST_FILES = (
    ("train-images-idx3-ubyte", "train-images.idx3-ubyte", "train-images-idx3-ubyte.gz"),
    ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte", "train-labels-idx1-ubyte.gz"),
)

# MNIST architecture and weights; desk-scale schedule for a few thousand images
MNIST_PRESET = {
    "input_dim": 784,
    "encoder_dims": (384, 64, 4),
    "K": 4,
    "gamma": 0.1,
    "beta": 1.1,
    "lam": 200.0,
    "recon_loss": "bce",
    "recon_weight": 0.6,
    "batch_size": 64,
    "pretrain_epochs": 100,
    "epochs": 100,
}

SYNTHETIC_METHODS = ("tgmvae", "gmvae", "gmm")


class DataError(Exception):
    """Missing or inconsistent input artifacts."""


# -- pipeline pieces (importable) ---------------------------------------------


@dataclass
class SimulatedData:
    transition: np.ndarray  # (n_states, n_states)
    sequence: connsim.StateSequence
    communities: list  # CommunityMatrix per state
    series: np.ndarray  # (T, R)
    windows: np.ndarray  # (T - w + 1, R(R-1)/2)
    window_states: np.ndarray  # majority state per window, 1..n_states

    @property
    def loadings(self) -> np.ndarray:
        return np.array([c.u for c in self.communities])


def simulate(opts: PipelineOptions, seed: int) -> SimulatedData:
    """Draw the transition matrix, state path, communities and signals from consecutive seeds."""
    P = connsim.sample_transition_matrix(opts.n_states, opts.n_major, seed)
    seq = connsim.sample_state_sequence(P, opts.n_timepoints, seed + 1, opts.n_major)
    communities = connsim.make_community_matrices(opts.n_states, opts.n_roi, seed + 2)
    series = connsim.synthesize_signals(seq, communities, opts.noise_std, seed + 3)
    windows = connsim.sliding_window_correlations(series, opts.window, opts.shrinkage)
    states = connsim.ground_truth_window_labels(seq, opts.window)
    return SimulatedData(P, seq, communities, series, windows, states)


def major_matrices(loadings, n_major: int) -> np.ndarray:
    u = np.asarray(loadings, dtype=np.float64)[:n_major]
    return np.einsum("ki,kj->kij", u, u)


def score_windows(pred, window_states, windows, loadings, n_major: int):
    """Frobenius-match predicted clusters to the major communities and score against 6-class truth.

    ``pred`` holds ids ``1..n_major + 1``; the last id is the remainder.
    Returns ``(metrics dict, confusion matrix, matched labels)``.
    """
    pred = np.asarray(pred)
    truth = evalkit.to_remainder_truth(window_states, n_major)
    n_classes = n_major + 1
    means = evalkit.cluster_mean_matrices(windows, pred, n_major)
    matching = evalkit.match_clusters_frobenius(means, major_matrices(loadings, n_major), remainder=n_classes)
    matched = matching.apply(pred)
    metrics = {"accuracy": evalkit.clustering_accuracy(pred, truth, matching)}
    per_state, overall = evalkit.mean_dwell_time(matched)
    metrics["dwell_time"] = overall
    for k in range(1, n_classes + 1):
        metrics[f"dwell_time_{k}"] = per_state.get(k, 0.0)
    for k, v in evalkit.occupancy_rate(matched, states=range(1, n_classes + 1)).items():
        metrics[f"occupancy_{k}"] = v
    metrics["outlier_fraction"] = float(np.mean(pred == n_classes))
    return metrics, evalkit.confusion_matrix(matched, truth, n_classes), matched


def fit_model(data, config: ModelConfig, progress=None):
    """Normalise with training min/max, then train. Returns ``(TrainResult, Normalizer)``."""
    norm = Normalizer.fit(data)
    result = model.train(norm.transform(data), config, progress=progress)
    return result, norm


def method_name(config: ModelConfig) -> str:
    return "tgmvae" if config.gamma > 0 else "gmvae"


def fit_gmm_labels(windows, K: int, seed: int, covariance: str = "spherical", max_iter: int = 200) -> np.ndarray:
    gmm = mixmath.gmm_em_fit(windows, K, seed=seed, max_iter=max_iter, covariance=covariance)
    return np.argmax(mixmath.gmm_predict(gmm, windows), axis=1) + 1


def mnist_scores(pred, truth, n_major: int = 3):
    """Hungarian-match the major clusters (remainder fixed) and compute the three MNIST scores."""
    n_classes = n_major + 1
    matching = evalkit.match_clusters_hungarian_labels(pred, truth, n_classes)
    matched = matching.apply(pred)
    major = truth < n_classes
    return {
        "accuracy_4class": float(np.mean(matched == truth)),
        "accuracy_3class": float(np.mean(matched[major] == truth[major])),
        "remainder_recall": float(np.mean(matched[~major] == n_classes)) if (~major).any() else float("nan"),
        "outlier_fraction": float(np.mean(pred == n_classes)),
    }, matched


def run_mnist(images, labels, config: ModelConfig, opts: PipelineOptions, seed: int):
    """Build the 90/10 mixture, train, score. Returns ``(metrics, digits, cluster mean images, TrainResult)``."""
    digits = list(opts.mnist_digits) if opts.mnist_digits else dataio.choose_digits(seed)
    x, truth = dataio.make_mnist_mixture(images, labels, digits, opts.major_fraction, seed)
    config = replace(config, input_dim=x.shape[1], seed=seed)
    result, norm = fit_model(x, config)
    pred, _ = model.posterior_assign(result.params, config, norm.transform(x))
    metrics, matched = mnist_scores(pred, truth, config.K - 1)
    means = np.array([x[matched == k].mean(axis=0) if np.any(matched == k) else np.full(x.shape[1], np.nan)
                      for k in range(1, config.K + 1)])
    return metrics, digits, means, result


def run_synthetic(seed: int, config: ModelConfig, opts: PipelineOptions, methods=SYNTHETIC_METHODS, data=None):
    """Full synthetic pipeline for one seed; returns ``{method: metrics}``."""
    data = data or simulate(opts, seed)
    out = {}
    for method in methods:
        if method == "gmm":
            pred = fit_gmm_labels(data.windows, opts.n_major, seed, opts.gmm_covariance, opts.gmm_max_iter)
        else:
            cfg = replace(config, input_dim=data.windows.shape[1], seed=seed, K=opts.n_major + 1,
                          gamma=0.0 if method == "gmvae" else config.gamma)
            result, norm = fit_model(data.windows, cfg)
            pred, _ = model.posterior_assign(result.params, cfg, norm.transform(data.windows))
        out[method], _, _ = score_windows(pred, data.window_states, data.windows, data.loadings, opts.n_major)
    return out


def summarize(rows):
    """Mean and sample std per (method, metric) over seeds."""
    groups: dict[tuple[str, str], list[float]] = {}
    for method, _seed, metric, value in rows:
        groups.setdefault((method, metric), []).append(float(value))
    out = []
    for (method, metric), vals in sorted(groups.items()):
        v = np.array(vals)
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append((method, metric, len(v), float(v.mean()), std))
    return out


# -- run bookkeeping -----------------------------------------------------------


class Run:
    """Collects artifacts and timings for one command and writes the manifest."""

    def __init__(self, command, out, config, opts, seeds):
        self.command = command
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.opts = opts
        self.seeds = list(seeds)
        self.artifacts: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.notes: list[str] = []
        self._t0 = time.perf_counter()
        self.add("config", "config.txt")
        dataio.atomic_write_bytes(self.out / "config.txt", dataio.format_config(config, opts).encode("utf-8"))

    def path(self, name: str) -> Path:
        return self.out / name

    def add(self, key: str, name: str) -> Path:
        self.artifacts[key] = name
        return self.path(name)

    def time(self, label: str, start: float):
        self.timings[label] = round(time.perf_counter() - start, 3)

    def finish(self, status: str = "ok"):
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        manifest = {
            "command": self.command,
            "status": status,
            "tool_version": __version__,
            "seeds": self.seeds,
            "config": {**self.config.to_dict(), **vars(self.opts)},
            "artifacts": self.artifacts,
            "timings_s": self.timings,
            "notes": self.notes,
        }
        text = json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n"
        dataio.atomic_write_bytes(self.out / "manifest.json", text.encode("utf-8"))


def write_history(path, history):
    header = ("phase", "epoch") + model.LossBreakdown.FIELDS
    dataio.write_table_csv(path, header, [[row[h] for h in header] for row in history])


def write_confusion(path, confusion):
    n = len(confusion)
    dataio.write_table_csv(path, ["true"] + [f"pred_{k}" for k in range(1, n + 1)],
                           [[k + 1] + [int(v) for v in confusion[k]] for k in range(n)])


def metric_rows(method, seed, metrics):
    return [(method, seed, k, v) for k, v in metrics.items()]


# -- commands -----------------------------------------------------------------


def _resolve(args, defaults=None):
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "gamma", None) is not None:
        overrides["gamma"] = args.gamma
    if getattr(args, "roi", None) is not None:
        overrides["n_roi"] = args.roi
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "pretrain_epochs", None) is not None:
        overrides["pretrain_epochs"] = args.pretrain_epochs
    return dataio.load_config(args.config, overrides=overrides, defaults=defaults)


def _load_dataset(path, need_labels=False):
    if not Path(path).exists():
        raise DataError(f"{path}: no such file")
    x, labels = dataio.read_dataset(path)
    if need_labels and labels is None:
        raise DataError(f"{path}: dataset carries no ground-truth labels")
    return x.astype(np.float64), labels


def _load_loadings(path, n_major):
    u, _ = _load_dataset(path)
    if len(u) < n_major:
        raise DataError(f"{path}: {len(u)} community vectors for {n_major} major states")
    return u


def cmd_simulate(args):
    config, opts = _resolve(args)
    run = Run("simulate", args.out, config, opts, [config.seed])
    t = time.perf_counter()
    data = simulate(opts, config.seed)
    run.time("simulate", t)
    dataio.write_dataset(run.add("signals", "signals.tgmv"), data.series, data.sequence.labels)
    dataio.write_dataset(run.add("windows", "windows.tgmv"), data.windows, data.window_states)
    dataio.write_dataset(run.add("communities", "communities.tgmv"), data.loadings,
                         np.arange(1, opts.n_states + 1))
    n = opts.n_states
    dataio.write_table_csv(run.add("transition", "transition.csv"), ["from"] + [f"to_{j}" for j in range(1, n + 1)],
                           [[i + 1] + [float(v) for v in data.transition[i]] for i in range(n)])
    run.finish()
    print(f"{len(data.windows)} windows of dim {data.windows.shape[1]} -> {run.path('windows.tgmv')}")
    return EXIT_OK


def cmd_train(args):
    x, _ = _load_dataset(args.dataset)
    config, opts = _resolve(args, defaults={"input_dim": x.shape[1]})
    if config.input_dim != x.shape[1]:
        raise ConfigError(f"config input_dim {config.input_dim} but dataset has dim {x.shape[1]}")
    run = Run("train", args.out, config, opts, [config.seed])
    log.info("training %s with encoder dims %s", method_name(config), config.dims)
    t = time.perf_counter()
    history = []
    try:
        result, norm = fit_model(x, config, progress=lambda row, _p: history.append(row))
    except TrainingAborted as exc:
        run.notes.append(f"aborted: {exc}")
        write_history(run.add("history", "history.csv"), history)
        run.finish("aborted")
        raise
    run.time("train", t)
    dataio.save_checkpoint(run.add("checkpoint", "model.ckpt"),
                           Checkpoint(config, result.params, norm, config.seed, result.steps))
    write_history(run.add("history", "history.csv"), result.history)
    run.finish()
    print(f"trained {method_name(config)} dims {config.dims} in {result.steps} steps -> {run.path('model.ckpt')}")
    return EXIT_OK


def _write_scores(run, method, seed, metrics, confusion):
    dataio.write_metrics_csv(run.add("metrics", "metrics.csv"), metric_rows(method, seed, metrics))
    write_confusion(run.add("confusion", "confusion.csv"), confusion)


def cmd_eval(args):
    ckpt = dataio.load_checkpoint(args.checkpoint)
    config = ckpt.config
    _, opts = _resolve(args)
    x, states = _load_dataset(args.dataset, need_labels=args.truth is None)
    if args.truth is not None:
        _, states = _load_dataset(args.truth, need_labels=True)
    if len(states) != len(x):
        raise DataError(f"{len(states)} truth labels for {len(x)} samples")
    if x.shape[1] != config.input_dim:
        raise DataError(f"dataset dim {x.shape[1]} does not match checkpoint input_dim {config.input_dim}")
    n_major = config.K - 1
    loadings = _load_loadings(args.communities, n_major)
    run = Run("eval", args.out, config, replace(opts, n_major=n_major), [ckpt.seed])
    t = time.perf_counter()
    xn = ckpt.normalizer.transform(x) if ckpt.normalizer is not None else x
    pred, _ = model.posterior_assign(ckpt.params, config, xn)
    metrics, confusion, _ = score_windows(pred, states, x, loadings, n_major)
    run.time("eval", t)
    _write_scores(run, method_name(config), ckpt.seed, metrics, confusion)
    run.finish()
    print(f"{method_name(config)} accuracy {metrics['accuracy']:.4f}")
    return EXIT_OK


def cmd_baseline(args):
    config, opts = _resolve(args)
    x, states = _load_dataset(args.dataset, need_labels=args.truth is None)
    if args.truth is not None:
        _, states = _load_dataset(args.truth, need_labels=True)
    K = args.K or opts.n_major
    loadings = _load_loadings(args.communities, K)
    run = Run("baseline", args.out, config, replace(opts, n_major=K), [config.seed])
    t = time.perf_counter()
    pred = fit_gmm_labels(x, K, config.seed, opts.gmm_covariance, opts.gmm_max_iter)
    metrics, confusion, _ = score_windows(pred, states, x, loadings, K)
    run.time("baseline", t)
    _write_scores(run, "gmm", config.seed, metrics, confusion)
    run.finish()
    print(f"gmm accuracy {metrics['accuracy']:.4f}")
    return EXIT_OK


def find_mnist(directory) -> tuple[Path, Path]:
    d = Path(directory)
    found = []
    for names in MNIST_FILES:
        hit = next((d / n for n in names if (d / n).exists()), None)
        if hit is None:
            raise DataError(f"{d}: none of {', '.join(names)} found")
        found.append(hit)
    return found[0], found[1]


def cmd_mnist(args):
    config, opts = _resolve(args, defaults=MNIST_PRESET)
    if args.images and args.labels:
        images_path, labels_path = args.images, args.labels
    else:
        directory = args.mnist_dir or os.environ.get(MNIST_DIR_ENV)
        if not directory:
            raise DataError(f"give --images/--labels, --mnist-dir or set {MNIST_DIR_ENV}")
        images_path, labels_path = find_mnist(directory)
    images, labels = dataio.read_idx(images_path, labels_path)
    seeds = _seed_list(args, config.seed)
    run = Run("mnist", args.out, config, opts, seeds)
    rows, means_all, mean_labels = [], [], []
    for seed in seeds:
        t = time.perf_counter()
        metrics, digits, means, _ = run_mnist(images, labels, config, opts, seed)
        run.time(f"seed_{seed}", t)
        run.notes.append(f"seed {seed}: major digits {digits}")
        for i, d in enumerate(digits, 1):
            metrics[f"digit_{i}"] = d
        rows += metric_rows("tgmvae", seed, metrics)
        means_all.append(means)
        mean_labels += list(range(1, config.K + 1))
        print(f"seed {seed} digits {digits}: " + ", ".join(
            f"{k} {metrics[k]:.4f}" for k in ("accuracy_4class", "accuracy_3class", "remainder_recall")))
    dataio.write_metrics_csv(run.add("metrics", "metrics.csv"), rows)
    dataio.write_dataset(run.add("cluster_means", "cluster_means.tgmv"), np.vstack(means_all), mean_labels)
    if len(seeds) > 1:
        _write_summary(run, rows)
    if args.figures:
        from . import figures
        figures.cluster_means_figure(np.vstack(means_all), run.add("fig_cluster_means", "cluster_means.png"),
                                     seeds=seeds)
    run.finish()
    return EXIT_OK


def _seed_list(args, default):
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    return [default]


def _write_summary(run, rows):
    dataio.write_table_csv(run.add("summary", "summary.csv"), ("method", "metric", "n", "mean", "std"), summarize(rows))


def _report_figures(run, rows):
    from . import figures
    metrics = {r[2] for r in rows}
    for metric in ("accuracy", "accuracy_4class", "accuracy_3class"):
        if metric in metrics:
            figures.accuracy_figure(rows, run.add(f"fig_{metric}", f"{metric}.png"), metric)
    if any(m.startswith("occupancy_") for m in metrics):
        figures.occupancy_figure(rows, run.add("fig_occupancy", "occupancy.png"))


def cmd_report(args):
    config, opts = _resolve(args)
    rows = []
    if args.inputs:
        for path in args.inputs:
            p = Path(path)
            rows += dataio.read_metrics_csv(p / "metrics.csv" if p.is_dir() else p)
        run = Run("report", args.out, config, opts, sorted({r[1] for r in rows}))
    else:
        seeds = _seed_list(args, config.seed)
        methods = [m.strip() for m in args.methods.split(",")]
        bad = [m for m in methods if m not in SYNTHETIC_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {SYNTHETIC_METHODS}")
        run = Run("report", args.out, config, opts, seeds)
        for seed in seeds:
            t = time.perf_counter()
            for method, metrics in run_synthetic(seed, config, opts, methods).items():
                rows += metric_rows(method, seed, metrics)
                print(f"seed {seed} {method} accuracy {metrics['accuracy']:.4f}")
            run.time(f"seed_{seed}", t)
        dataio.write_metrics_csv(run.add("metrics", "metrics.csv"), rows)
    _write_summary(run, rows)
    if args.figures:
        _report_figures(run, rows)
    run.finish()
    for method, metric, n, mean, std in summarize(rows):
        if metric.startswith("accuracy"):
            print(f"{method} {metric}: mean {mean:.4f} std {std:.4f} (n={n})")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tgmvae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seeds=False):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if seeds:
            p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")

    p = sub.add_parser("simulate", help="synthetic connectivity dataset")
    common(p)
    p.add_argument("--roi", type=int, help="number of regions of interest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model on a dataset file")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gamma", type=float, help="remainder prior; 0 trains the plain mixture VAE")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score a checkpoint"), ("baseline", cmd_baseline, "GMM baseline")):
        p = sub.add_parser(name, help=text)
        common(p)
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
        else:
            p.add_argument("--K", type=int, help="mixture components (default: n_major)")
        p.add_argument("--dataset", required=True)
        p.add_argument("--truth", help="dataset file whose labels are the window states (default: --dataset labels)")
        p.add_argument("--communities", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("mnist", help="MNIST mixture experiment")
    common(p, seeds=True)
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--mnist-dir", help=f"directory holding the IDX training files (or set {MNIST_DIR_ENV})")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--figures", action="store_true", help="also render cluster_means.png (needs matplotlib)")
    p.set_defaults(func=cmd_mnist)

    p = sub.add_parser("report", help="multi-seed synthetic run or aggregation of metrics files")
    common(p, seeds=True)
    p.add_argument("--methods", default=",".join(SYNTHETIC_METHODS))
    p.add_argument("--roi", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--figures", action="store_true", help="also render PNG summaries (needs matplotlib)")
    p.add_argument("inputs", nargs="*", help="metrics CSVs or run directories to aggregate")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ImportError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, dataio.DataFormatError, ShapeError, mixmath.MixtureError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
