"""Optional matplotlib renderings of run outputs.

CSV files stay the machine-readable record; these figures are a convenience for
reading a run at a glance. matplotlib is imported lazily so the rest of the
package works without it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise ImportError("figures need matplotlib: pip install 'artifact[figures]'") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    path = Path(path)
    # fixed metadata keeps reruns byte-stable for a given matplotlib version
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    _pyplot().close(fig)
    return path


def _by_method(rows, metric):
    """``{method: [(seed, value), ...]}`` for one metric, seeds sorted."""
    out: dict[str, list[tuple[int, float]]] = {}
    for method, seed, name, value in rows:
        if name == metric:
            out.setdefault(method, []).append((int(seed), float(value)))
    return {m: sorted(v) for m, v in sorted(out.items())}


def accuracy_figure(rows, path, metric="accuracy"):
    """Per-method mean accuracy bars with the individual seeds overlaid."""
    plt = _pyplot()
    data = _by_method(rows, metric)
    if not data:
        raise ValueError(f"no {metric!r} rows to plot")
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(data), 3.2))
    for i, pts in enumerate(data.values()):
        vals = np.array([v for _, v in pts])
        err = vals.std(ddof=1) if len(vals) > 1 else 0.0
        ax.bar(i, vals.mean(), yerr=err, width=0.6, color=f"C{i}", alpha=0.6, capsize=4)
        ax.scatter(np.full(len(vals), i), vals, color="k", s=12, zorder=3)
    ax.set_xticks(range(len(data)), list(data))
    ax.set_ylim(0, 1)
    ax.set_ylabel(metric.replace("_", " "))
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def occupancy_figure(rows, path):
    """Grouped bars of mean occupancy per matched state, one group per method."""
    plt = _pyplot()
    states = sorted({int(name.rsplit("_", 1)[1]) for _, _, name, _ in rows
                     if name.startswith("occupancy_") and name.rsplit("_", 1)[1].isdigit()})
    if not states:
        raise ValueError("no occupancy rows to plot")
    methods = sorted({r[0] for r in rows})
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(states), 3.2))
    for j, method in enumerate(methods):
        means = [np.mean([v for _, v in _by_method(rows, f"occupancy_{k}").get(method, [(0, np.nan)])])
                 for k in states]
        ax.bar(np.arange(len(states)) + (j - (len(methods) - 1) / 2) * width, means, width,
               label=method, color=f"C{j}")
    ax.set_xticks(range(len(states)), [str(k) for k in states])
    ax.set_xlabel("matched state")
    ax.set_ylabel("occupancy")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def cluster_means_figure(means, path, side=28, seeds=None):
    """Grid of cluster-mean images, one row per seed.

    ``means`` has shape (n_seeds * K, side * side) or (n_seeds, K, side * side);
    empty clusters (NaN rows) render blank.
    """
    plt = _pyplot()
    means = np.asarray(means, dtype=float)
    if means.ndim == 2:
        n = 1 if seeds is None else len(seeds)
        means = means.reshape(n, -1, means.shape[1])
    n_rows, k, dim = means.shape
    if dim != side * side:
        raise ValueError(f"rows of length {dim} are not {side}x{side} images")
    fig, axes = plt.subplots(n_rows, k, figsize=(1.3 * k, 1.4 * n_rows), squeeze=False)
    for r in range(n_rows):
        for c in range(k):
            ax = axes[r, c]
            img = means[r, c].reshape(side, side)
            if np.all(np.isfinite(img)):
                ax.imshow(img, cmap="gray_r", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title("remainder" if c == k - 1 else f"cluster {c + 1}", fontsize=8)
            if c == 0 and seeds is not None:
                ax.set_ylabel(f"seed {seeds[r]}", fontsize=8)
    return _save(fig, path)
