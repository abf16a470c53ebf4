"""Figure rendering for search, evaluation, and registration outputs.

Figures are derived from the CSV/JSON files already on disk, never from
live state, so a report can be re-rendered from any output directory.
PNG files sit alongside the delimited output; determinism guarantees
cover the delimited files, not the images.
"""

import csv
import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

log = logging.getLogger("autoreg.report")


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _column(rows, idx, cast=float):
    out = []
    for row in rows:
        cell = row[idx]
        out.append(cast(cell) if cell != "" else None)
    return out


def _phase_spans(phases):
    spans = []
    start = 0
    for i in range(1, len(phases) + 1):
        if i == len(phases) or phases[i] != phases[start]:
            spans.append((phases[start], start, i))
            start = i
    return spans


def _mark_phases(ax, phases, epochs):
    for _, start, _ in _phase_spans(phases)[1:]:
        ax.axvline(epochs[start] - 0.5, color="0.8", lw=0.8, zorder=0)


def render_search_figures(out_dir):
    """alpha heatmaps, lambda trace, and loss curves for a search report."""
    arch_path = os.path.join(out_dir, "derived_arch.json")
    with open(arch_path, encoding="utf-8") as fh:
        arch = json.load(fh)
    names = arch["catalog"]
    fig, axes = plt.subplots(1, 2, figsize=(10, 0.5 * len(names) + 2))
    for ax, key, title in zip(axes, ("F", "D"),
                              ("feature cells", "deformation cells")):
        mat = np.array(arch["alpha_softmax"][key]["weights"])
        im = ax.imshow(mat, aspect="auto", cmap="viridis", vmin=0.0)
        for col, row in enumerate(arch["alpha_softmax"][key]["argmax_per_edge"]):
            ax.plot(col, row, "r*", markersize=8)
        ax.set_yticks(range(len(names)), names, fontsize=7)
        ax.set_xticks(range(mat.shape[1]),
                      ["%s/e%d" % (s, e) for s in ("s1", "s2")
                       for e in range(mat.shape[1] // 2)], fontsize=7)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "alpha_heatmap.png"), dpi=120)
    plt.close(fig)

    header, rows = _read_csv(os.path.join(out_dir, "lambda_trace.csv"))
    if rows:
        phases = [r[0] for r in rows]
        epochs = _column(rows, 1, int)
        fig, ax = plt.subplots(figsize=(8, 4))
        for i, label in enumerate(header[2:6]):
            ax.plot(epochs, _column(rows, 2 + i), label=label)
        _mark_phases(ax, phases, epochs)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss weight")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "lambda_trace.png"), dpi=120)
        plt.close(fig)

    header, rows = _read_csv(os.path.join(out_dir, "loss_curves.csv"))
    if rows:
        phases = [r[0] for r in rows]
        epochs = _column(rows, 1, int)
        fig, ax = plt.subplots(figsize=(8, 4))
        for i, label in enumerate(header[2:]):
            ys = _column(rows, 2 + i)
            xs = [x for x, y in zip(epochs, ys) if y is not None]
            ys = [y for y in ys if y is not None]
            if ys:
                ax.plot(xs, ys, label=label)
        _mark_phases(ax, phases, epochs)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "loss_curves.png"), dpi=120)
        plt.close(fig)
    log.info("search figures rendered to %s", out_dir)


def render_train_figures(out_dir):
    path = os.path.join(out_dir, "loss_curves.csv")
    if not os.path.exists(path):
        return
    _, rows = _read_csv(path)
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(_column(rows, 0, int), _column(rows, 1))
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "loss_curves.png"), dpi=120)
    plt.close(fig)


def render_eval_figures(out_dir, baseline_name="baseline_table.csv"):
    """Per-pair Dice/NCC bars, with the pre-registration baseline when
    its table sits next to the eval table."""
    header, rows = _read_csv(os.path.join(out_dir, "eval_table.csv"))
    rows = [r for r in rows if r[0] != "aggregate"]
    base = None
    base_path = os.path.join(out_dir, baseline_name)
    if os.path.exists(base_path):
        _, brows = _read_csv(base_path)
        base = {r[0]: r for r in brows if r[0] != "aggregate"}
    ids = [r[0] for r in rows]
    x = np.arange(len(ids))
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 0.4 * len(ids)), 6),
                             sharex=True)
    for ax, col, label in zip(axes, (1, 2), ("dice", "ncc")):
        vals = [float(r[col]) if r[col] != "NA" else np.nan for r in rows]
        ax.bar(x, vals, width=0.6, label="registered")
        if base is not None:
            bvals = [float(base[i][col]) if i in base and base[i][col] != "NA"
                     else np.nan for i in ids]
            ax.plot(x, bvals, "k_", markersize=10, label="pre-registration")
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    axes[1].set_xticks(x, ids, rotation=90, fontsize=7)
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "eval_metrics.png"), dpi=120)
    plt.close(fig)


def _mid_slice(volume):
    arr = np.asarray(volume)
    if arr.ndim == 2:
        return arr
    return arr[arr.shape[0] // 2]


def render_register_figures(out_dir, source, target, warped, err_before,
                            err_after):
    """Source/target/warped row plus before/after intensity-error panels."""
    imgs = [("source", source), ("target", target), ("warped", warped)]
    errs = [("intensity error before", err_before),
            ("intensity error after", err_after)]
    vmax = max(float(np.max(np.abs(e))) for _, e in errs) or 1.0
    fig, axes = plt.subplots(2, 3, figsize=(11, 7))
    for ax, (title, img) in zip(axes[0], imgs):
        ax.imshow(_mid_slice(img), cmap="gray")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    for ax, (title, err) in zip(axes[1], errs):
        im = ax.imshow(_mid_slice(err), cmap="magma", vmin=0.0, vmax=vmax)
        ax.set_title(title, fontsize=9)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    axes[1][2].axis("off")
    fig.tight_layout()
    fig.savefig(os.path.join(out_dir, "register_panels.png"), dpi=120)
    plt.close(fig)
