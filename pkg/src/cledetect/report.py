"""Figure and artifact rendering for statistics, metrics, and activation maps.

Everything here draws through matplotlib's object API onto files; no
interactive backend is touched, so the functions are safe in headless
batch jobs.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import image as mpl_image
from matplotlib.figure import Figure

from .errors import ConfigError
from .harness import PatientReport
from .frame import LABEL_CARCINOMA, CLASS_INDEX


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    return path


def plot_median_histogram(hists: dict, path) -> Path:
    """Per-site distributions of frame medians on a log intensity axis.

    ``hists`` maps site name to a histogram with normalized ``counts`` over
    shared ``edges`` (see ``median_histogram``).
    """
    if not hists:
        raise ConfigError("no site histograms to plot")
    fig = Figure(figsize=(6.0, 3.6))
    ax = fig.add_subplot(111)
    for site in sorted(hists):
        h = hists[site]
        ax.stairs(h.counts, h.edges, label=f"{site} (n={h.n_frames})", fill=False)
    ax.set_xscale("log")
    ax.set_xlabel("median raw value")
    ax.set_ylabel("fraction of frames")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_per_patient_accuracy(report: PatientReport, path) -> Path:
    fig = Figure(figsize=(max(4.0, 0.6 * len(report.rows) + 2.0), 3.2))
    ax = fig.add_subplot(111)
    ids = [r[0] for r in report.rows]
    acc = [r[3] for r in report.rows]
    ax.bar(range(len(ids)), acc, color="#4878a8")
    ax.set_xticks(range(len(ids)), ids, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy")
    for i, a in enumerate(acc):
        ax.text(i, a + 0.01, f"{a:.2f}", ha="center", fontsize=7)
    return _save(fig, path)


def plot_probability_histograms(report: PatientReport, path) -> Path:
    """Carcinoma-probability histograms split by true class."""
    fig = Figure(figsize=(6.0, 3.2))
    ax = fig.add_subplot(111)
    centers = 0.5 * (report.hist_edges[:-1] + report.hist_edges[1:])
    width = report.hist_edges[1] - report.hist_edges[0]
    ax.bar(centers, report.hist_normal, width=width, alpha=0.6, label="normal frames")
    ax.bar(centers, report.hist_carcinoma, width=width, alpha=0.6, label="carcinoma frames")
    ax.set_xlabel("predicted carcinoma probability")
    ax.set_ylabel("frames")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_roc(fpr, tpr, auc_value: float, path) -> Path:
    fig = Figure(figsize=(4.0, 4.0))
    ax = fig.add_subplot(111)
    ax.plot(fpr, tpr, drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"AUC = {auc_value:.4f}", fontsize=10)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    return _save(fig, path)


def render_run_figures(run_dir, rv, metrics, threshold: float = 0.5) -> list:
    """Standard figure set for a persisted experiment run."""
    from .harness import per_patient_report, roc_curve

    fig_dir = Path(run_dir) / "figures"
    rep = per_patient_report(rv, threshold)
    fpr, tpr, _ = roc_curve(rv.scores(), rv.labels01())
    return [
        plot_per_patient_accuracy(rep, fig_dir / "per_patient_accuracy.png"),
        plot_probability_histograms(rep, fig_dir / "probability_histograms.png"),
        plot_roc(fpr, tpr, metrics.roc_auc, fig_dir / "roc.png"),
    ]


# ---------------------------------------------------------------------------
# class activation maps


def upsample_nearest(grid: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Nearest-neighbor upsampling that keeps cell boundaries crisp."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ConfigError(f"expected a 2-D grid, got shape {grid.shape}")
    rows = (np.arange(out_height) * grid.shape[0]) // out_height
    cols = (np.arange(out_width) * grid.shape[1]) // out_width
    return grid[rows][:, cols]


def cam_heatmap(cam, out_size: int) -> np.ndarray:
    """8-bit single-channel heatmap of the carcinoma activation grid.

    Scores are normalized to [0, 255] over the masked-in cells only, so the
    scale is per-map; cells outside the field of view render black. A
    constant map renders mid-gray.
    """
    scores = np.asarray(cam.scores[:, :, CLASS_INDEX[LABEL_CARCINOMA]], dtype=np.float64)
    mask = np.asarray(cam.mask) != 0
    inside = scores[mask]
    lo, hi = float(inside.min()), float(inside.max())
    if hi - lo < 1e-12:
        norm = np.full_like(scores, 0.5)
    else:
        norm = (scores - lo) / (hi - lo)
    norm = np.where(mask, norm, 0.0)
    up = upsample_nearest(norm, out_size, out_size)
    return np.clip(np.rint(up * 255.0), 0, 255).astype(np.uint8)


def save_cam_tsv(path, cam) -> Path:
    """Raw carcinoma-class scores as a tab-separated S x S grid; cells
    outside the field of view are written as ``nan``."""
    scores = cam.scores[:, :, CLASS_INDEX[LABEL_CARCINOMA]].astype(np.float64)
    mask = np.asarray(cam.mask) != 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for j in range(scores.shape[0]):
        lines.append("\t".join(
            repr(float(scores[j, i])) if mask[j, i] else "nan"
            for i in range(scores.shape[1])
        ))
    path.write_text("\n".join(lines) + "\n")
    return path


def render_cam(prepared, cam, out_prefix) -> dict:
    """Write the activation-map artifact set for one prepared frame.

    Produces ``<prefix>.tsv`` (raw score grid), ``<prefix>_heatmap.png``
    and ``<prefix>_overlay.png`` (heatmap at 0.5 alpha over the input).
    Returns the path set.
    """
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    x = np.asarray(prepared.x)[:, :, 0].astype(np.float64)
    heat = cam_heatmap(cam, x.shape[0])
    span = float(x.max() - x.min())
    gray = (x - x.min()) / span if span > 0 else np.zeros_like(x)
    overlay = np.clip(0.5 * gray + 0.5 * (heat.astype(np.float64) / 255.0), 0.0, 1.0)
    paths = {
        "tsv": save_cam_tsv(out_prefix.with_suffix(".tsv"), cam),
        "heatmap": out_prefix.parent / (out_prefix.name + "_heatmap.png"),
        "overlay": out_prefix.parent / (out_prefix.name + "_overlay.png"),
    }
    mpl_image.imsave(paths["heatmap"], heat, cmap="magma", vmin=0, vmax=255)
    mpl_image.imsave(paths["overlay"], overlay, cmap="gray", vmin=0.0, vmax=1.0)
    return paths
