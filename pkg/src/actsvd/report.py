"""CSV tables and PNG figures for the CLI report paths.

Figures use the Agg backend and strip the PNG ``Software`` tag so that equal
inputs give byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .modes import TruncationReport  # noqa: E402
from .pipeline import RemapRow  # noqa: E402
from .ranks import TrainResult  # noqa: E402

_STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_rank_trajectory(result: TrainResult, path) -> Path:
    """Per-layer ``k`` over epochs (left) and the model ratio / total loss (right)."""
    with plt.rc_context(_STYLE):
        fig, (ax_k, ax_r) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        layers = sorted({row["layer"] for row in result.trajectory}, key=list(result.alloc.ks).index)
        for name in layers:
            rows = [r for r in result.trajectory if r["layer"] == name]
            ax_k.plot([r["epoch"] for r in rows], [r["k"] for r in rows], lw=1.0, label=name)
        ax_k.set_xlabel("epoch")
        ax_k.set_ylabel("truncation position k")
        ax_k.legend(fontsize=7)
        epochs = range(len(result.epoch_ratio))
        ax_r.plot(epochs, result.epoch_ratio, color="k", lw=1.0, label="ratio")
        ax_r.set_xlabel("epoch")
        ax_r.set_ylabel("compression ratio")
        twin = ax_r.twinx()
        twin.plot(epochs, result.epoch_loss, color="tab:red", lw=0.8, alpha=0.7)
        twin.set_ylabel("total loss", color="tab:red")
        fig.tight_layout()
        return _save(fig, path)


def plot_truncation_modes(reports: dict[float, TruncationReport], path) -> Path:
    ratios = sorted(reports)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(ratios, [reports[r].activation_loss for r in ratios], "o-", label="activation truncation")
        ax.plot(ratios, [reports[r].weight_loss for r in ratios], "s--", label="weight SVD truncation")
        ax.axhline(reports[ratios[0]].dense_loss, color="0.5", lw=0.8, label="dense")
        ax.set_xlabel("compression ratio")
        ax.set_ylabel("task loss")
        ax.set_yscale("log")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def plot_remap(rows: list[RemapRow], path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        xs = [r.ratio for r in rows]
        ax.plot(xs, [r.remapped_loss for r in rows], "o-", label="remapped, 8-bit packed")
        ax.plot(xs, [r.traditional_loss for r in rows], "s--", label="two-factor budget")
        ax.set_xlabel("storage ratio")
        ax.set_ylabel("task loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


TRUNC_FIELDS = ("ratio", "dense_loss", "activation_loss", "weight_loss", "ordering")
SWEEP_FIELDS = ("layer", "k", "activation_loss", "weight_loss", "ok")
REMAP_FIELDS = (
    "ratio", "remapped_ratio", "traditional_ratio", "remapped_loss", "traditional_loss", "ok",
)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def write_truncation_csv(path, reports: dict[float, TruncationReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUNC_FIELDS)
        for r in sorted(reports):
            rep = reports[r]
            w.writerow([_fmt(float(r)), _fmt(rep.dense_loss), _fmt(rep.activation_loss), _fmt(rep.weight_loss), rep.ordering])


def write_sweep_csv(path, report: TruncationReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for p in report.sweep:
            w.writerow([p.layer, p.k, _fmt(p.activation_loss), _fmt(p.weight_loss), p.ok])


def write_remap_csv(path, rows: list[RemapRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REMAP_FIELDS)
        for r in rows:
            w.writerow([_fmt(float(r.ratio)), _fmt(r.remapped_ratio), _fmt(r.traditional_ratio), _fmt(r.remapped_loss), _fmt(r.traditional_loss), r.ok])
