"""SVG figures rendered from harness CSV files.

Every figure is a function of the CSV text only, drawn on a fixed 800x500 canvas
with matplotlib's SVG backend.  Hash salt and ids are pinned and the date stamp is
dropped, so rendering the same CSV twice gives the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import read_csv  # noqa: E402

# the SVG backend works in points (72 per inch), so this gives an 800 x 500 viewBox
WIDTH_PX, HEIGHT_PX, DPI = 800, 500, 72
_STYLE = {"svg.hashsalt": "sharpminima", "svg.id": "sharpminima", "svg.fonttype": "path"}


def _floats(rows: List[Dict[str, str]], key: str) -> List[float]:
    return [float(r[key]) for r in rows]


def _figure():
    fig, ax = plt.subplots(figsize=(WIDTH_PX / DPI, HEIGHT_PX / DPI), dpi=DPI)
    return fig, ax, ax.twinx()


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def slice_figure(csv_path, svg_path, kind: str = "linear") -> Path:
    """Loss (left axis, log scale) and accuracy (right axis) against alpha."""
    _, _, rows = read_csv(csv_path)
    rows = [r for r in rows if r["kind"] == kind]
    with plt.rc_context(_STYLE):
        fig, left, right = _figure()
        a = _floats(rows, "alpha")
        left.semilogy(a, _floats(rows, "train_loss"), "b-", label="train loss")
        left.semilogy(a, _floats(rows, "test_loss"), "b--", label="test loss")
        right.plot(a, _floats(rows, "train_acc"), "r-", label="train accuracy")
        right.plot(a, _floats(rows, "test_acc"), "r--", label="test accuracy")
        left.set_xlabel("alpha")
        left.set_ylabel("cross entropy", color="b")
        right.set_ylabel("accuracy", color="r")
        left.set_title(f"{kind} slice")
        _legend(left, right)
        return _save(fig, svg_path)


def sweep_figure(csv_path, svg_path) -> Path:
    """Test accuracy (left) and sharpness (right) against batch size."""
    _, header, rows = read_csv(csv_path)
    with plt.rc_context(_STYLE):
        fig, left, right = _figure()
        b = _floats(rows, "batch_size")
        left.plot(b, _floats(rows, "test_acc"), "b-o", label="test accuracy")
        for col in header:
            if col.startswith("phi_"):
                right.plot(b, _floats(rows, col), "-s", label=f"sharpness eps={col[4:]}")
        left.set_xscale("log")
        left.set_xlabel("batch size")
        left.set_ylabel("test accuracy", color="b")
        right.set_ylabel("sharpness")
        _legend(left, right)
        return _save(fig, svg_path)


def piggyback_figure(csv_path, svg_path) -> Path:
    """Mean over trials of warm-started LB test accuracy (left) and sharpness (right)."""
    _, _, rows = read_csv(csv_path)
    by_epoch: Dict[int, List[Dict[str, str]]] = {}
    for r in rows:
        by_epoch.setdefault(int(r["warm_epochs"]), []).append(r)
    epochs = sorted(by_epoch)

    def mean(key):
        return [sum(_floats(by_epoch[e], key)) / len(by_epoch[e]) for e in epochs]

    with plt.rc_context(_STYLE):
        fig, left, right = _figure()
        left.plot(epochs, mean("lb_test_acc"), "b-", label="LB test accuracy")
        left.plot(epochs, mean("sb_test_acc"), "b:", label="SB test accuracy")
        right.plot(epochs, mean("lb_phi"), "r-", label="LB sharpness")
        left.set_xlabel("warm-start epochs")
        left.set_ylabel("test accuracy", color="b")
        right.set_ylabel("sharpness", color="r")
        _legend(left, right)
        return _save(fig, svg_path)


def trajectory_figure(csv_path, svg_path) -> Path:
    """Sharpness against full training loss along the SB and LB runs."""
    _, _, rows = read_csv(csv_path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(WIDTH_PX / DPI, HEIGHT_PX / DPI), dpi=DPI)
        for regime, style in (("SB", "b-o"), ("LB", "r-s")):
            sel = [r for r in rows if r["regime"] == regime]
            ax.plot(_floats(sel, "full_train_loss"), _floats(sel, "phi"), style, label=regime, markersize=3)
        ax.invert_xaxis()
        ax.set_xlabel("cross entropy")
        ax.set_ylabel("sharpness")
        ax.legend(loc="upper left")
        return _save(fig, svg_path)


def _legend(left, right) -> None:
    h1, l1 = left.get_legend_handles_labels()
    h2, l2 = right.get_legend_handles_labels()
    left.legend(h1 + h2, l1 + l2, loc="best")


def render(experiment: str, out_dir) -> List[Path]:
    """Figures for one experiment's CSV in ``out_dir``; experiments without a figure return []."""
    out = Path(out_dir)
    if experiment == "slice":
        return [slice_figure(out / "slice.csv", out / f"slice_{k}.svg", k) for k in ("linear", "curvilinear")]
    if experiment == "batch_sweep":
        return [sweep_figure(out / "sweep.csv", out / "sweep.svg")]
    if experiment == "piggyback":
        return [piggyback_figure(out / "piggyback.csv", out / "piggyback.svg")]
    if experiment == "trajectory":
        return [trajectory_figure(out / "trajectory.csv", out / "trajectory.svg")]
    return []
