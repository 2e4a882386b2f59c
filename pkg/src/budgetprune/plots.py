"""CSV dumps of the mask curve and training histories, plus optional SVGs.

matplotlib is optional (``pip install artifact[plot]``); without it only the
CSV files are written.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .reparam import h


def h_curve(t: float = 1.0, n: int = 4, lo: float = -3.0, hi: float = 3.0, points: int = 601):
    xs = np.linspace(lo, hi, points)
    return xs, np.asarray(h(xs, t, n))


def write_h_curve(path: Path, t: float = 1.0, n: int = 4) -> None:
    xs, ys = h_curve(t, n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "h"])
        w.writerows(zip(xs.tolist(), ys.tolist()))


def write_training_curves(path: Path, histories: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "lr", "task_loss", "budget_loss", "test_accuracy",
                    "monitored_accuracy", "surrogate_fraction"])
        for run, hist in histories.items():
            for r in hist.records:
                w.writerow([run, r.epoch, r.lr, r.task_loss, r.budget_loss, r.test_accuracy,
                            r.monitored_accuracy, r.surrogate_fraction])


def render_svgs(out_dir: Path, histories: dict) -> bool:
    """Write h_curve.svg and training_curves.svg; False if matplotlib is missing."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False

    xs, ys = h_curve()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(xs, ys)
    ax.set_xlabel("x")
    ax.set_ylabel("h(x), t=1, n=4")
    fig.tight_layout()
    fig.savefig(out_dir / "h_curve.svg")
    plt.close(fig)

    if histories:
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        for run, hist in histories.items():
            ep = [r.epoch for r in hist.records]
            a1.plot(ep, [r.monitored_accuracy for r in hist.records], label=run)
            a2.plot(ep, [r.surrogate_fraction for r in hist.records], label=run)
        a1.set_xlabel("epoch")
        a1.set_ylabel("monitored accuracy (%)")
        a2.set_xlabel("epoch")
        a2.set_ylabel("surrogate cost / initial")
        a1.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(out_dir / "training_curves.svg")
        plt.close(fig)
    return True
