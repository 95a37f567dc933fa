"""Static charts. matplotlib is optional and imported on first use."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

from .evalstats import FertilityBin, RankingReport


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise RuntimeError("plotting needs matplotlib (pip install 'artifact[plot]')") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def loss_curve(metrics_path: str | Path, out: str | Path) -> Path:
    plt = _pyplot()
    steps, losses, phases = [], [], []
    for line in Path(metrics_path).read_text().splitlines():
        rec = json.loads(line)
        if rec.get("loss") is not None:
            steps.append(rec["step"])
            losses.append(rec["loss"])
            phases.append(rec["phase"])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for phase in dict.fromkeys(phases):
        xs = [s for s, p in zip(steps, phases) if p == phase]
        ys = [v for v, p in zip(losses, phases) if p == phase]
        ax.plot(xs, ys, label=phase, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("MLM loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)


def borda_chart(report: RankingReport, out: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(report.ordering) + 1))
    ax.barh(report.ordering[::-1], [report.borda[s] for s in report.ordering[::-1]])
    ax.set_xlabel("normalized Borda (mean cluster, lower is better)")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)


def quantile_curve(means: dict[str, Sequence[float | None]], out: str | Path, xlabel: str = "length quantile") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in means.items():
        xs = [i + 1 for i, y in enumerate(ys) if y is not None]
        ax.plot(xs, [y for y in ys if y is not None], marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)


def fertility_chart(bins: Sequence[FertilityBin], out: str | Path) -> Path:
    plt = _pyplot()
    kept = [b for b in bins if b.difference is not None]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([f"{b.lo:.2g}-{b.hi:.2g}" for b in kept], [b.difference for b in kept])
    ax.axhline(0, color="k", lw=0.8)
    ax.set_xlabel("fertility bin")
    ax.set_ylabel("metric difference")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)
