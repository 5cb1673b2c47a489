"""Static PNGs rendered from the aggregate CSVs. The CSVs are the contract;
these are for eyeballing."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    # fixed metadata keeps the bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_load_series(out: Path) -> list[Path]:
    rows = _read(out / "load_series.csv")
    series = defaultdict(list)
    for r in rows:
        series[(r["variant"], r["scheme"])].append(r)
    written = []
    for column, ylabel, name in (
        ("throughput_rps", "completed requests / s", "throughput_vs_load.png"),
        ("mean_response_s", "mean response time of completed requests (s)", "response_vs_load.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for (variant, scheme), pts in series.items():
            pts = sorted(pts, key=lambda r: float(r["rho"]))
            label = scheme if variant == "default" else f"{scheme} ({variant})"
            ax.plot([float(p["rho"]) for p in pts], [float(p[column]) for p in pts], marker="o", label=label)
        ax.set_xlabel("offered load (rho)")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        written.append(_save(fig, out / name))
    return written


def plot_ccdfs(out: Path, filters=("all", "Br-1")) -> list[Path]:
    rows = _read(out / "ccdf_summary.csv")
    curves = defaultdict(lambda: ([], []))
    for r in rows:
        if r["filter"] not in filters:
            continue
        t, v = curves[(r["variant"], r["rho"], r["filter"], r["scheme"])]
        t.append(float(r["t"]))
        v.append(float(r["value"]))
    panels = defaultdict(dict)
    for (variant, rho, f, scheme), tv in curves.items():
        panels[(variant, rho, f)][scheme] = tv
    written = []
    for (variant, rho, f), by_scheme in panels.items():
        fig, ax = plt.subplots(figsize=(6, 4))
        for scheme, (t, v) in by_scheme.items():
            ax.step(t, v, where="post", label=scheme)
        ax.set_yscale("log")
        ax.set_ylim(1e-3, 1.05)
        ax.set_xlabel("response time t (s)")
        ax.set_ylabel("P(T > t)")
        ax.set_title(f"{f}, rho={rho}, {variant}")
        ax.grid(alpha=0.3, which="both")
        ax.legend(fontsize=8)
        written.append(_save(fig, out / f"ccdf_{variant}_{f}_rho-{float(rho):g}.png"))
    return written


def render_all(out: str | Path) -> list[Path]:
    out = Path(out)
    return plot_load_series(out) + plot_ccdfs(out)
