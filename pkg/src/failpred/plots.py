"""Static plot and CSV artifacts from an evaluation report.

* ``hist_<criterion>.csv/svg``: relative-density histograms of a confidence
  criterion for correct vs. wrong test predictions (``bins x 2`` CSV rows).
* ``risk_coverage.csv/svg``: selective risk against coverage per method.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import DependencyError, FormatError  # noqa: E402

# deterministic SVG output: fixed element ids, no timestamp
matplotlib.rcParams["svg.hashsalt"] = "failpred"
matplotlib.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None, "Creator": None}

SCORE_COLUMNS = ("MCP", "tcp", "MCDropout", "TrustScore", "ConfidNet")


def read_scores(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise FormatError(f"{path} holds no samples")
    out = {"is_error": np.array([int(r["is_error"]) for r in rows], dtype=bool)}
    for col in SCORE_COLUMNS:
        out[col] = np.array([float(r[col]) for r in rows])
    return out


def histogram_rows(scores: np.ndarray, is_error: np.ndarray, bins: int) -> list[dict]:
    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for label, mask in (("correct", ~is_error), ("error", is_error)):
        counts, _ = np.histogram(scores[mask], bins=edges)
        # relative density: each class integrates to 1 regardless of its size
        total = counts.sum()
        density = counts / (total * np.diff(edges)) if total else np.zeros(bins)
        for b in range(bins):
            rows.append({"bin": b, "lo": float(edges[b]), "hi": float(edges[b + 1]), "outcome": label,
                         "count": int(counts[b]), "density": float(density[b])})
    return rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _plot_hist(path: Path, rows: list[dict], title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, color in (("correct", "tab:green"), ("error", "tab:red")):
        sel = [r for r in rows if r["outcome"] == label]
        lefts = [r["lo"] for r in sel]
        widths = [r["hi"] - r["lo"] for r in sel]
        ax.bar(lefts, [r["density"] for r in sel], width=widths, align="edge", alpha=0.5, color=color, label=label)
    ax.set_title(title)
    ax.set_xlabel("confidence")
    ax.set_ylabel("relative density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def _plot_rc(path: Path, series: dict[str, list[dict]]) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, pts in series.items():
        cov = [p["coverage"] for p in pts if p["coverage"] > 0]
        risk = [p["selective_risk"] for p in pts if p["coverage"] > 0]
        ax.plot(cov, risk, label=name, drawstyle="steps-post")
    ax.set_xlabel("coverage")
    ax.set_ylabel("selective risk")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def run_plot(report_path: str | Path, out_dir: str | Path | None = None, bins: int = 20) -> list[Path]:
    """Emit histogram and risk-coverage artifacts for the report at ``report_path``."""
    report_path = Path(report_path)
    if not report_path.exists():
        raise DependencyError(f"report not found: {report_path}; run 'eval' first")
    report = json.loads(report_path.read_text())
    methods = [m for m in report.get("methods", []) if m.get("risk_coverage")]
    if not methods:
        raise FormatError(f"report {report_path} has no method with a risk-coverage series")
    out = Path(out_dir) if out_dir else report_path.parent
    out.mkdir(parents=True, exist_ok=True)
    written = []

    scores_path = report_path.parent / "scores.csv"
    if scores_path.exists():
        scores = read_scores(scores_path)
        for col in SCORE_COLUMNS:
            rows = histogram_rows(scores[col], scores["is_error"], bins)
            name = col.lower()
            _write_csv(out / f"hist_{name}.csv", rows)
            _plot_hist(out / f"hist_{name}.svg", rows, f"{col}: correct vs. error")
            written += [out / f"hist_{name}.csv", out / f"hist_{name}.svg"]

    rc_rows = []
    for m in methods:
        for p in m["risk_coverage"]:
            rc_rows.append({"method": m["name"], "threshold": p["threshold"], "coverage": p["coverage"],
                            "selective_risk": p["selective_risk"]})
    _write_csv(out / "risk_coverage.csv", rc_rows)
    _plot_rc(out / "risk_coverage.svg", {m["name"]: m["risk_coverage"] for m in methods})
    written += [out / "risk_coverage.csv", out / "risk_coverage.svg"]
    return written
