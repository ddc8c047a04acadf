"""Figures and delimited tables written next to a run report.

Everything here reads the machine report only, so a saved report can be
re-rendered without re-running the scenario.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def amortized_gas(n: int, model: Mapping[str, int]) -> float:
    """Gas per payment when one registerPayment and one collect cover ``n`` payees."""
    register = (model["reg_payment_fixed"] + model["reg_payment_per_id"] * n) / n
    return register + model["collect"] / n


def amortization_rows(model: Mapping[str, int], max_n: int = 2000) -> list[tuple[int, int, int, int]]:
    rows = []
    n = 1
    while n <= max_n:
        reg = math.ceil((model["reg_payment_fixed"] + model["reg_payment_per_id"] * n) / n)
        col = math.ceil(model["collect"] / n)
        rows.append((n, reg, col, reg + col))
        n = n * 2 if n < 8 else int(n * 1.25) + 1
    return rows


def _write_csv(path: Path, header: list[str], rows: list[Any]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_tables(report: Mapping[str, Any], stem: Path) -> list[Path]:
    """CSV companions of a protocol report: gas by kind and balances."""
    out = []
    gas = report["gas"]
    rows = [(kind, v["count"], v["gas"], v["payments"]) for kind, v in gas["per_kind"].items()]
    out.append(_write_csv(stem.with_name(stem.name + ".gas.csv"), ["kind", "count", "gas", "payments"], rows))
    rows = [
        (name, b["role"], b["start"]["token"], b["start"]["batpay"], b["end"]["token"], b["end"]["batpay"])
        for name, b in report["balances"].items()
    ]
    out.append(_write_csv(stem.with_name(stem.name + ".balances.csv"), ["actor", "role", "token_start", "batpay_start", "token_end", "batpay_end"], rows))
    model = gas.get("model")
    if model:
        out.append(_write_csv(stem.with_name(stem.name + ".amortization.csv"), ["batch", "register", "collect", "combined"], amortization_rows(model)))
    return out


def plot_amortization(report: Mapping[str, Any], path: Path) -> Path:
    gas = report["gas"]
    model = gas["model"]
    rows = amortization_rows(model)
    pp = gas["per_payment"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog([r[0] for r in rows], [r[3] for r in rows], color="#1f5f8b", label="registerPayment + collect")
        ax.loglog([r[0] for r in rows], [r[1] for r in rows], color="#8aa9c1", ls="--", label="registerPayment only")
        if pp["batch_size"]:
            ax.scatter([pp["batch_size"]], [pp["combined"]], color="#c0392b", zorder=3, label=f"this run: {pp['combined']} gas")
        ax.set_xlabel("payees per batch")
        ax.set_ylabel("gas per payment")
        ax.set_title(f"{report['scenario']}: amortized gas")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_gas_by_kind(report: Mapping[str, Any], path: Path) -> Path:
    kinds = report["gas"]["per_kind"]
    names = list(kinds)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.barh(names, [kinds[k]["gas"] for k in names], color="#1f5f8b")
        ax.set_xscale("log")
        ax.set_xlabel("total gas")
        ax.set_title(f"{report['scenario']}: gas by transaction kind")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def plot_matrix(report: Mapping[str, Any], path: Path) -> Path:
    m = report["matrix"]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = ["honest collects", "fraudulent collects"]
        ok = [m["honest_settled_ok_pct"], m["fraud_settled_fraud_pct"]]
        ax.bar(labels, ok, color=["#2e8b57", "#c0392b"])
        for i, (v, n) in enumerate(zip(ok, (m["honest_cases"], m["fraud_cases"]))):
            ax.text(i, v + 1, f"{v:.1f}% of {n:,}", ha="center")
        ax.set_ylim(0, 110)
        ax.set_ylabel("% settled as expected")
        ax.set_title(f"{report['scenario']}: {m['configs']:,} configurations")
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
    return path


def render(report: Mapping[str, Any], report_path: str | Path) -> list[Path]:
    """Write figures and CSV tables beside ``report_path``; returns the files."""
    report_path = Path(report_path)
    stem = report_path.with_suffix("")
    if report["kind"] == "challenge_matrix":
        return [plot_matrix(report, stem.with_name(stem.name + ".matrix.png"))]
    files = write_tables(report, stem)
    files.append(plot_gas_by_kind(report, stem.with_name(stem.name + ".gas.png")))
    if report["gas"].get("model"):
        files.append(plot_amortization(report, stem.with_name(stem.name + ".amortization.png")))
    return files
