"""Summary tables and static SVG plots from run records."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..autodiff import UsageError  # noqa: E402
from ..metrics import REPORT_METRICS, retention_delta  # noqa: E402
from .train import RunRecord  # noqa: E402

SINGLE_MODE = "spatial_only"
# fixed ids and no timestamp, so reruns give byte-identical SVG
plt.rcParams["svg.hashsalt"] = "tristream"
SVG_META = {"Date": None, "Creator": None}


def _key(record: RunRecord) -> tuple:
    return record.dataset, tuple(sorted(record.seeds.items()))


def summarize(records: list[RunRecord]) -> list[dict]:
    """One row per record: clean and perturbed metrics, drops and the drop difference.

    ``drop_difference_<metric>`` is the single-stream drop minus this record's
    drop, using the spatial-only record with the same dataset and seeds; it is
    blank when there is no such record or the record is itself spatial-only.
    """
    if not records:
        raise UsageError("report needs at least one run record")
    drops = {}
    for r in records:
        if "clean" in r.metrics and "perturbed" in r.metrics:
            drops[id(r)] = retention_delta(r.metrics["clean"], r.metrics["perturbed"])
    single = {_key(r): drops.get(id(r)) for r in records if r.mode == SINGLE_MODE}
    rows = []
    for r in records:
        row = dict(model=r.mode, dataset=r.dataset, seed=r.seeds.get("init", ""), config_hash=r.config_hash)
        for cond in ("clean", "perturbed"):
            for m in REPORT_METRICS:
                row[f"{cond}_{m}"] = r.metrics.get(cond, {}).get(m, "")
        d = drops.get(id(r))
        base = single.get(_key(r))
        for m in REPORT_METRICS:
            row[f"drop_{m}"] = "" if d is None else d[m]
            has_diff = d is not None and base is not None and r.mode != SINGLE_MODE
            row[f"drop_difference_{m}"] = base[m] - d[m] if has_diff else ""
        rows.append(row)
    return rows


def summary_fields() -> list[str]:
    fields = ["model", "dataset", "seed", "config_hash"]
    for prefix in ("clean_", "perturbed_", "drop_", "drop_difference_"):
        fields += [prefix + m for m in REPORT_METRICS]
    return fields


def write_summary_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=summary_fields())
        w.writeheader()
        w.writerows(rows)


def bar_chart(path, rows: list[dict], metric: str = "map_at_k") -> None:
    """Clean vs perturbed bars per row (model and seed)."""
    labels = [f"{r['model']}\nseed {r['seed']}" for r in rows]
    clean = [float(r[f"clean_{metric}"] or 0.0) for r in rows]
    pert = [float(r[f"perturbed_{metric}"] or 0.0) for r in rows]
    x = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(rows)), 3.5))
    ax.bar([i - 0.2 for i in x], clean, width=0.4, label="clean")
    ax.bar([i + 0.2 for i in x], pert, width=0.4, label="perturbed")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def line_chart(path, xs, ys, xlabel: str, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(list(xs), list(ys), marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
