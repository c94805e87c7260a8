"""Ranked-retrieval metrics over PredictionSets: GAP, AP@K, mAP@K and accuracy."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .fusion import PredictionSet

POOL_LIMIT = 10000
REPORT_METRICS = ("accuracy", "gap", "map_at_k")


@dataclass(frozen=True)
class GroundTruth:
    item_id: str
    positives: frozenset

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(int(c) for c in self.positives))
        if not self.positives:
            raise ValueError(f"item {self.item_id!r} has no positive labels")


@dataclass(frozen=True)
class PoolEntry:
    item_id: str
    class_id: int
    confidence: float
    is_correct: bool


@dataclass
class RankedPool:
    entries: list[PoolEntry]
    total_positives: int

    def __len__(self):
        return len(self.entries)


def _truth_map(truth) -> dict[str, frozenset]:
    if isinstance(truth, dict):
        return {k: frozenset(v) for k, v in truth.items()}
    return {t.item_id: t.positives for t in truth}


def build_pool(predictions: list[PredictionSet], truth) -> RankedPool:
    """Pool every predicted pair, sort by (confidence desc, item id, class id), keep the top 10000."""
    tmap = _truth_map(truth)
    entries = []
    for p in predictions:
        if p.item_id not in tmap:
            raise KeyError(f"no ground truth for item {p.item_id!r}")
        pos = tmap[p.item_id]
        entries.extend(PoolEntry(p.item_id, c, f, c in pos) for c, f in p.pairs)
    entries.sort(key=lambda e: (-e.confidence, e.item_id, e.class_id))
    return RankedPool(entries[:POOL_LIMIT], sum(len(v) for v in tmap.values()))


def _ranked_ap(hits, denominator: int) -> float:
    # precision at each hit, summed; dividing once keeps a perfect ranking at exactly 1.0
    total = 0.0
    n_hit = 0
    for i, hit in enumerate(hits, start=1):
        if hit:
            n_hit += 1
            total += n_hit / i
    return total / denominator


def gap(pool: RankedPool, truth=None) -> float:
    """Global average precision: sum of precision(i) * recall increment(i) over the pool.

    ``truth`` overrides the positive count stored on the pool.
    """
    if not pool.entries:
        raise ValueError("GAP of an empty pool")
    total = pool.total_positives if truth is None else sum(len(v) for v in _truth_map(truth).values())
    if total == 0:
        raise ValueError("GAP needs at least one positive label")
    return _ranked_ap((e.is_correct for e in pool.entries), total)


def _class_ranking(class_id: int, predictions: list[PredictionSet], tmap) -> list[bool]:
    scored = []
    for p in predictions:
        for c, f in p.pairs:
            if c == class_id:
                scored.append((-f, p.item_id, class_id in tmap[p.item_id]))
                break
    scored.sort(key=lambda s: (s[0], s[1]))
    return [s[2] for s in scored]


def ap_at_k(class_id: int, predictions: list[PredictionSet], truth, k: int) -> float:
    """Average precision of one class over items ranked by that class's confidence.

    Only the top ``k`` items count, and recall is measured against
    ``min(positives, k)`` so a perfect ranking scores 1.
    """
    tmap = _truth_map(truth)
    n_pos = sum(class_id in v for v in tmap.values())
    if n_pos == 0:
        raise ValueError(f"class {class_id} has no positives")
    hits = _class_ranking(class_id, predictions, tmap)[:k]
    return _ranked_ap(hits, min(n_pos, k))


def per_class_ap(predictions: list[PredictionSet], truth, k: int) -> dict[int, float]:
    tmap = _truth_map(truth)
    missing = [p.item_id for p in predictions if p.item_id not in tmap]
    if missing:
        raise KeyError(f"no ground truth for item {missing[0]!r}")
    classes = sorted(set().union(*tmap.values())) if tmap else []
    return {c: ap_at_k(c, predictions, tmap, k) for c in classes}


def map_at_k(predictions: list[PredictionSet], truth, k: int = 20) -> float:
    """Unweighted mean of AP@K over classes with at least one positive."""
    table = per_class_ap(predictions, truth, k)
    if not table:
        raise ValueError("mAP needs at least one class with positives")
    return sum(table.values()) / len(table)


def accuracy(predictions: list[PredictionSet], truth) -> float:
    """Fraction of items whose top-ranked class is a positive."""
    tmap = _truth_map(truth)
    if not predictions:
        raise ValueError("accuracy of no predictions")
    correct = sum(bool(p.pairs) and p.pairs[0][0] in tmap[p.item_id] for p in predictions)
    return correct / len(predictions)


@dataclass
class MetricReport:
    gap: float
    map_at_k: float
    accuracy: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    k: int = 20

    def values(self) -> dict[str, float]:
        return {"accuracy": self.accuracy, "gap": self.gap, "map_at_k": self.map_at_k}

    def rows(self, model: str, dataset: str, condition: str) -> list[dict]:
        return [dict(metric=m, model=model, dataset=dataset, condition=condition, value=v)
                for m, v in self.values().items()]


def evaluate(predictions: list[PredictionSet], truth, k: int = 20) -> MetricReport:
    pool = build_pool(predictions, truth)
    table = per_class_ap(predictions, truth, k)
    return MetricReport(
        gap=gap(pool),
        map_at_k=sum(table.values()) / len(table),
        accuracy=accuracy(predictions, truth),
        per_class_ap=table,
        k=k,
    )


def retention_delta(clean: MetricReport | dict, perturbed: MetricReport | dict) -> dict[str, float]:
    """Per-metric drop, clean minus perturbed."""
    c = clean.values() if isinstance(clean, MetricReport) else dict(clean)
    p = perturbed.values() if isinstance(perturbed, MetricReport) else dict(perturbed)
    if set(c) != set(p):
        raise ValueError(f"metric sets differ: {sorted(c)} vs {sorted(p)}")
    return {m: c[m] - p[m] for m in c}


def drop_difference(single_stream_drop: dict[str, float], multi_stream_drop: dict[str, float]) -> dict[str, float]:
    """Single-stream drop minus multi-stream drop; positive means the multi-stream model held up better."""
    if set(single_stream_drop) != set(multi_stream_drop):
        raise ValueError("drop tables cover different metrics")
    return {m: single_stream_drop[m] - multi_stream_drop[m] for m in single_stream_drop}


CSV_FIELDS = ["metric", "model", "dataset", "condition", "value"]


def write_report_csv(path, rows: list[dict], extra_fields: tuple[str, ...] = ()) -> None:
    fields = CSV_FIELDS + list(extra_fields)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
    return rows
