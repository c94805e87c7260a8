"""Multi-seed resilience comparison and the temporal sampling-rate sweep."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from ..metrics import drop_difference, retention_delta
from ..streams import sampler_for_rate
from .config import ConfigError, ExperimentConfig
from .train import evaluate_clips, load_splits, pretrain_streams, train_model

log = logging.getLogger(__name__)

GATED_METRICS = ("accuracy", "map_at_k")


def seeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return config.replace(**{"seeds.data": seed, "seeds.init": seed, "seeds.perturb": seed})


def clean_and_perturbed(config: ExperimentConfig, model, clips, mode: str) -> dict[str, dict[str, float]]:
    k = config.metrics.k
    clean, _ = evaluate_clips(model, clips, mode, k)
    pert, _ = evaluate_clips(model, clips, mode, k, config.table(), config.seeds.perturb, config.magnitudes())
    return {"clean": clean.values(), "perturbed": pert.values()}


@dataclass
class SeedOutcome:
    seed: int
    metrics: dict[str, dict[str, dict[str, float]]]  # mode -> condition -> metric -> value
    config_hash: dict[str, str]

    def drop(self, mode: str) -> dict[str, float]:
        m = self.metrics[mode]
        return retention_delta(m["clean"], m["perturbed"])

    def difference(self, single: str = "spatial_only", multi: str = "two_stream") -> dict[str, float]:
        return drop_difference(self.drop(single), self.drop(multi))

    def multi_wins(self, metrics=GATED_METRICS) -> bool:
        """Multi-stream drop strictly smaller on every gated metric."""
        diff = self.difference()
        return all(diff[m] > 0 for m in metrics)


@dataclass
class ResilienceResult:
    outcomes: list[SeedOutcome] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def wins(self) -> int:
        return sum(o.multi_wins() for o in self.outcomes)

    def mean_difference(self, metric: str) -> float:
        return float(np.mean([o.difference()[metric] for o in self.outcomes]))

    def sign_test_p(self) -> float:
        """One-sided sign test of "multi-stream drops less" across seeds."""
        n = len(self.outcomes)
        return float(binomtest(self.wins, n, 0.5, alternative="greater").pvalue) if n else 1.0

    def min_clean_accuracy(self, mode: str) -> float:
        return min(o.metrics[mode]["clean"]["accuracy"] for o in self.outcomes)

    def rows(self) -> list[dict]:
        out = []
        for o in self.outcomes:
            for mode, conds in o.metrics.items():
                for cond, values in conds.items():
                    for metric, v in values.items():
                        out.append(dict(metric=metric, model=mode, dataset="synthetic", condition=cond, value=v,
                                        seed=o.seed, config_hash=o.config_hash[mode]))
        return out

    def summary_lines(self) -> list[str]:
        lines = []
        for o in self.outcomes:
            d = o.difference()
            lines.append(
                f"seed {o.seed}: clean acc " + " ".join(f"{m}={o.metrics[m]['clean']['accuracy']:.3f}" for m in o.metrics)
                + " | drop diff " + " ".join(f"{m}={d[m]:+.4f}" for m in GATED_METRICS)
                + (" | multi wins" if o.multi_wins() else " | multi does not win"))
        lines.append(f"wins {self.wins}/{len(self.outcomes)}, sign-test p={self.sign_test_p():.4f}, "
                     + ", ".join(f"mean {m} drop diff {self.mean_difference(m):+.4f}" for m in GATED_METRICS))
        return lines


def run_resilience(config: ExperimentConfig, seeds=(0, 1, 2, 3, 4), modes=("spatial_only", "two_stream"),
                   data_dir=None, out_dir=None) -> ResilienceResult:
    """Train every mode on identical data and seeds, then score clean and perturbed test clips.

    Stage-one results are shared between modes of the same seed, so the spatial
    encoder each mode starts from is the same.
    """
    t0 = time.time()
    result = ResilienceResult()
    for seed in seeds:
        cfg = seeded(config, seed)
        splits = load_splits(cfg, data_dir)
        cache: dict = {}
        metrics, hashes = {}, {}
        for mode in modes:
            mcfg = cfg.replace(mode=mode)
            model, record = train_model(mcfg, splits, pretrain_streams(mcfg, splits["train"], mode, cache))
            metrics[mode] = clean_and_perturbed(mcfg, model, splits["test"], mode)
            record.metrics = metrics[mode]
            hashes[mode] = mcfg.config_hash()
            if out_dir is not None:
                record.save(Path(out_dir) / f"record_{mode}_seed{seed}.json")
        result.outcomes.append(SeedOutcome(seed, metrics, hashes))
        log.info(result.summary_lines()[-2])
    result.wall_clock = time.time() - t0
    return result


@dataclass
class SweepPoint:
    rate: int
    stride: int
    map_clean: float
    map_perturbed: float
    config_hash: str

    @property
    def map_drop(self) -> float:
        return self.map_clean - self.map_perturbed


SWEEP_FIELDS = ["rate", "stride", "map_clean", "map_perturbed", "map_drop", "config_hash"]


def run_sweep(config: ExperimentConfig, rates=(3, 10, 30), data_dir=None) -> list[SweepPoint]:
    """Retrain the two-stream model at each temporal sampling rate and record its mAP drop."""
    frames = config.data.frames
    samplers = []
    for rate in rates:
        try:
            samplers.append(sampler_for_rate(frames, int(rate), config.sampler.offset))
        except ValueError as err:
            raise ConfigError(str(err)) from None
    base = config.replace(mode="two_stream")
    splits = load_splits(base, data_dir)
    spatial = pretrain_streams(base.replace(mode="spatial_only"), splits["train"])
    points = []
    for rate, s in zip(rates, samplers):
        cfg = base.replace(**{"sampler.sample_count": s.sample_count, "sampler.stride": s.stride})
        cache = dict(spatial)
        model, _ = train_model(cfg, splits, pretrain_streams(cfg, splits["train"], cache=cache))
        m = clean_and_perturbed(cfg, model, splits["test"], cfg.mode)
        points.append(SweepPoint(int(rate), s.stride, m["clean"]["map_at_k"], m["perturbed"]["map_at_k"],
                                 cfg.config_hash()))
        log.info("rate %d: mAP drop %.4f", rate, points[-1].map_drop)
    return points


def write_sweep_csv(path, points: list[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for p in points:
            w.writerow(dict(rate=p.rate, stride=p.stride, map_clean=p.map_clean, map_perturbed=p.map_perturbed,
                            map_drop=p.map_drop, config_hash=p.config_hash))


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{**r, "rate": int(r["rate"]), "map_drop": float(r["map_drop"])} for r in csv.DictReader(fh)]
