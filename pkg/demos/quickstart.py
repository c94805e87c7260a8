"""Train spatial_only and two_stream on a small synthetic set and compare their drops.

Runs in a few minutes on one core. Pass a directory to keep the run records:

    python demos/quickstart.py out/
"""
import sys
from pathlib import Path

from tristream.harness.config import config_from_dict
from tristream.harness.experiments import run_resilience

SMALL = {
    "data": {"clips_per_class": 60, "num_classes": 6},
    "training": {"epochs": 4, "pretrain_epochs": 2, "warmup_epochs": 2},
}


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = run_resilience(config_from_dict(SMALL), seeds=(0,), out_dir=out)
    outcome = result.outcomes[0]
    for mode, conds in outcome.metrics.items():
        print(f"{mode:>12}: clean acc {conds['clean']['accuracy']:.3f}  "
              f"perturbed acc {conds['perturbed']['accuracy']:.3f}  drop {outcome.drop(mode)['accuracy']:+.3f}")
    print(f"drop difference (spatial_only - two_stream): {outcome.difference()}")


if __name__ == "__main__":
    main()
