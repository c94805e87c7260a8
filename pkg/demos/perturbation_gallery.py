"""Render one synthetic frame under every perturbation kind into an SVG grid."""
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tristream.perturb import KINDS, apply_kind  # noqa: E402
from tristream.streams import median_frame  # noqa: E402
from tristream.synthdata import default_classes, generate_clip  # noqa: E402


def main(path="perturbations.svg"):
    frame = median_frame(generate_clip(default_classes()[5], seed=3)).astype(np.float64)
    fig, axes = plt.subplots(1, len(KINDS), figsize=(2 * len(KINDS), 2.3))
    for ax, kind in zip(axes, KINDS):
        ax.imshow(np.transpose(apply_kind(frame, kind), (1, 2, 0)), interpolation="nearest")
        ax.set_title(kind, fontsize=7)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    print(f"wrote {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
