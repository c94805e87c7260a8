"""Seeded image/clip perturbations and the modification tables they are drawn from.

Images are ``(3, H, W)`` arrays in [0, 1]. A clip receives a single draw and
the chosen modification is applied to every frame.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .streams import VideoClip

KINDS = ("brightness", "rotate_cw45", "rotate_ccw45", "scale_center_crop", "filter_yellow", "filter_red", "identity")
TINTS = {"yellow": (1.0, 1.0, 0.0), "red": (1.0, 0.0, 0.0)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationTable:
    rows: tuple[tuple[str, float], ...]

    def __post_init__(self):
        rows = tuple((str(k), float(p)) for k, p in self.rows)
        object.__setattr__(self, "rows", rows)
        kinds = [k for k, _ in rows]
        if not rows:
            raise ConfigError("perturbation table is empty")
        unknown = set(kinds) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown perturbation kinds {sorted(unknown)}")
        if len(set(kinds)) != len(kinds):
            raise ConfigError("each perturbation kind may appear at most once")
        if any(not 0.0 <= p <= 1.0 for _, p in rows):
            raise ConfigError("probabilities must lie in [0, 1]")
        if abs(math.fsum(p for _, p in rows) - 1.0) > 1e-12:
            raise ConfigError(f"probabilities sum to {math.fsum(p for _, p in rows)}, not 1")

    @classmethod
    def from_mapping(cls, mapping: dict[str, float]) -> "PerturbationTable":
        return cls(tuple(mapping.items()))

    def as_dict(self) -> dict[str, float]:
        return dict(self.rows)

    def kinds(self) -> list[str]:
        return [k for k, _ in self.rows]


# modified-ImageNet protocol
IMAGE_TABLE = PerturbationTable((
    ("brightness", 0.15),
    ("rotate_cw45", 0.15),
    ("scale_center_crop", 0.15),
    ("identity", 0.55),
))

# modified-HVU protocol
VIDEO_TABLE = PerturbationTable((
    ("filter_yellow", 0.10),
    ("filter_red", 0.10),
    ("brightness", 0.10),
    ("rotate_ccw45", 0.10),
    ("identity", 0.60),
))

IDENTITY_TABLE = PerturbationTable((("identity", 1.0),))

NAMED_TABLES = {"image": IMAGE_TABLE, "video": VIDEO_TABLE, "identity": IDENTITY_TABLE}


def get_table(source) -> PerturbationTable:
    if isinstance(source, PerturbationTable):
        return source
    if isinstance(source, str):
        if source not in NAMED_TABLES:
            raise ConfigError(f"unknown table {source!r}; expected one of {sorted(NAMED_TABLES)}")
        return NAMED_TABLES[source]
    if isinstance(source, dict):
        return PerturbationTable.from_mapping(source)
    raise ConfigError(f"cannot build a perturbation table from {source!r}")


def item_rng(seed: int, item_id: str) -> np.random.Generator:
    """Generator keyed on ``(seed, item_id)`` only, so draws do not depend on item order."""
    digest = hashlib.blake2b(f"{int(seed)}:{item_id}".encode(), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def draw_kind(table: PerturbationTable, item_id: str, seed: int) -> str:
    """Inverse-CDF draw of one perturbation kind for ``item_id``."""
    table = get_table(table)
    u = item_rng(seed, item_id).random()
    acc = 0.0
    for kind, p in table.rows:
        acc += p
        if u < acc:
            return kind
    # u landed in the rounding gap above the last cumulative sum
    return [k for k, p in table.rows if p > 0][-1]


def brightness(image: np.ndarray, factor: float = 0.5) -> np.ndarray:
    if not 0.0 < factor <= 1.0:
        raise ConfigError(f"brightness factor must be in (0, 1], got {factor}")
    return np.asarray(image, dtype=np.float64) * factor


def _bilinear(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: str) -> np.ndarray:
    """Sample ``image[..., H, W]`` at fractional ``(rows, cols)``.

    ``fill="zero"`` treats everything outside the image as black,
    ``fill="edge"`` clamps to the border.
    """
    h, w = image.shape[-2:]
    if fill == "edge":
        rows = np.clip(rows, 0, h - 1)
        cols = np.clip(cols, 0, w - 1)
        src, off = image, 0
    else:
        src = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)])
        rows = np.clip(rows, -1, h)
        cols = np.clip(cols, -1, w)
        off = 1
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    fr = rows - r0
    fc = cols - c0
    r0 = r0 + off
    c0 = c0 + off
    r1 = np.minimum(r0 + 1, src.shape[-2] - 1)
    c1 = np.minimum(c0 + 1, src.shape[-1] - 1)
    top = src[..., r0, c0] * (1 - fc) + src[..., r0, c1] * fc
    bot = src[..., r1, c0] * (1 - fc) + src[..., r1, c1] * fc
    return top * (1 - fr) + bot * fr


def rotate45(image: np.ndarray, direction: str) -> np.ndarray:
    """Rotate by 45 degrees about the image centre as seen on screen (row 0 at the top).

    Bilinear resampling; regions with no source pixel become black. Works on
    any ``(..., H, W)`` stack.
    """
    if direction not in ("cw", "ccw"):
        raise ConfigError(f"direction must be 'cw' or 'ccw', got {direction!r}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    theta = math.radians(45.0) * (1 if direction == "cw" else -1)
    c, s = math.cos(theta), math.sin(theta)
    # inverse map: output pixel -> source location (rows grow downward, so cw is +theta)
    src_x = c * dx + s * dy + cx
    src_y = -s * dx + c * dy + cy
    out = _bilinear(image, src_y, src_x, fill="zero")
    return np.clip(out, 0.0, 1.0)


def crop_geometry(h: int, w: int, scale: float) -> tuple[tuple[int, int], tuple[int, int]]:
    """Upscaled size and the top-left offset of the central ``h x w`` crop."""
    hs, ws = int(round(h * scale)), int(round(w * scale))
    return (hs, ws), ((hs - h) // 2, (ws - w) // 2)


def scale_center_crop(image: np.ndarray, scale: float = 1.5) -> np.ndarray:
    """Bilinear upscale by ``scale`` then crop the centre back to the input size."""
    if scale <= 1.0:
        raise ConfigError(f"scale must exceed 1, got {scale}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[-2:]
    (hs, ws), (oy, ox) = crop_geometry(h, w, scale)
    # pixel-centre alignment between the upscaled grid and the source
    ry = (np.arange(oy, oy + h) + 0.5) * (h / hs) - 0.5
    rx = (np.arange(ox, ox + w) + 0.5) * (w / ws) - 0.5
    rows, cols = np.meshgrid(ry, rx, indexing="ij")
    return np.clip(_bilinear(image, rows, cols, fill="edge"), 0.0, 1.0)


def color_filter(image: np.ndarray, color: str, alpha: float = 0.3) -> np.ndarray:
    """Blend toward a pure tint: ``(1 - alpha) * pixel + alpha * tint``. Channel axis is ``-3``."""
    if color not in TINTS:
        raise ConfigError(f"unknown filter colour {color!r}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    image = np.asarray(image, dtype=np.float64)
    tint = np.array(TINTS[color]).reshape(3, 1, 1)
    return (1.0 - alpha) * image + alpha * tint


@dataclass(frozen=True)
class Magnitudes:
    brightness: float = 0.5
    scale: float = 1.5
    alpha: float = 0.3


def apply_kind(image: np.ndarray, kind: str, mags: Magnitudes = Magnitudes()) -> np.ndarray:
    """Apply one perturbation to an image or a ``(T, 3, H, W)`` frame stack."""
    if kind == "identity":
        return image
    if kind == "brightness":
        return brightness(image, mags.brightness)
    if kind == "rotate_cw45":
        return rotate45(image, "cw")
    if kind == "rotate_ccw45":
        return rotate45(image, "ccw")
    if kind == "scale_center_crop":
        return scale_center_crop(image, mags.scale)
    if kind == "filter_yellow":
        return color_filter(image, "yellow", mags.alpha)
    if kind == "filter_red":
        return color_filter(image, "red", mags.alpha)
    raise ConfigError(f"unknown perturbation kind {kind!r}")


@dataclass(frozen=True)
class PerturbRecord:
    item_id: str
    kind: str
    seed: int


def perturb_clip(clip: VideoClip, kind: str, mags: Magnitudes = Magnitudes()) -> VideoClip:
    if kind == "identity":
        return clip
    frames = apply_kind(clip.frames.astype(np.float64), kind, mags)
    return VideoClip(frames.astype(np.float32), clip.audio_features, clip.labels, clip.clip_id)


def perturb_dataset(items, table, seed: int, mags: Magnitudes = Magnitudes()):
    """Perturb clips (or ``(item_id, image)`` pairs) with one draw per item.

    Returns the modified items, in input order, and the replay log.
    """
    table = get_table(table)
    out, records = [], []
    for item in items:
        if isinstance(item, VideoClip):
            kind = draw_kind(table, item.clip_id, seed)
            out.append(perturb_clip(item, kind, mags))
            records.append(PerturbRecord(item.clip_id, kind, seed))
        else:
            item_id, image = item
            kind = draw_kind(table, item_id, seed)
            new = image if kind == "identity" else apply_kind(np.asarray(image, dtype=np.float64), kind, mags)
            out.append((item_id, new))
            records.append(PerturbRecord(item_id, kind, seed))
    return out, records


def write_replay_log(path, records: list[PerturbRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "kind", "seed"])
        for r in records:
            w.writerow([r.item_id, r.kind, r.seed])


def read_replay_log(path) -> list[PerturbRecord]:
    with open(path, newline="") as fh:
        return [PerturbRecord(r["item_id"], r["kind"], int(r["seed"])) for r in csv.DictReader(fh)]
