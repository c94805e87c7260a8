"""Synthetic moving-shape clips, the binary clip format and dataset manifests.

Classes are (shape, colour, motion) triples. Some pairs share shape and
colour and differ only in how the shape moves, so a single still cannot
separate them reliably while the motion can.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .streams import VideoClip

MAGIC = b"TSLB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIIIII")
MANIFEST_VERSION = 1
REFERENCE_FRAMES = 30  # motion parameters are per frame of a 30-frame clip
AUDIO_WINDOWS = 8
AUDIO_DIM = 16
AUDIO_NOISE = 0.1
BACKGROUND = 0.15


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthClass:
    class_id: int
    shape: str  # square | circle | triangle
    color: tuple[float, float, float]
    motion: str  # linear | oscillate | rotate_orbit
    params: tuple = ()
    size: float = 4.0  # half-extent in pixels

    def __post_init__(self):
        if self.shape not in ("square", "circle", "triangle"):
            raise ConfigError(f"unknown shape {self.shape!r}")
        if self.motion not in ("linear", "oscillate", "rotate_orbit"):
            raise ConfigError(f"unknown motion {self.motion!r}")
        object.__setattr__(self, "color", tuple(float(c) for c in self.color))
        object.__setattr__(self, "params", tuple(self.params))

    def offset(self, t: np.ndarray) -> np.ndarray:
        """Displacement ``(dy, dx)`` from the start position at reference times ``t``."""
        t = np.asarray(t, dtype=np.float64)
        if self.motion == "linear":
            dx, dy = self.params
            return np.stack([dy * t, dx * t], axis=-1)
        if self.motion == "oscillate":
            axis, period, amp = (self.params + (6.0,))[:3]
            d = amp * np.sin(2 * np.pi * t / period)
            z = np.zeros_like(d)
            return np.stack([z, d] if axis == "x" else [d, z], axis=-1)
        radius, speed = self.params
        # starts at phase 0 so every orbit begins at the start position
        return np.stack([radius * np.sin(speed * t), radius * (np.cos(speed * t) - 1.0)], axis=-1)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SynthClass":
        return cls(d["class_id"], d["shape"], tuple(d["color"]), d["motion"], tuple(d["params"]), d.get("size", 4.0))


def default_classes() -> list[SynthClass]:
    """Ten classes; (0, 1) and (2, 3) differ only in motion direction."""
    red, green, blue = (0.9, 0.15, 0.15), (0.15, 0.85, 0.2), (0.2, 0.35, 0.95)
    return [
        SynthClass(0, "square", red, "linear", (0.35, 0.0)),
        SynthClass(1, "square", red, "linear", (-0.35, 0.0)),
        SynthClass(2, "circle", green, "linear", (0.0, 0.35)),
        SynthClass(3, "circle", green, "linear", (0.0, -0.35)),
        SynthClass(4, "triangle", blue, "oscillate", ("x", 10.0)),
        SynthClass(5, "square", (0.95, 0.85, 0.2), "rotate_orbit", (5.0, 0.3)),
        SynthClass(6, "circle", (0.85, 0.3, 0.85), "linear", (0.25, 0.25)),
        SynthClass(7, "triangle", (0.2, 0.85, 0.85), "oscillate", ("y", 15.0)),
        SynthClass(8, "square", (0.95, 0.95, 0.95), "linear", (0.0, 0.0)),
        SynthClass(9, "triangle", (0.95, 0.55, 0.1), "rotate_orbit", (4.0, -0.25)),
    ]


def confusable_pairs(classes: list[SynthClass]) -> list[tuple[int, int]]:
    out = []
    for i, a in enumerate(classes):
        for b in classes[i + 1:]:
            if (a.shape, a.color, a.size) == (b.shape, b.color, b.size) and (a.motion, a.params) != (b.motion, b.params):
                out.append((a.class_id, b.class_id))
    return out


def _coverage(shape: str, yy, xx, cy, cx, size) -> np.ndarray:
    """Soft (one-pixel ramp) coverage mask of a shape centred at ``(cy, cx)``."""
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        d = np.maximum(np.abs(dy), np.abs(dx)) - size
    elif shape == "circle":
        d = np.sqrt(dy * dy + dx * dx) - size
    else:
        # upward-pointing triangle: base edge plus two slanted edges
        s3 = math.sqrt(3.0)
        d = np.maximum.reduce([
            dy - size / 2,
            (s3 * dx - dy) / 2 - size / 2,
            (-s3 * dx - dy) / 2 - size / 2,
        ])
    return np.clip(0.5 - d, 0.0, 1.0)


def clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_clip(cls: SynthClass, frames: int = 30, dims=(32, 32), seed: int = 0,
                  index: int = 0, clip_id: str | None = None, jitter: float = 7.0) -> VideoClip:
    """Render one clip of ``cls``.

    The start position, background texture and audio noise come from
    ``(seed, index)`` alone, not from the class, so two classes with equal
    appearance render identical first frames for the same seed.
    """
    if frames < 1:
        raise ConfigError("frames must be >= 1")
    h, w = dims
    if 2 * cls.size + 2 > min(h, w):
        raise ConfigError(f"shape of half-size {cls.size} does not fit in {h}x{w} frames")
    rng = clip_rng(seed, index)
    start = np.array([(h - 1) / 2.0, (w - 1) / 2.0]) + rng.uniform(-jitter, jitter, size=2)
    background = np.clip(BACKGROUND + 0.03 * rng.standard_normal((3, h, w)), 0.0, 1.0)
    # motion is defined on a 30-frame timeline; longer clips move proportionally slower
    t = np.arange(frames) * (REFERENCE_FRAMES / frames)
    centres = start + cls.offset(t)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    color = np.array(cls.color).reshape(3, 1, 1)
    out = np.empty((frames, 3, h, w), dtype=np.float32)
    for i, (cy, cx) in enumerate(centres):
        m = _coverage(cls.shape, yy, xx, cy, cx, cls.size)
        out[i] = background * (1 - m) + color * m

    audio = class_audio(cls.class_id) + AUDIO_NOISE * rng.standard_normal((AUDIO_WINDOWS, AUDIO_DIM))
    cid = clip_id if clip_id is not None else f"c{cls.class_id:02d}_{index:05d}"
    return VideoClip(out, audio.astype(np.float32), frozenset([cls.class_id]), cid)


def class_audio(class_id: int, windows: int = AUDIO_WINDOWS, dim: int = AUDIO_DIM) -> np.ndarray:
    """Noise-free sinusoid-bank coefficients for a class."""
    d = np.arange(dim) + 0.5
    wnd = np.arange(windows)[:, None]
    freq = 1.0 + class_id
    return 0.5 * np.sin(2 * np.pi * freq * d / dim + 2 * np.pi * wnd / windows)


# ---- binary clip format ----

def encode_clip(clip: VideoClip) -> bytes:
    t, c, h, w = clip.frames.shape
    n_audio, a_dim = clip.audio_features.shape
    header = HEADER.pack(MAGIC, FORMAT_VERSION, t, c, h, w, n_audio, a_dim)
    return header + clip.frames.astype("<f4").tobytes() + clip.audio_features.astype("<f4").tobytes()


def decode_header(buf: bytes) -> dict:
    if len(buf) < HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {HEADER.size} bytes", len(buf))
    magic, version, t, c, h, w, n_audio, a_dim = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    return dict(frames=t, channels=c, height=h, width=w, audio_windows=n_audio, audio_dim=a_dim)


def decode_clip(buf: bytes, clip_id: str = "", labels=()) -> VideoClip:
    hd = decode_header(buf)
    n_frame = hd["frames"] * hd["channels"] * hd["height"] * hd["width"]
    n_audio = hd["audio_windows"] * hd["audio_dim"]
    expected = HEADER.size + 4 * (n_frame + n_audio)
    if len(buf) != expected:
        raise FormatError(f"payload length {len(buf) - HEADER.size} does not match header dims "
                          f"(expected {expected - HEADER.size})", min(len(buf), expected))
    frames = np.frombuffer(buf, "<f4", n_frame, HEADER.size).reshape(
        hd["frames"], hd["channels"], hd["height"], hd["width"])
    audio = np.frombuffer(buf, "<f4", n_audio, HEADER.size + 4 * n_frame).reshape(hd["audio_windows"], hd["audio_dim"])
    return VideoClip(frames.astype(np.float32), audio.astype(np.float32), frozenset(labels), clip_id)


def write_clip(path, clip: VideoClip) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_clip(clip))


def read_clip(path, clip_id: str | None = None, labels=()) -> VideoClip:
    path = Path(path)
    return decode_clip(path.read_bytes(), clip_id if clip_id is not None else path.stem, labels)


# ---- datasets ----

@dataclass
class ClipEntry:
    clip_id: str
    path: str | None
    labels: list[int]
    frames: int
    dims: list[int]  # C, H, W
    split: str


@dataclass
class DatasetManifest:
    version: int
    classes: list[SynthClass]
    clips: list[ClipEntry]
    seed: int
    frames: int = 30
    dims: tuple[int, int] = (32, 32)
    root: str | None = field(default=None, compare=False)
    jitter: float = 7.0

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "frames": self.frames,
            "dims": list(self.dims),
            "jitter": self.jitter,
            "classes": [c.to_json() for c in self.classes],
            "clips": [asdict(e) for e in self.clips],
        }

    @classmethod
    def from_json(cls, d: dict, root=None) -> "DatasetManifest":
        return cls(d["version"], [SynthClass.from_json(c) for c in d["classes"]],
                   [ClipEntry(**e) for e in d["clips"]], d["seed"], d.get("frames", 30),
                   tuple(d.get("dims", (32, 32))), None if root is None else str(root), d.get("jitter", 7.0))

    def checksum(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def split(self, name: str) -> list[ClipEntry]:
        return [e for e in self.clips if e.split == name]

    def class_by_id(self) -> dict[int, SynthClass]:
        return {c.class_id: c for c in self.classes}


def _split_counts(n: int, ratios) -> list[int]:
    counts = [int(math.floor(n * r + 1e-9)) for r in ratios]
    # remainder goes to the first split
    counts[0] += n - sum(counts)
    return counts


def generate_dataset(classes: list[SynthClass], clips_per_class: int, ratios=(0.8, 0.1, 0.1), seed: int = 0,
                     frames: int = 30, dims=(32, 32), out_dir=None, jitter: float = 7.0) -> DatasetManifest:
    """Stratified train/val/test dataset; writes clip files and ``manifest.json`` if ``out_dir`` is given."""
    if not classes:
        raise ConfigError("class list is empty")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    counts = _split_counts(clips_per_class, ratios)
    names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        (root / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for cls in classes:
        for j in range(clips_per_class):
            cid = f"c{cls.class_id:02d}_{j:05d}"
            path = None
            if root is not None:
                path = f"clips/{cid}.tslb"
                write_clip(root / path, generate_clip(cls, frames, dims, seed, index, cid, jitter))
            entries.append(ClipEntry(cid, path, [cls.class_id], frames, [3, *dims], names[j]))
            index += 1
    manifest = DatasetManifest(MANIFEST_VERSION, list(classes), entries, seed, frames, tuple(dims),
                               None if root is None else str(root), jitter)
    if root is not None:
        save_manifest(manifest, root / "manifest.json")
    return manifest


def iter_clips(manifest: DatasetManifest, split: str | None = None):
    """Yield clips of a split, reading files when present and regenerating otherwise."""
    by_id = manifest.class_by_id()
    for i, e in enumerate(manifest.clips):
        if split is not None and e.split != split:
            continue
        if e.path is not None and manifest.root is not None:
            yield read_clip(Path(manifest.root) / e.path, e.clip_id, e.labels)
        else:
            yield generate_clip(by_id[e.labels[0]], e.frames, tuple(e.dims[1:]), manifest.seed, i, e.clip_id,
                                manifest.jitter)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1))


def load_manifest(path, validate: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = DatasetManifest.from_json(json.loads(path.read_text()), root=path.parent)
    if validate:
        validate_manifest(manifest)
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check every referenced file exists and its header matches the declared dims."""
    if manifest.version != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {manifest.version}", 0)
    root = Path(manifest.root or ".")
    for e in manifest.clips:
        if e.path is None:
            continue
        p = root / e.path
        if not p.exists():
            raise FileNotFoundError(f"clip file missing: {p}")
        buf = p.read_bytes()
        hd = decode_header(buf)
        declared = (e.frames, *e.dims)
        actual = (hd["frames"], hd["channels"], hd["height"], hd["width"])
        if declared != actual:
            raise FormatError(f"{e.clip_id}: header dims {actual} differ from manifest {declared}", 8)
        expected = HEADER.size + 4 * (math.prod(actual) + hd["audio_windows"] * hd["audio_dim"])
        if len(buf) != expected:
            raise FormatError(f"{e.clip_id}: file length {len(buf)} inconsistent with header (expected {expected})",
                              min(len(buf), expected))
