"""The three feature streams: spatial, temporal (slow fusion + NetVLAD) and audio.

All stream modules work on batches; the module-level ``*_forward`` helpers
wrap a single item.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .autodiff.optim import uniform_init

MAX_FRAMES = 300
STREAMS = ("spatial", "temporal", "audio")


@dataclass
class VideoClip:
    """A labelled clip.

    ``frames`` is ``(T, 3, H, W)`` with values in [0, 1]; ``audio_features`` is
    ``(N, A)`` and may have ``N == 0``. Both are stored as float32, the
    on-disk precision, and promoted to float64 on entry to a network.
    """

    frames: np.ndarray
    audio_features: np.ndarray
    labels: frozenset = frozenset()
    clip_id: str = ""

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        audio = np.asarray(self.audio_features, dtype=np.float32)
        if audio.size == 0 and audio.ndim < 2:
            audio = audio.reshape(0, 0)
        self.audio_features = np.ascontiguousarray(audio)
        self.labels = frozenset(int(c) for c in self.labels)
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise DimensionError(f"frames must be (T, 3, H, W), got {self.frames.shape}")
        if not 1 <= self.frames.shape[0] <= MAX_FRAMES:
            raise ValueError(f"clip {self.clip_id!r}: frame count {self.frames.shape[0]} outside [1, {MAX_FRAMES}]")
        if self.audio_features.ndim != 2:
            raise DimensionError(f"audio features must be (N, A), got {self.audio_features.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])


@dataclass
class StreamEmbedding:
    vector: Tensor
    stream: str

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")


@dataclass(frozen=True)
class SamplerConfig:
    sample_count: int = 30
    stride: int = 10
    offset: int = 0

    def __post_init__(self):
        if self.sample_count < 1 or self.stride < 1 or self.offset < 0:
            raise ValueError(f"invalid sampler config {self}")


def median_index(n: int) -> int:
    """Lower median: index ``(n - 1) // 2``."""
    if n < 1:
        raise ValueError("empty clip has no median frame")
    return (n - 1) // 2


def median_frame(clip: VideoClip) -> np.ndarray:
    return clip.frames[median_index(clip.num_frames)]


def sample_indices(n: int, cfg: SamplerConfig) -> np.ndarray:
    """``offset + k*stride`` for k < sample_count, clamped to the last frame."""
    if n < 1:
        raise ValueError("cannot sample from an empty clip")
    idx = cfg.offset + cfg.stride * np.arange(cfg.sample_count)
    return np.minimum(idx, n - 1)


def sample_frames(clip: VideoClip, cfg: SamplerConfig) -> np.ndarray:
    return clip.frames[sample_indices(clip.num_frames, cfg)]


def sampler_for_rate(n_frames: int, rate: int, offset: int = 0) -> SamplerConfig:
    """Take ``rate`` frames spread evenly over a clip of ``n_frames``."""
    if not 1 <= rate <= n_frames:
        raise ValueError(f"sampling rate {rate} infeasible for {n_frames}-frame clips")
    return SamplerConfig(sample_count=rate, stride=n_frames // rate, offset=offset)


def image_as_clip(image, repeat: int = 30, clip_id: str = "", labels=()) -> VideoClip:
    """Repeat a still ``(3, H, W)`` image into a clip with no audio."""
    if repeat < 1:
        raise ValueError("repeat must be positive")
    image = np.asarray(image, dtype=np.float32)
    frames = np.broadcast_to(image, (repeat, *image.shape))
    return VideoClip(frames, np.zeros((0, 0), np.float32), frozenset(labels), clip_id)


class Module:
    """Holds named parameter tensors; children are merged with a dotted prefix."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self._params)
        for cname, child in self._children.items():
            for k, v in child.parameters().items():
                out[f"{cname}.{k}"] = v
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int, gain: float = 1.0, zero: bool = False):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero else uniform_init(rng, (n_in, n_out), n_in, gain)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(n_out))

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """3x3 same-padded conv, relu, 2x2 max pool."""

    def __init__(self, rng, c_in: int, c_out: int):
        super().__init__()
        self.kernel = self.add_param("kernel", uniform_init(rng, (c_out, c_in, 3, 3), c_in * 9, math.sqrt(2)))
        self.bias = self.add_param("bias", np.zeros(c_out))

    def __call__(self, x):
        return ad.max_pool2d(ad.relu(ad.conv2d(x, self.kernel, 1, 1, self.bias)), 2)


def _check_images(x: np.ndarray | Tensor, hw: tuple[int, int], who: str) -> None:
    shape = x.shape
    if len(shape) != 4 or shape[1] != 3 or tuple(shape[2:]) != tuple(hw):
        raise DimensionError(f"{who}: expected (N, 3, {hw[0]}, {hw[1]}) input, got {tuple(shape)}")


class SpatialEncoder(Module):
    """One conv block per entry of ``channels``, each halving the image, then a linear map.

    Stands in for a pretrained ResNet; pretraining is done by the harness.
    """

    def __init__(self, rng, image_hw=(32, 32), channels=(8, 16, 32), out_dim: int = 128, zero_head: bool = False):
        super().__init__()
        h, w = image_hw
        div = 2 ** len(channels)
        if h % div or w % div:
            raise ValueError(f"image dims must be multiples of {div}, got {image_hw}")
        self.image_hw = (h, w)
        c_prev = 3
        self.blocks = []
        for i, c in enumerate(channels):
            self.blocks.append(self.add_child(f"block{i}", ConvBlock(rng, c_prev, c)))
            c_prev = c
        self.flat_dim = c_prev * (h // div) * (w // div)
        self.head = self.add_child("head", Linear(rng, self.flat_dim, out_dim, zero=zero_head))
        self.out_dim = out_dim

    def __call__(self, images) -> Tensor:
        _check_images(images, self.image_hw, "SpatialEncoder")
        x = images
        for block in self.blocks:
            x = block(x)
        return self.head(ad.reshape(x, (x.shape[0], self.flat_dim)))


LUMA = np.array([0.299, 0.587, 0.114])
FRAME_PREPROCESS = ("rgb", "luma", "standardized")


def standardize_frames(images, eps: float = 1e-4) -> Tensor:
    """Per-image, per-channel ``(x - mean) / sqrt(var + eps)`` over the spatial axes."""
    x = ad.as_tensor(images)
    centred = ad.sub(x, ad.mean(x, axis=(-2, -1), keepdims=True))
    var = ad.mean(ad.square(centred), axis=(-2, -1), keepdims=True)
    return ad.div(centred, ad.sqrt(ad.add(var, eps)))


class FrameEncoder(Module):
    """Per-frame encoder of the temporal stream, run on 2x downsampled frames.

    ``preprocess`` is ``"rgb"`` (raw frames), ``"luma"`` (luminance only) or
    ``"standardized"`` (each frame channel shifted to zero mean and unit
    variance, which removes per-channel gain and offset).
    """

    def __init__(self, rng, image_hw=(32, 32), channels=(8, 16), out_dim: int = 64, preprocess: str = "rgb"):
        super().__init__()
        h, w = image_hw
        div = 2 * 2 ** len(channels)
        if h % div or w % div:
            raise ValueError(f"image dims must be multiples of {div}, got {image_hw}")
        self.image_hw = (h, w)
        if preprocess not in FRAME_PREPROCESS:
            raise ValueError(f"preprocess must be one of {FRAME_PREPROCESS}, got {preprocess!r}")
        self.preprocess = preprocess
        c_prev = 1 if preprocess == "luma" else 3
        self.blocks = []
        for i, c in enumerate(channels):
            self.blocks.append(self.add_child(f"block{i}", ConvBlock(rng, c_prev, c)))
            c_prev = c
        self.flat_dim = c_prev * (h // div) * (w // div)
        self.head = self.add_child("head", Linear(rng, self.flat_dim, out_dim, gain=math.sqrt(2)))
        self.out_dim = out_dim

    def __call__(self, images) -> Tensor:
        _check_images(images, self.image_hw, "FrameEncoder")
        x = images
        if self.preprocess == "luma":
            x = ad.tsum(ad.mul(x, LUMA.reshape(1, 3, 1, 1)), axis=1, keepdims=True)
        elif self.preprocess == "standardized":
            x = standardize_frames(x)
        x = ad.avg_pool2d(x, 2)
        for block in self.blocks:
            x = block(x)
        return ad.relu(self.head(ad.reshape(x, (x.shape[0], self.flat_dim))))


def fusion_schedule(n: int) -> list[tuple[int, np.ndarray]]:
    """Merge levels for ``n`` inputs as ``(window, starts)`` pairs.

    Each level shrinks the sequence to ``ceil(n/3)`` outputs (one output once
    ``n <= 4``) using overlapping windows of ``ceil(n/m) + 1`` steps with
    evenly spread start positions. 30 frames give 30 -> 10 -> 4 -> 1.
    """
    levels = []
    while n > 1:
        m = math.ceil(n / 3) if n > 4 else 1
        w = n if m == 1 else min(n, math.ceil(n / m) + 1)
        if m == 1:
            starts = np.zeros(1, dtype=np.intp)
        else:
            starts = np.floor(np.arange(m) * (n - w) / (m - 1) + 0.5).astype(np.intp)
        levels.append((w, starts))
        n = m
    return levels


class SlowFusion(Module):
    """Hierarchical temporal merge of per-frame encodings.

    Level ``l`` computes ``relu(sum_t h[start_j + t] @ W_l[t] + b_l)`` for each
    window ``j``. With ``jitter=0`` the weights start as ``I / window`` so the
    merge averages its inputs.
    """

    def __init__(self, rng, n_frames: int, dim: int, jitter: float = 0.1):
        super().__init__()
        self.n_frames = n_frames
        self.dim = dim
        self.levels = fusion_schedule(n_frames)
        self.weights = []
        self.biases = []
        for i, (w, _) in enumerate(self.levels):
            W = np.tile(np.eye(dim) / w, (w, 1))
            if jitter:
                W = W + jitter * uniform_init(rng, W.shape, w * dim)
            self.weights.append(self.add_param(f"level{i}.weight", W))
            self.biases.append(self.add_param(f"level{i}.bias", np.zeros(dim)))

    def __call__(self, encodings) -> Tensor:
        """``encodings``: ``(B, n_frames, dim)`` -> ``(B, dim)``."""
        if encodings.ndim != 3 or encodings.shape[1] != self.n_frames or encodings.shape[2] != self.dim:
            raise DimensionError(
                f"slow fusion expects (B, {self.n_frames}, {self.dim}), got {tuple(encodings.shape)}"
            )
        h = encodings
        b = h.shape[0]
        for (w, starts), W, bias in zip(self.levels, self.weights, self.biases):
            idx = starts[:, None] + np.arange(w)[None, :]
            g = ad.take(h, idx, axis=1)  # (B, m, w, dim)
            g = ad.reshape(g, (b, len(starts), w * self.dim))
            h = ad.relu(ad.linear(g, W, bias))
        return ad.reshape(h, (b, self.dim))


class NetVLAD(Module):
    """Soft-assignment VLAD pooling.

    ``a_k(x) = softmax_k(w_k . x + b_k)``, ``V_k = sum_i a_k(x_i) (x_i - c_k)``,
    then L2 normalisation of each ``V_k`` and of the flattened result.
    """

    def __init__(self, rng, dim: int, clusters: int):
        super().__init__()
        if clusters < 1:
            raise ValueError("NetVLAD needs at least one cluster")
        self.dim = dim
        self.clusters = clusters
        self.centers = self.add_param("centers", rng.uniform(-0.5, 0.5, size=(clusters, dim)))
        self.assign_weight = self.add_param("assign_weight", uniform_init(rng, (clusters, dim), dim))
        self.assign_bias = self.add_param("assign_bias", np.zeros(clusters))

    @property
    def out_dim(self) -> int:
        return self.clusters * self.dim

    def residuals(self, x) -> Tensor:
        """Unnormalised VLAD, ``(B, N, dim)`` -> ``(B, K, dim)``."""
        if x.ndim != 3 or x.shape[2] != self.dim:
            raise DimensionError(f"NetVLAD expects (B, N, {self.dim}), got {tuple(x.shape)}")
        if x.shape[1] < 1:
            raise ValueError("NetVLAD needs at least one descriptor")
        logits = ad.add(ad.matmul(x, ad.transpose(self.assign_weight)), self.assign_bias)
        a = ad.softmax(logits, axis=-1)  # (B, N, K)
        at = ad.transpose(a, (0, 2, 1))  # (B, K, N)
        weighted = ad.matmul(at, x)  # (B, K, dim)
        mass = ad.reshape(ad.tsum(a, axis=1), (x.shape[0], self.clusters, 1))
        return ad.sub(weighted, ad.mul(mass, self.centers))

    def __call__(self, x) -> Tensor:
        v = ad.l2_normalize(self.residuals(x), axis=-1)
        v = ad.reshape(v, (x.shape[0], self.out_dim))
        return ad.l2_normalize(v, axis=-1)


class TemporalStream(Module):
    """Sampled frames -> frame encoder -> slow fusion -> FC -> NetVLAD -> projection."""

    def __init__(self, rng, sampler: SamplerConfig, image_hw=(32, 32), feature_dim=64, clusters=8, out_dim=128,
                 channels=(8, 16), fusion_jitter: float = 0.1, preprocess: str = "rgb"):
        super().__init__()
        self.sampler = sampler
        self.encoder = self.add_child("encoder", FrameEncoder(rng, image_hw, channels, feature_dim, preprocess))
        self.fusion = self.add_child("fusion", SlowFusion(rng, sampler.sample_count, feature_dim, fusion_jitter))
        self.fc = self.add_child("fc", Linear(rng, feature_dim, feature_dim, gain=math.sqrt(2)))
        self.vlad = self.add_child("vlad", NetVLAD(rng, feature_dim, clusters))
        self.proj = self.add_child("proj", Linear(rng, self.vlad.out_dim, out_dim))
        self.out_dim = out_dim

    def fused(self, frames) -> Tensor:
        """``(B, T, 3, H, W)`` sampled frames -> ``(B, feature_dim)`` fused vector."""
        b, t = frames.shape[:2]
        flat = frames.reshape(b * t, *frames.shape[2:])
        enc = self.encoder(flat)
        return self.fusion(ad.reshape(enc, (b, t, enc.shape[-1])))

    def __call__(self, frames) -> Tensor:
        f = ad.relu(self.fc(self.fused(frames)))
        desc = ad.reshape(f, (f.shape[0], 1, f.shape[1]))
        return self.proj(self.vlad(desc))


class AudioStream(Module):
    """Per-window FC -> NetVLAD -> projection; clips without audio get the null embedding."""

    def __init__(self, rng, audio_dim=16, feature_dim=64, clusters=8, out_dim=128):
        super().__init__()
        self.audio_dim = audio_dim
        self.fc = self.add_child("fc", Linear(rng, audio_dim, feature_dim, gain=math.sqrt(2)))
        self.vlad = self.add_child("vlad", NetVLAD(rng, feature_dim, clusters))
        self.proj = self.add_child("proj", Linear(rng, self.vlad.out_dim, out_dim))
        self.out_dim = out_dim
        self.null_embedding = np.zeros(out_dim)

    def __call__(self, audio) -> Tensor:
        """``(B, N, A)`` with ``N >= 1`` -> ``(B, out_dim)``."""
        if audio.ndim != 3 or audio.shape[2] != self.audio_dim:
            raise DimensionError(f"audio stream expects (B, N, {self.audio_dim}), got {tuple(audio.shape)}")
        f = ad.relu(self.fc(audio))
        return self.proj(self.vlad(f))

    def embed_batch(self, audio_list: list[np.ndarray]) -> Tensor:
        """Embed clips with possibly different window counts, empty ones included."""
        b = len(audio_list)
        counts = [a.shape[0] for a in audio_list]
        if all(c == 0 for c in counts):
            return Tensor(np.tile(self.null_embedding, (b, 1)))
        if all(c == counts[0] for c in counts):
            return self(np.stack(audio_list).astype(np.float64))
        rows = []
        for a in audio_list:
            if a.shape[0] == 0:
                rows.append(Tensor(self.null_embedding[None]))
            else:
                rows.append(self(a[None].astype(np.float64)))
        return ad.concat(rows, axis=0)


def spatial_forward(encoder: SpatialEncoder, frame) -> StreamEmbedding:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise DimensionError(f"expected a (3, H, W) frame, got {frame.shape}")
    return StreamEmbedding(ad.reshape(encoder(frame[None]), (encoder.out_dim,)), "spatial")


def temporal_forward(stream: TemporalStream, clip: VideoClip, cfg: SamplerConfig | None = None) -> StreamEmbedding:
    cfg = cfg or stream.sampler
    frames = sample_frames(clip, cfg).astype(np.float64)
    return StreamEmbedding(ad.reshape(stream(frames[None]), (stream.out_dim,)), "temporal")


def audio_forward(stream: AudioStream, audio_features) -> StreamEmbedding:
    a = np.asarray(audio_features, dtype=np.float64)
    if a.size == 0:
        return StreamEmbedding(Tensor(stream.null_embedding.copy()), "audio")
    return StreamEmbedding(ad.reshape(stream(a[None]), (stream.out_dim,)), "audio")


def slow_fusion(encodings, fusion: SlowFusion) -> Tensor:
    """Fuse one clip's ``(n, dim)`` per-frame encodings into a ``dim`` vector."""
    enc = ad.as_tensor(encodings)
    if enc.ndim != 2:
        raise DimensionError(f"expected (n, dim) encodings, got {enc.shape}")
    return ad.reshape(fusion(ad.reshape(enc, (1, *enc.shape))), (fusion.dim,))


def netvlad(descriptors, layer: NetVLAD) -> Tensor:
    """Pool a list (or ``(N, F)`` array) of descriptors into a ``K*F`` vector."""
    if isinstance(descriptors, (list, tuple)):
        if not descriptors:
            raise ValueError("NetVLAD needs at least one descriptor")
        x = ad.stack(descriptors, axis=0)
    else:
        x = ad.as_tensor(descriptors)
    if x.shape[0] == 0:
        raise ValueError("NetVLAD needs at least one descriptor")
    return ad.reshape(layer(ad.reshape(x, (1, *x.shape))), (layer.out_dim,))
