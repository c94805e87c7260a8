"""Mixture-of-experts fusion of the stream embeddings, context gating and the classifier."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .streams import (
    FRAME_PREPROCESS,
    AudioStream,
    Linear,
    Module,
    SamplerConfig,
    SpatialEncoder,
    StreamEmbedding,
    TemporalStream,
    VideoClip,
    median_frame,
    sample_frames,
)

MODES = ("spatial_only", "two_stream", "three_stream")
MAX_PAIRS = 20


@dataclass(frozen=True)
class GateWeights:
    g_S: float
    g_T: float
    g_A: float

    def as_array(self) -> np.ndarray:
        return np.array([self.g_S, self.g_T, self.g_A])


@dataclass
class PredictionSet:
    """Up to 20 ``(class_id, confidence)`` pairs, highest confidence first."""

    item_id: str
    pairs: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.pairs) > MAX_PAIRS:
            raise ValueError(f"{self.item_id}: {len(self.pairs)} pairs exceeds {MAX_PAIRS}")
        if "," in self.item_id or "\n" in self.item_id:
            raise ValueError(f"item id {self.item_id!r} may not contain commas or newlines")
        self.pairs = [(int(c), float(f)) for c, f in self.pairs]

    def to_line(self) -> str:
        return ",".join([self.item_id] + [f"{c}:{f:.6f}" for c, f in self.pairs])

    @classmethod
    def from_line(cls, line: str) -> "PredictionSet":
        parts = line.strip().split(",")
        pairs = []
        for tok in parts[1:]:
            c, f = tok.split(":")
            pairs.append((int(c), float(f)))
        return cls(parts[0], pairs)


def write_predictions(path, predictions: list[PredictionSet]) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(p.to_line() + "\n")


def read_predictions(path) -> list[PredictionSet]:
    with open(path) as fh:
        return [PredictionSet.from_line(line) for line in fh if line.strip()]


def top_k_pairs(confidences: np.ndarray, top_k: int) -> list[tuple[int, float]]:
    """Highest ``top_k`` confidences; equal confidences keep ascending class id."""
    order = np.argsort(-confidences, kind="stable")[:top_k]
    return [(int(c), float(confidences[c])) for c in order]


def _check_same_length(*vs):
    lengths = {v.shape[-1] for v in vs}
    if len(lengths) != 1:
        raise DimensionError(f"stream embeddings differ in length: {[v.shape for v in vs]}")


def gate_logits(vs, vt, va, gate: Linear) -> Tensor:
    _check_same_length(vs, vt, va)
    return gate(ad.concat([vs, vt, va], axis=-1))


def gates_from_logits(logits: Tensor, mode: str) -> Tensor:
    """Softmax over stream logits; ``two_stream`` drops the audio logit first."""
    if mode == "two_stream":
        return ad.softmax(logits[..., :2], axis=-1)
    return ad.softmax(logits, axis=-1)


def combine(embeddings: list[Tensor], gates: Tensor) -> Tensor:
    """Gated sum ``sum_s g_s * V_s`` over a batch; ``gates`` is ``(B, S)``."""
    _check_same_length(*embeddings)
    out = None
    for s, v in enumerate(embeddings):
        term = ad.mul(v, gates[:, s:s + 1])
        out = term if out is None else ad.add(out, term)
    return out


def compute_gates(vs: StreamEmbedding, vt: StreamEmbedding, va: StreamEmbedding, gate: Linear) -> GateWeights:
    rows = [ad.reshape(v.vector, (1, -1)) for v in (vs, vt, va)]
    g = gates_from_logits(gate_logits(*rows, gate), "three_stream").data[0]
    return GateWeights(*map(float, g))


def moe_combine(vs: StreamEmbedding, vt: StreamEmbedding, va: StreamEmbedding, g: GateWeights) -> Tensor:
    """``V = V_S g_S + V_T g_T + V_A g_A``."""
    _check_same_length(vs.vector, vt.vector, va.vector)
    return ad.add(ad.add(ad.mul(vs.vector, g.g_S), ad.mul(vt.vector, g.g_T)), ad.mul(va.vector, g.g_A))


class ContextGate(Module):
    """``out = sigmoid(W v + b) * v`` elementwise."""

    def __init__(self, rng, dim: int):
        super().__init__()
        self.dim = dim
        bound = math.sqrt(3.0 / dim)
        self.weight = self.add_param("weight", rng.uniform(-bound, bound, size=(dim, dim)))
        self.bias = self.add_param("bias", np.zeros(dim))

    def __call__(self, v) -> Tensor:
        if v.shape[-1] != self.dim:
            raise DimensionError(f"context gate of size {self.dim} got vector of length {v.shape[-1]}")
        gate = ad.sigmoid(ad.add(ad.matmul(v if v.ndim > 1 else ad.reshape(v, (1, self.dim)),
                                           ad.transpose(self.weight)), self.bias))
        if v.ndim == 1:
            gate = ad.reshape(gate, (self.dim,))
        return ad.mul(gate, v)


def context_gate(v, params: ContextGate) -> Tensor:
    return params(v)


def classify(v, classifier: Linear, item_id: str = "", top_k: int = MAX_PAIRS, multilabel: bool = False) -> PredictionSet:
    """Per-class confidences of a single fused vector, as a PredictionSet."""
    logits = classifier(ad.reshape(ad.as_tensor(v), (1, -1))).data[0]
    return PredictionSet(item_id, top_k_pairs(confidences(logits, multilabel), _clamp_top_k(top_k, logits.size)))


def confidences(logits: np.ndarray, multilabel: bool) -> np.ndarray:
    if multilabel:
        return ad.sigmoid(logits).data
    return ad.softmax(logits, axis=-1).data


def _clamp_top_k(top_k: int, n_classes: int) -> int:
    k = min(top_k, MAX_PAIRS)
    if k > n_classes:
        warnings.warn(f"top_k={top_k} exceeds {n_classes} classes; emitting {n_classes} pairs", stacklevel=3)
        k = n_classes
    return k


@dataclass
class ModelConfig:
    num_classes: int
    embed_dim: int = 128
    feature_dim: int = 64
    clusters: int = 8
    audio_dim: int = 16
    image_hw: tuple[int, int] = (32, 32)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    spatial_channels: tuple[int, ...] = (8, 16, 32)
    frame_channels: tuple[int, ...] = (8, 16)
    fusion_jitter: float = 0.1
    multilabel: bool = False
    # "fused": gate V before the classifier; "logits": gate the class scores
    context_gate_on: str = "fused"
    # rescale each stream embedding to norm sqrt(embed_dim) before gating
    normalize_streams: bool = True
    # preprocessing in front of the temporal frame encoder: rgb | luma | standardized
    temporal_input: str = "standardized"

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        self.spatial_channels = tuple(self.spatial_channels)
        self.frame_channels = tuple(self.frame_channels)
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if self.context_gate_on not in ("fused", "logits"):
            raise ValueError(f"context_gate_on must be 'fused' or 'logits', got {self.context_gate_on!r}")
        if self.temporal_input not in FRAME_PREPROCESS:
            raise ValueError(f"temporal_input must be one of {FRAME_PREPROCESS}, got {self.temporal_input!r}")


@dataclass
class ClipBatch:
    median: np.ndarray  # (B, 3, H, W)
    sampled: np.ndarray  # (B, T, 3, H, W)
    audio: list[np.ndarray]
    labels: list[frozenset]
    ids: list[str]

    def __len__(self):
        return len(self.ids)


def make_batch(clips: list[VideoClip], sampler: SamplerConfig, need_sampled: bool = True) -> ClipBatch:
    median = np.stack([median_frame(c) for c in clips]).astype(np.float64)
    if need_sampled:
        sampled = np.stack([sample_frames(c, sampler) for c in clips]).astype(np.float64)
    else:
        sampled = np.zeros((len(clips), 0))
    return ClipBatch(median, sampled, [c.audio_features for c in clips], [c.labels for c in clips],
                     [c.clip_id for c in clips])


class TriStreamModel(Module):
    """Spatial, temporal and audio streams fused by input-dependent gates."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.spatial = self.add_child("spatial", SpatialEncoder(rng, c.image_hw, c.spatial_channels, c.embed_dim))
        self.temporal = self.add_child("temporal", TemporalStream(
            rng, c.sampler, c.image_hw, c.feature_dim, c.clusters, c.embed_dim, c.frame_channels, c.fusion_jitter,
            c.temporal_input))
        self.audio = self.add_child("audio", AudioStream(rng, c.audio_dim, c.feature_dim, c.clusters, c.embed_dim))
        self.gate = self.add_child("gate", Linear(rng, 3 * c.embed_dim, 3, zero=True))
        gated = c.embed_dim if c.context_gate_on == "fused" else c.num_classes
        self.context = self.add_child("context", ContextGate(rng, gated))
        self.classifier = self.add_child("classifier", Linear(rng, c.embed_dim, c.num_classes))

    def parameters_for(self, mode: str) -> dict[str, Tensor]:
        """Parameters that receive gradient in ``mode``."""
        skip = {"spatial_only": ("temporal.", "audio.", "gate."), "two_stream": ("audio.",), "three_stream": ()}[mode]
        return {k: v for k, v in self.parameters().items() if not k.startswith(skip)}

    def head(self, v) -> Tensor:
        """Context gating and classifier applied to fused vectors ``(B, D)`` -> logits."""
        if self.config.context_gate_on == "fused":
            return self.classifier(self.context(v))
        return self.context(self.classifier(v))

    def embed(self, stream: str, x) -> Tensor:
        """One stream's batch embedding: medians, sampled frames or a list of audio arrays."""
        if stream == "audio":
            e = self.audio.embed_batch(x)
        else:
            e = getattr(self, stream)(x)
        if self.config.normalize_streams:
            # the streams end in very different scales; unnormalised, the larger one wins the gate
            e = ad.l2_normalize(e, axis=1) * float(np.sqrt(self.config.embed_dim))
        return e

    def embeddings(self, batch: ClipBatch, mode: str) -> dict[str, Tensor]:
        out = {"spatial": self.embed("spatial", batch.median)}
        b = len(batch)
        if mode in ("two_stream", "three_stream"):
            out["temporal"] = self.embed("temporal", batch.sampled)
        if mode == "three_stream":
            out["audio"] = self.embed("audio", batch.audio)
        elif mode == "two_stream":
            out["audio"] = Tensor(np.tile(self.audio.null_embedding, (b, 1)))
        return out

    def forward(self, batch: ClipBatch, mode: str, return_aux: bool = False):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        emb = self.embeddings(batch, mode)
        gates = None
        if mode == "spatial_only":
            v = emb["spatial"]
        else:
            logits = gate_logits(emb["spatial"], emb["temporal"], emb["audio"], self.gate)
            gates = gates_from_logits(logits, mode)
            streams = [emb["spatial"], emb["temporal"]] + ([emb["audio"]] if mode == "three_stream" else [])
            v = combine(streams, gates)
        out = self.head(v)
        if return_aux:
            return out, {"embeddings": emb, "gates": gates, "fused": v}
        return out

    def loss(self, batch: ClipBatch, mode: str) -> Tensor:
        logits = self.forward(batch, mode)
        if self.config.multilabel:
            targets = np.zeros(logits.shape)
            for i, labels in enumerate(batch.labels):
                targets[i, sorted(labels)] = 1.0
            return ad.sigmoid_cross_entropy(logits, targets)
        return ad.softmax_cross_entropy(logits, [min(lab) for lab in batch.labels])

    def predict(self, batch: ClipBatch, mode: str, top_k: int = MAX_PAIRS) -> list[PredictionSet]:
        logits = self.forward(batch, mode).data
        k = _clamp_top_k(top_k, logits.shape[1])
        conf = confidences(logits, self.config.multilabel)
        return [PredictionSet(i, top_k_pairs(row, k)) for i, row in zip(batch.ids, conf)]


def forward_full(model: TriStreamModel, clip: VideoClip, mode: str, top_k: int = MAX_PAIRS) -> PredictionSet:
    batch = make_batch([clip], model.config.sampler, need_sampled=mode != "spatial_only")
    return model.predict(batch, mode, top_k)[0]
