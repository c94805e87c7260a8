"""Two-stage training (per-stream pretraining, then end-to-end), evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from ..autodiff import Adam, GradientTape, backward
from ..fusion import ClipBatch, PredictionSet, TriStreamModel, make_batch
from ..metrics import MetricReport, evaluate
from ..perturb import perturb_dataset
from ..streams import Linear, VideoClip, image_as_clip, median_frame
from ..synthdata import generate_dataset, iter_clips, load_manifest
from .config import ConfigError, ExperimentConfig, config_from_dict

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunRecord:
    config_hash: str
    mode: str
    dataset: str
    seeds: dict
    pretrain_losses: list[float] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)
    metrics: dict[str, dict] = field(default_factory=dict)
    best_epoch: int = 0
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def load_splits(config: ExperimentConfig, data_dir=None) -> dict[str, list[VideoClip]]:
    """Clips per split, read from ``data_dir`` or generated in memory from the config."""
    if data_dir is not None:
        manifest = load_manifest(data_dir)
    else:
        d = config.data
        manifest = generate_dataset(config.classes(), d.clips_per_class, tuple(d.splits), config.seeds.data,
                                    d.frames, (d.height, d.width), jitter=d.jitter)
    splits = {name: list(iter_clips(manifest, name)) for name in ("train", "val", "test")}
    empty = [name for name in ("train", "test") if not splits[name]]
    if empty:
        raise ConfigError(f"dataset has empty {' and '.join(empty)} split(s); raise clips_per_class")
    return splits


def batches(clips: list, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(clips)) if rng is None else rng.permutation(len(clips))
    for start in range(0, len(clips), batch_size):
        yield [clips[i] for i in order[start:start + batch_size]]


def _check_finite(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{stage}: non-finite loss {value} at epoch {epoch}; aborting")


STREAMS_FOR_MODE = {"spatial_only": ("spatial",), "two_stream": ("spatial", "temporal"),
                    "three_stream": ("spatial", "temporal", "audio")}


def _stream_inputs(model: TriStreamModel, stream: str, chunk: list[VideoClip], rng: np.random.Generator):
    if stream == "spatial":
        # still-image pretraining: one random frame per clip
        return np.stack([c.frames[rng.integers(c.num_frames)] for c in chunk]).astype(np.float64)
    if stream == "temporal":
        return make_batch(chunk, model.config.sampler).sampled
    return [c.audio_features for c in chunk]


def pretrain_stream(config: ExperimentConfig, train_clips: list[VideoClip], stream: str) -> tuple[dict, list[float]]:
    """Train one stream on its own with a throwaway linear head.

    The spatial encoder is trained as a still-image classifier for
    ``training.pretrain_epochs``; the temporal and audio streams get
    ``training.warmup_epochs`` on their own inputs. Returns the stream state
    and the per-epoch mean loss.
    """
    model = TriStreamModel(config.model_config(), seed=config.seeds.init)
    module = getattr(model, stream)
    head = Linear(np.random.default_rng([config.seeds.init, 1]), config.model.embed_dim, config.data.num_classes)
    params = {**{f"stream.{k}": v for k, v in module.parameters().items()},
              **{f"head.{k}": v for k, v in head.parameters().items()}}
    o, t = config.optimizer, config.training
    opt = Adam(params, o.lr, o.beta1, o.beta2, o.eps)
    epochs = t.pretrain_epochs if stream == "spatial" else t.warmup_epochs
    losses = []
    for epoch in range(epochs):
        rng = np.random.default_rng([config.seeds.init, 2, epoch])
        total, count = 0.0, 0
        for chunk in batches(train_clips, t.batch_size, rng):
            x = _stream_inputs(model, stream, chunk, rng)
            labels = [min(c.labels) for c in chunk]
            with GradientTape() as tape:
                loss = ad.softmax_cross_entropy(head(model.embed(stream, x)), labels)
            _check_finite(loss.item(), f"{stream} pretraining", epoch)
            opt.step(backward(loss, tape))
            total += loss.item() * len(chunk)
            count += len(chunk)
        losses.append(total / max(count, 1))
        log.info("%s pretrain epoch %d loss %.4f", stream, epoch, losses[-1])
    return module.state_dict(), losses


def pretrain_streams(config: ExperimentConfig, train_clips: list[VideoClip], mode: str | None = None,
                     cache: dict | None = None) -> dict[str, tuple[dict, list[float]]]:
    """Stage one for every stream ``mode`` uses; ``cache`` lets modes share results."""
    cache = {} if cache is None else cache
    for stream in STREAMS_FOR_MODE[mode or config.mode]:
        if stream not in cache:
            cache[stream] = pretrain_stream(config, train_clips, stream)
    return {s: cache[s] for s in STREAMS_FOR_MODE[mode or config.mode]}


def dataset_loss(model: TriStreamModel, clips: list[VideoClip], mode: str, batch_size: int = 64) -> float:
    total = 0.0
    for chunk in batches(clips, batch_size):
        b = make_batch(chunk, model.config.sampler, need_sampled=mode != "spatial_only")
        total += model.loss(b, mode).item() * len(chunk)
    return total / len(clips)


def train_model(config: ExperimentConfig, splits: dict[str, list[VideoClip]], pretrained: dict | None = None,
                dataset: str = "synthetic") -> tuple[TriStreamModel, RunRecord]:
    """Train ``config.mode`` end to end with early stopping on validation loss.

    ``pretrained`` maps stream names to ``(state, losses)`` from stage one.
    """
    t0 = time.time()
    mode = config.mode
    model = TriStreamModel(config.model_config(), seed=config.seeds.init)
    pre_losses = []
    for stream, (state, losses) in (pretrained or {}).items():
        if stream in STREAMS_FOR_MODE[mode]:
            getattr(model, stream).load_state_dict(state)
            pre_losses.extend(losses)
    params = model.parameters_for(mode)
    o, t = config.optimizer, config.training
    opt = Adam(params, o.lr, o.beta1, o.beta2, o.eps)
    record = RunRecord(config.config_hash(), mode, dataset, asdict(config.seeds), pre_losses)
    need_sampled = mode != "spatial_only"
    val = splits.get("val") or []
    best, best_state, stale = math.inf, model.state_dict(), 0
    for epoch in range(t.epochs):
        rng = np.random.default_rng([config.seeds.init, 3, epoch])
        total, count = 0.0, 0
        for chunk in batches(splits["train"], t.batch_size, rng):
            b = make_batch(chunk, model.config.sampler, need_sampled)
            with GradientTape() as tape:
                loss = model.loss(b, mode)
            _check_finite(loss.item(), "training", epoch)
            opt.step(backward(loss, tape))
            total += loss.item() * len(chunk)
            count += len(chunk)
        train_loss = total / max(count, 1)
        val_loss = dataset_loss(model, val, mode) if val else train_loss
        _check_finite(val_loss, "validation", epoch)
        record.losses.append({"epoch": epoch, "train": train_loss, "val": val_loss})
        log.info("%s epoch %d train %.4f val %.4f", mode, epoch, train_loss, val_loss)
        if val_loss < best:
            best, best_state, stale = val_loss, model.state_dict(), 0
            record.best_epoch = epoch
        else:
            stale += 1
            if stale >= t.patience:
                break
    model.load_state_dict(best_state)
    record.wall_clock = time.time() - t0
    return model, record


def predict_clips(model: TriStreamModel, clips: list[VideoClip], mode: str, top_k: int = 20,
                  batch_size: int = 64) -> list[PredictionSet]:
    out = []
    for chunk in batches(clips, batch_size):
        b: ClipBatch = make_batch(chunk, model.config.sampler, need_sampled=mode != "spatial_only")
        out.extend(model.predict(b, mode, min(top_k, model.config.num_classes)))
    return out


def as_image_clips(clips: list[VideoClip], repeat: int = 30) -> list[VideoClip]:
    """Still-image version of a dataset: each clip's median frame repeated ``repeat`` times."""
    return [image_as_clip(median_frame(c), repeat, c.clip_id, c.labels) for c in clips]


def evaluate_clips(model: TriStreamModel, clips: list[VideoClip], mode: str, k: int = 20,
                   table=None, seed: int = 0, mags=None) -> tuple[MetricReport, list]:
    """Metrics on ``clips``; with a ``table`` the clips are perturbed first.

    Returns the report and the perturbation replay log (empty when clean).
    """
    records = []
    if table is not None:
        kwargs = {} if mags is None else {"mags": mags}
        clips, records = perturb_dataset(clips, table, seed, **kwargs)
    preds = predict_clips(model, clips, mode, top_k=20)
    truth = {c.clip_id: c.labels for c in clips}
    return evaluate(preds, truth, k), records


def save_checkpoint(path, model: TriStreamModel, config: ExperimentConfig) -> None:
    state = model.state_dict()
    np.savez(path, __config__=np.array(json.dumps(config.to_dict())), **state)


def load_checkpoint(path) -> tuple[TriStreamModel, ExperimentConfig]:
    with np.load(path, allow_pickle=False) as z:
        config = config_from_dict(json.loads(str(z["__config__"])))
        state = {k: z[k] for k in z.files if k != "__config__"}
    model = TriStreamModel(config.model_config(), seed=config.seeds.init)
    model.load_state_dict(state)
    return model, config
