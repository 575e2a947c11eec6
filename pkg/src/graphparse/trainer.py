"""Training: poly schedule, augmentation, one-dataset-per-batch SGD loops, checkpoints.

Every stochastic choice draws from a stream keyed by ``(seed, tag, index)``,
so a run is a pure function of its configuration and seed: the dataset
schedule (``"schedule"``), each dataset's per-epoch order
(``"order.<dataset>", epoch``) and each sample's augmentation
(``"augment.<dataset>", draw``).
"""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

from . import numcore as nc
from . import rng
from .errors import (BadMagicError, CheckpointError, ConfigError, TruncatedCheckpointError,
                     UsageError, VersionMismatchError)
from .model import ModelConfig, SegmentationModel
from .segnet import resize_bilinear_array
from .synthdata import Sample
from .taxonomy import LabelTaxonomy, flip_permutation, load_taxonomy, projection_lut

log = logging.getLogger(__name__)

MAGIC = b"GRFY"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 5e-4
    poly_power: float = 0.9
    batch_size: int = 8
    epochs: int = 1
    steps: int = 0                       # > 0 overrides epochs
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    augment: bool = True
    resolution: int = 64
    seed: int = 0

    def validate(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.poly_power > 0:
            raise ConfigError(f"poly_power must be positive, got {self.poly_power}")
        if self.batch_size < 1 or self.epochs < 0 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and epochs/steps >= 0")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError(f"bad scale range [{self.scale_min}, {self.scale_max}]")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")

    def total_steps(self, num_samples: int) -> int:
        if self.steps:
            return self.steps
        return max(1, self.epochs * num_samples // self.batch_size)


def poly_lr(step: int, max_steps: int, config: TrainConfig = TrainConfig()) -> float:
    """base_lr * (1 - step / max_steps) ** poly_power."""
    if max_steps <= 0 or not 0 <= step <= max_steps:
        raise UsageError(f"poly_lr needs 0 <= step <= max_steps, got step={step}, "
                         f"max_steps={max_steps}")
    return config.base_lr * (1.0 - step / max_steps) ** config.poly_power


# ------------------------------------------------------------ augmentation


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # pixel-centre sampling, integer arithmetic only
    return np.minimum((2 * np.arange(n_out) + 1) * n_in // (2 * n_out), n_in - 1)


def _finest(masks: Mapping[str, np.ndarray], taxonomy: LabelTaxonomy) -> str:
    return max(masks, key=lambda ds: (taxonomy.num_labels(ds), ds))


def augment(sample: Sample, config: TrainConfig, rs: np.random.Generator,
            taxonomy: Optional[LabelTaxonomy] = None, scale: Optional[float] = None,
            offset: Optional[Tuple[int, int]] = None, flip: Optional[bool] = None) -> Sample:
    """Random rescale, crop (or background pad) to ``config.resolution`` and mirror.

    ``scale``, ``offset`` and ``flip`` override the random draws.  Only the
    finest mask is moved; coarser masks are re-derived from it.
    """
    taxonomy = taxonomy or load_taxonomy()
    res = config.resolution
    s = rs.uniform(config.scale_min, config.scale_max) if scale is None else scale
    h, w = sample.image.shape[:2]
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    image = resize_bilinear_array(sample.image, nh, nw) if (nh, nw) != (h, w) else sample.image
    src = _finest(sample.masks, taxonomy)
    mask = sample.masks[src][_nearest_index(h, nh)][:, _nearest_index(w, nw)]

    if offset is None:
        # crop origin in the scaled image; negative means padding on that side
        oy = int(rs.integers(min(0, nh - res), max(0, nh - res) + 1))
        ox = int(rs.integers(min(0, nw - res), max(0, nw - res) + 1))
    else:
        oy, ox = offset
    out_img = np.zeros((res, res, 3), image.dtype)
    out_mask = np.zeros((res, res), mask.dtype)
    ys, xs = max(0, oy), max(0, ox)
    ye, xe = min(nh, oy + res), min(nw, ox + res)
    if ye > ys and xe > xs:
        out_img[ys - oy:ye - oy, xs - ox:xe - ox] = image[ys:ye, xs:xe]
        out_mask[ys - oy:ye - oy, xs - ox:xe - ox] = mask[ys:ye, xs:xe]

    do_flip = (rs.random() < config.flip_prob) if flip is None else flip
    if do_flip:
        out_img = out_img[:, ::-1]
        out_mask = flip_permutation(taxonomy, src).astype(out_mask.dtype)[out_mask[:, ::-1]]
    masks = {src: np.ascontiguousarray(out_mask)}
    for ds in sample.masks:
        if ds != src:
            masks[ds] = projection_lut(taxonomy, src, ds).astype(out_mask.dtype)[out_mask]
    meta = dict(sample.meta, augment={"scale": float(s), "offset": (oy, ox), "flip": bool(do_flip)})
    return Sample(np.ascontiguousarray(out_img, dtype=np.float32), masks, sample.seed, meta)


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    images: np.ndarray              # [B, H, W, 3]
    labels: np.ndarray              # [B, H, W]
    dataset_ids: List[str]

    @property
    def dataset(self) -> str:
        ids = set(self.dataset_ids)
        if len(ids) != 1:
            raise UsageError(f"a batch must come from a single dataset, got {sorted(ids)}")
        return self.dataset_ids[0]


def make_batch(samples: Sequence[Sample], dataset: str) -> Batch:
    return Batch(np.stack([s.image for s in samples]).astype(np.float32),
                 np.stack([s.masks[dataset] for s in samples]),
                 [dataset] * len(samples))


def segmentation_loss(model: SegmentationModel, images, labels, dataset: str) -> nc.Tensor:
    logits = model(images, dataset)
    k = logits.shape[-1]
    return nc.cross_entropy(nc.reshape(logits, (-1, k)), np.asarray(labels).reshape(-1))


def train_step(batch: Batch, model: SegmentationModel, config: TrainConfig, step: int,
               max_steps: int) -> float:
    """One SGD step at ``poly_lr(step)``; returns the loss before the update.

    A zero learning rate (the last scheduled step) skips the update, so
    parameters stay bitwise unchanged.
    """
    ds = batch.dataset
    lr = poly_lr(step, max_steps, config)
    model.train()
    model.zero_grad()
    loss = segmentation_loss(model, batch.images, batch.labels, ds)
    nc.check_finite(loss, "training loss")
    nc.backward(loss)
    if lr > 0:
        nc.sgd_step(model.trainable(), lr, config.momentum, config.weight_decay)
    return float(loss.data)


# -------------------------------------------------------------- sampling


def universal_schedule(sizes: Mapping[str, int], seed: int, steps: int) -> List[str]:
    """Dataset id per step, drawn with probability proportional to dataset size."""
    if not sizes:
        raise ConfigError("universal_schedule needs at least one dataset")
    names = list(sizes)
    counts = np.array([int(sizes[n]) for n in names], dtype=np.float64)
    if (counts <= 0).any():
        empty = [n for n, c in zip(names, counts) if c <= 0]
        raise ConfigError(f"empty dataset(s) in schedule: {empty}")
    if len(names) == 1:
        return names * steps
    picks = rng.stream(seed, "schedule").choice(len(names), size=steps, p=counts / counts.sum())
    return [names[i] for i in picks]


class EpochSampler:
    """Endless stream of indices in ``range(n)``, reshuffled every epoch."""

    def __init__(self, n: int, seed: int, tag: str):
        if n <= 0:
            raise ConfigError(f"cannot sample from an empty dataset ({tag})")
        self.n, self.seed, self.tag = n, seed, tag
        self.epoch, self._order, self._pos = 0, rng.stream(seed, f"order.{tag}", 0).permutation(n), 0

    def take(self, k: int) -> List[int]:
        out = []
        while len(out) < k:
            if self._pos == self.n:
                self.epoch += 1
                self._order = rng.stream(self.seed, f"order.{self.tag}", self.epoch).permutation(self.n)
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


@dataclass
class StepRecord:
    step: int
    dataset: str
    lr: float
    loss: float

    def line(self) -> str:
        return f"{self.step}\t{self.dataset}\t{self.lr:.6g}\t{self.loss:.6f}"


def fit(model: SegmentationModel, data: Mapping[str, Sequence[Sample]], config: TrainConfig,
        taxonomy: Optional[LabelTaxonomy] = None, log_file: Optional[TextIO] = None,
        callback: Optional[Callable[[StepRecord], None]] = None) -> List[StepRecord]:
    """Train on one or more datasets, one dataset per batch.

    ``data[dataset]`` holds samples carrying at least that dataset's mask.
    The schedule is proportional to dataset size.
    """
    config.validate()
    taxonomy = taxonomy or model.taxonomy
    sizes = {ds: len(v) for ds, v in data.items()}
    total = config.total_steps(sum(sizes.values()))
    schedule = universal_schedule(sizes, config.seed, total)
    samplers = {ds: EpochSampler(len(v), config.seed, ds) for ds, v in data.items()}
    draws = {ds: 0 for ds in data}
    history = []
    for step, ds in enumerate(schedule):
        picked = []
        for i in samplers[ds].take(config.batch_size):
            s = data[ds][i]
            if config.augment:
                s = augment(s, config, rng.stream(config.seed, f"augment.{ds}", draws[ds]), taxonomy)
            draws[ds] += 1
            picked.append(s)
        loss = train_step(make_batch(picked, ds), model, config, step, total)
        rec = StepRecord(step, ds, poly_lr(step, total, config), loss)
        history.append(rec)
        if log_file is not None:
            log_file.write(rec.line() + "\n")
        if callback is not None:
            callback(rec)
    model.eval()
    return history


def predict_all(model: SegmentationModel, images: np.ndarray, datasets: Sequence[str],
                batch_size: int = 16) -> Dict[str, np.ndarray]:
    out: Dict[str, List[np.ndarray]] = {ds: [] for ds in datasets}
    for i in range(0, len(images), batch_size):
        pred = model.predict(images[i:i + batch_size], datasets)
        for ds in datasets:
            out[ds].append(pred[ds])
    return {ds: np.concatenate(v) for ds, v in out.items()}


# ------------------------------------------------------------- checkpoints


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), np.uint8).astype(np.float32)


def _decode_text(arr: np.ndarray) -> str:
    return bytes(arr.astype(np.uint8).tolist()).decode("utf-8")


def encode_tensors(tensors: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    """Serialise named tensors in the given order."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(value)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be stored (name or rank too large)")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_tensors(data: bytes) -> Dict[str, np.ndarray]:
    """Parse a checkpoint blob into ``{name: float32 array}`` (file order kept)."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedCheckpointError(f"truncated checkpoint: {what} needs {n} bytes at "
                                           f"offset {pos}, file has {len(data)}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * size, f"payload of {name}")
        if name in out:
            raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
        out[name] = np.frombuffer(payload, "<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after {count} tensors")
    return out


def checkpoint_tensors(model: SegmentationModel, step: int) -> List[Tuple[str, np.ndarray]]:
    """Model state, momentum buffers (``optim.<name>.momentum``), step and config echo.

    The step is stored as two 16-bit halves so it is exact in float32;
    the model config is stored as its UTF-8 JSON bytes.
    """
    items = list(model.state().items())
    items += [(f"optim.{n}.momentum", p.momentum_buffer) for n, p in model.params.items()]
    items.append(("meta.step", np.array([step >> 16, step & 0xFFFF], np.float32)))
    items.append(("meta.config", _encode_text(model.config.to_json())))
    return items


def save_checkpoint(model: SegmentationModel, step: int, path) -> bytes:
    blob = encode_tensors(checkpoint_tensors(model, step))
    Path(path).write_bytes(blob)
    return blob


@dataclass
class LoadReport:
    loaded: List[str] = field(default_factory=list)
    fresh: List[str] = field(default_factory=list)
    unknown: List[str] = field(default_factory=list)


@dataclass
class Checkpoint:
    model: SegmentationModel
    momentum: Dict[str, np.ndarray]
    step: int
    report: LoadReport


def split_checkpoint(tensors: Mapping[str, np.ndarray]):
    """-> (state tensors, momentum buffers, step, config dict or None)."""
    state, momentum = {}, {}
    step, config = 0, None
    for name, value in tensors.items():
        if name.startswith("optim.") and name.endswith(".momentum"):
            momentum[name[len("optim."):-len(".momentum")]] = value
        elif name == "meta.step":
            step = (int(value[0]) << 16) | int(value[1])
        elif name == "meta.config":
            config = json.loads(_decode_text(value))
        else:
            state[name] = value
    return state, momentum, step, config


def load_checkpoint(path, model: Optional[SegmentationModel] = None,
                    taxonomy: Optional[LabelTaxonomy] = None) -> Checkpoint:
    """Read a checkpoint into ``model`` (or a model rebuilt from the config echo).

    Parameters the model has but the file lacks are reported as fresh and keep
    their initial values; names the model does not know are reported as unknown.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    state, momentum, step, cfg = split_checkpoint(decode_tensors(path.read_bytes()))
    if model is None:
        if cfg is None:
            raise CheckpointError(f"{path} has no config echo; pass a model to load into")
        model = SegmentationModel(ModelConfig.from_dict(cfg), taxonomy)
    loaded, fresh, unknown = model.load_state(state, momentum)
    for name in unknown:
        log.warning("checkpoint tensor %s is not used by the model", name)
    if fresh:
        log.info("%d parameters initialised fresh: %s", len(fresh), ", ".join(fresh))
    model.eval()
    return Checkpoint(model, momentum, step, LoadReport(loaded, fresh, unknown))


# ---------------------------------------------------------------- baselines


def finetune_model(source: SegmentationModel, target: str, seed: int = 0) -> SegmentationModel:
    """Fresh plain network for ``target`` that starts from ``source``'s backbone.

    Source graph and head are discarded; there is no graph transfer.
    """
    cfg = ModelConfig(datasets=(target,), backbone=source.config.backbone,
                      node_dim=source.config.node_dim, graph=False, seed=seed)
    model = SegmentationModel(cfg, source.taxonomy, dtype=source.dtype)
    model.load_state({k: v for k, v in source.state().items() if k.startswith("backbone.")})
    return model


def transfer_model(source: SegmentationModel, target: str, schemes=("feature", "semantic"),
                   seed: int = 0, embeddings=None) -> SegmentationModel:
    """Target network with intra-graph reasoning plus a transfer edge from ``source``'s graph.

    Backbone, source graph and source head are copied from ``source``.
    """
    (src,) = source.config.datasets
    cfg = ModelConfig(datasets=(target, src), backbone=source.config.backbone,
                      node_dim=source.config.node_dim, graph=True,
                      gcn_layers=source.config.gcn_layers, transfers=((src, target),),
                      schemes=tuple(schemes), seed=seed)
    model = SegmentationModel(cfg, source.taxonomy, embeddings=embeddings, dtype=source.dtype)
    model.load_state(source.state())
    return model


def config_echo(config) -> str:
    return json.dumps(asdict(config), sort_keys=True)
