"""Small convolutional encoder, per-label-set classifiers and bilinear upsampling.

Stands in for a large pretrained segmentation backbone: ``len(widths)``
stages of 3x3 conv (+ batch norm) + relu, with stride-2 convolutions between
the first ``log2(output_stride)`` stages.  Batch norm is on by default: with
plain SGD from a uniform init, an unnormalised stack of this size barely
moves in a few hundred steps.  The input can be augmented with two
normalised coordinate channels (``coord_channels``) so that the encoder
has a notion of absolute position, as a deep backbone with a large
receptive field would.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError, UsageError
from .numcore import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    widths: Tuple[int, ...] = (16, 32, 64)
    output_stride: int = 4
    kernel: int = 3
    convs_per_stage: int = 1
    coord_channels: bool = True
    in_channels: int = 3
    norm: str = "batch"          # "batch" or "none"
    bn_momentum: float = 0.1

    @property
    def num_stages(self) -> int:
        return len(self.widths)

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def validate(self):
        if self.output_stride not in (1, 2, 4, 8, 16):
            raise ConfigError(f"output_stride must be a power of two <= 16, got {self.output_stride}")
        downs = int(np.log2(self.output_stride))
        if downs > self.num_stages - 1:
            raise ConfigError(f"{self.num_stages} stages cannot reach output stride "
                              f"{self.output_stride}")
        if self.kernel % 2 != 1 or self.convs_per_stage < 1:
            raise ConfigError("kernel must be odd and convs_per_stage >= 1")
        if self.norm not in ("batch", "none"):
            raise ConfigError(f"norm must be 'batch' or 'none', got {self.norm!r}")
        if min(self.widths) < 1:
            raise ConfigError("channel widths must be positive")

    def layers(self):
        """Yield (name, cin, cout, stride) for every conv."""
        self.validate()
        downs = int(np.log2(self.output_stride))
        cin = self.in_channels + (2 if self.coord_channels else 0)
        for s, width in enumerate(self.widths):
            for k in range(self.convs_per_stage):
                stride = 2 if (k == 0 and 0 < s <= downs) else 1
                yield f"backbone.stage{s}.conv{k}", cin, width, stride
                cin = width


def init_backbone(config: BackboneConfig, make_param, make_buffer=None) -> Dict[str, Tensor]:
    """Create backbone parameters through ``make_param(name, shape, fan_in, fill)``.

    ``fan_in=None`` means a constant ``fill``.  Batch-norm running
    statistics go through ``make_buffer(name, array)``.
    """
    params = {}
    k = config.kernel
    for name, cin, cout, _ in config.layers():
        params[f"{name}.weight"] = make_param(f"{name}.weight", (k, k, cin, cout), k * k * cin, 0.0)
        params[f"{name}.bias"] = make_param(f"{name}.bias", (cout,), None, 0.0)
        if config.norm == "batch":
            params[f"{name}.bn.weight"] = make_param(f"{name}.bn.weight", (cout,), None, 1.0)
            params[f"{name}.bn.bias"] = make_param(f"{name}.bn.bias", (cout,), None, 0.0)
            if make_buffer is not None:
                make_buffer(f"{name}.bn.running_mean", np.zeros(cout))
                make_buffer(f"{name}.bn.running_var", np.ones(cout))
    return params


def _coords(bsz: int, h: int, w: int, dtype) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    grid = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).astype(dtype)
    return np.broadcast_to(grid, (bsz, h, w, 2))


def backbone_forward(image, config: BackboneConfig, params: Mapping[str, Tensor],
                     buffers: Optional[Mapping[str, np.ndarray]] = None,
                     training: bool = True) -> Tensor:
    """``[B, H, W, 3]`` image -> ``[B, H/s, W/s, C]`` features.

    With batch norm, ``training`` selects batch statistics (and updates
    ``buffers`` in place) or the stored running statistics.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = nc.reshape(x, (1, *x.shape))
    bsz, h, w, c = x.shape
    s = config.output_stride
    if h % s or w % s:
        raise DimensionError(f"input {h}x{w} not divisible by output stride {s}")
    if c != config.in_channels:
        raise DimensionError(f"backbone expects {config.in_channels} input channels, got {c}")
    if config.coord_channels:
        coords = Tensor(_coords(bsz, h, w, x.dtype), dtype=x.dtype)
        x = _concat_channels(x, coords)
    pad = config.kernel // 2
    if config.norm == "batch" and buffers is None:
        buffers = {}
    for name, _, cout, stride in config.layers():
        x = nc.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"],
                      stride=stride, padding=pad)
        if config.norm == "batch":
            rm = buffers.setdefault(f"{name}.bn.running_mean", np.zeros(cout, x.dtype))
            rv = buffers.setdefault(f"{name}.bn.running_var", np.ones(cout, x.dtype))
            x = nc.batch_norm(x, params[f"{name}.bn.weight"], params[f"{name}.bn.bias"], rm, rv,
                              training=training, momentum=config.bn_momentum)
        x = nc.relu(x)
    if squeeze:
        x = nc.reshape(x, x.shape[1:])
    return x


def _concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ca = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return nc.make_op(out, (a, b), lambda g: (g[..., :ca], g[..., ca:]))


def classify(features: Tensor, dataset_id: str, params: Mapping[str, Tensor]) -> Tensor:
    """1x1 convolution to one logit per label of ``dataset_id``."""
    key = f"head.{dataset_id}.weight"
    if key not in params:
        raise ConfigError(f"no classifier registered for dataset {dataset_id!r}")
    return nc.add(nc.matmul(features, params[key]), params[f"head.{dataset_id}.bias"])


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o holds the bilinear weights of output o (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def resize_bilinear_array(x: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Plain-array bilinear resize of ``[..., H, W, C]`` (any scale)."""
    ry = interpolation_matrix(x.shape[-3], h_out).astype(x.dtype)
    rx = interpolation_matrix(x.shape[-2], w_out).astype(x.dtype)
    *lead, h, w, c = x.shape
    t = np.matmul(ry, x.reshape(*lead, h, w * c)).reshape(*lead, h_out, w, c)
    return np.matmul(rx, t)


def upsample_bilinear(logits: Tensor, h_out: int, w_out: int) -> Tensor:
    """Bilinear upsampling of ``[B, H, W, K]`` maps to ``[B, h_out, w_out, K]``."""
    *lead, h, w, k = logits.shape
    if h_out < h or w_out < w:
        raise UsageError(f"upsample_bilinear cannot downscale {h}x{w} to {h_out}x{w_out}")
    if (h_out, w_out) == (h, w):
        return logits
    ry = interpolation_matrix(h, h_out).astype(logits.dtype)
    rx = interpolation_matrix(w, w_out).astype(logits.dtype)
    # rows: [.., H, W, K] -> [.., Ho, W, K]
    x = logits.data
    t = np.matmul(ry, x.reshape(*lead, h, w * k)).reshape(*lead, h_out, w, k)
    out = np.matmul(rx, t)  # [.., Ho, Wo, K] via broadcasting over Ho

    def bw(g):
        gt = np.matmul(rx.T, g)  # [.., Ho, W, K]
        gx = np.matmul(ry.T, gt.reshape(*lead, h_out, w * k)).reshape(*lead, h, w, k)
        return (gx,)

    return nc.make_op(out, (logits,), bw)
