"""The full segmentation network: backbone, one graph per label set, transfer edges.

A model is described entirely by a :class:`ModelConfig`; parameters are
initialised from per-name random streams, so two models sharing a
parameter name start from the same value regardless of what else they
contain (this is what makes ablation variants directly comparable).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from . import rng
from .errors import ConfigError
from .graphnn import (AssignmentMatrix, SemanticGraph, TransferParams, evolve, gcn_layer,
                      project, reproject, transfer_message)
from .numcore import Parameter, Tensor
from .segnet import BackboneConfig, backbone_forward, classify, init_backbone, upsample_bilinear
from .taxonomy import (AdjacencyMatrix, LabelTaxonomy, WordEmbeddingTable, build_adjacency,
                       load_shipped_embeddings, load_taxonomy, static_transfer)


@dataclass(frozen=True)
class ModelConfig:
    datasets: Tuple[str, ...] = ("fine",)
    backbone: BackboneConfig = BackboneConfig()
    node_dim: int = 128
    graph: bool = True               # intra-graph reasoning on/off
    adjacency: bool = True           # False replaces the body graph by the identity
    gcn_layers: int = 3
    transfers: Tuple[Tuple[str, str], ...] = ()   # directed (source, target) edges
    schemes: Tuple[str, ...] = ("feature", "semantic")
    seed: int = 0

    def validate(self):
        if not self.datasets:
            raise ConfigError("model needs at least one dataset")
        if self.transfers and not self.graph:
            raise ConfigError("inter-graph transfer requires graph reasoning")
        if self.transfers and not self.schemes:
            raise ConfigError("transfer edges need at least one scheme")
        for src, tgt in self.transfers:
            if src not in self.datasets or tgt not in self.datasets or src == tgt:
                raise ConfigError(f"bad transfer edge {src}->{tgt}")
        self.backbone.validate()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v
                                          for k, v in d.get("backbone", {}).items()})
        d["datasets"] = tuple(d["datasets"])
        d["transfers"] = tuple(tuple(e) for e in d.get("transfers", ()))
        d["schemes"] = tuple(d.get("schemes", ()))
        return cls(**d)


def bidirectional_edges(pairs: Iterable[Tuple[str, str]]) -> Tuple[Tuple[str, str], ...]:
    out = []
    for a, b in pairs:
        out += [(a, b), (b, a)]
    return tuple(out)


class SegmentationModel:
    def __init__(self, config: ModelConfig, taxonomy: Optional[LabelTaxonomy] = None,
                 embeddings: Optional[WordEmbeddingTable] = None, dtype=None):
        config.validate()
        self.config = config
        self.taxonomy = taxonomy or load_taxonomy()
        self.dtype = np.dtype(dtype or nc.default_dtype())
        for ds in config.datasets:
            self.taxonomy.num_labels(ds)
        if "semantic" in config.schemes and config.transfers and embeddings is None:
            embeddings = load_shipped_embeddings()
        self.embeddings = embeddings
        self.params: Dict[str, Parameter] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = True
        self._build()

    # --------------------------------------------------------- construction

    def _param(self, name: str, shape, fan_in: Optional[int], fill: float = 0.0) -> Parameter:
        if fan_in is None:
            value = np.full(shape, fill, self.dtype)
        else:
            value = nc.uniform_init(rng.stream(self.config.seed, "init." + name), shape,
                                    fan_in, self.dtype)
        p = Parameter(name, value, dtype=self.dtype)
        self.params[name] = p
        return p

    def _buffer(self, name: str, value: np.ndarray):
        self.buffers[name] = np.asarray(value, self.dtype).copy()

    def _build(self):
        cfg, tax = self.config, self.taxonomy
        init_backbone(cfg.backbone, self._param, self._buffer)
        c, d = cfg.backbone.out_channels, cfg.node_dim
        self.adjacency: Dict[str, AdjacencyMatrix] = {}
        for ds in cfg.datasets:
            k = tax.num_labels(ds)
            self._param(f"head.{ds}.weight", (c, k), c)
            self._param(f"head.{ds}.bias", (k,), None)
            if not cfg.graph:
                continue
            adj = build_adjacency(tax, ds)
            if not cfg.adjacency:
                adj = AdjacencyMatrix(np.eye(k), ds)
            self.adjacency[ds] = AdjacencyMatrix(adj.values.astype(self.dtype), ds)
            self._param(f"graph.{ds}.proj", (c, k), c)
            self._param(f"graph.{ds}.embed", (c, d), c)
            for i in range(cfg.gcn_layers):
                self._param(f"graph.{ds}.gcn{i}", (d, d), d)
            self._param(f"graph.{ds}.reproj", (d, c), d)
            if any(t == ds for _, t in cfg.transfers):
                self._param(f"graph.{ds}.post_gcn", (d, d), d)
        self.static: Dict[str, Dict[str, np.ndarray]] = {}
        for src, tgt in cfg.transfers:
            key = f"{src}->{tgt}"
            self.static[key] = {}
            for scheme in cfg.schemes:
                self._param(f"transfer.{key}.{scheme}", (d, d), d)
                if scheme == "learnable":
                    self._param(f"transfer.{key}.matrix",
                                (tax.num_labels(tgt), tax.num_labels(src)), tax.num_labels(src))
                elif scheme in ("handcraft", "semantic"):
                    m = static_transfer(tax, scheme, src, tgt, self.embeddings).values
                    self.static[key][scheme] = m.astype(self.dtype)

    # ------------------------------------------------------------ accessors

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def trainable(self) -> List[Parameter]:
        return [p for p in self.params.values() if not p.frozen]

    def freeze(self, prefix: str):
        for name, p in self.params.items():
            if name.startswith(prefix):
                p.frozen = True

    def zero_grad(self):
        nc.zero_grad(self.params.values())

    def transfer_params(self, src: str, tgt: str) -> TransferParams:
        key = f"{src}->{tgt}"
        return TransferParams(
            weights={s: self.params[f"transfer.{key}.{s}"] for s in self.config.schemes},
            learnable=self.params.get(f"transfer.{key}.matrix"))

    def num_classes(self, dataset: str) -> int:
        return self.taxonomy.num_labels(dataset)

    # -------------------------------------------------------------- forward

    def _graph(self, feats: Tensor, ds: str) -> Tuple[SemanticGraph, AssignmentMatrix]:
        p = self.params
        z, q = project(feats, p[f"graph.{ds}.proj"], p[f"graph.{ds}.embed"])
        z = evolve(z, self.adjacency[ds],
                   [p[f"graph.{ds}.gcn{i}"] for i in range(self.config.gcn_layers)])
        return SemanticGraph(z, self.adjacency[ds], ds), q

    def train(self, mode: bool = True) -> "SegmentationModel":
        self.training = mode
        return self

    def eval(self) -> "SegmentationModel":
        return self.train(False)

    def features(self, images) -> Tensor:
        return backbone_forward(images, self.config.backbone, self.params, self.buffers,
                                training=self.training)

    def enhanced_features(self, feats: Tensor, datasets: Sequence[str]) -> Dict[str, Tensor]:
        """Graph-enhanced feature map for each requested label set."""
        cfg = self.config
        if not cfg.graph:
            return {ds: feats for ds in datasets}
        needed = list(dict.fromkeys(
            list(datasets) + [s for s, t in cfg.transfers if t in datasets]))
        graphs, assign = {}, {}
        for ds in needed:
            graphs[ds], assign[ds] = self._graph(feats, ds)
        out = {}
        for ds in datasets:
            z = graphs[ds].node_features
            incoming = [s for s, t in cfg.transfers if t == ds]
            if incoming:
                for src in incoming:
                    params = self.transfer_params(src, ds)
                    for scheme in cfg.schemes:
                        z = nc.add(z, transfer_message(scheme, graphs[src], graphs[ds], params,
                                                       self.static[f"{src}->{ds}"]))
                z = gcn_layer(z, self.adjacency[ds], self.params[f"graph.{ds}.post_gcn"])
            out[ds] = reproject(feats, z, assign[ds], self.params[f"graph.{ds}.reproj"])
        return out

    def forward(self, images, datasets: Sequence[str]) -> Dict[str, Tensor]:
        """Full-resolution logits ``[B, H, W, K]`` for each requested label set."""
        for ds in datasets:
            if ds not in self.config.datasets:
                raise ConfigError(f"model has no head for dataset {ds!r}")
        images = images if isinstance(images, Tensor) else Tensor(images, dtype=self.dtype)
        h, w = images.shape[-3], images.shape[-2]
        feats = self.features(images)
        enhanced = self.enhanced_features(feats, datasets)
        return {ds: upsample_bilinear(classify(enhanced[ds], ds, self.params), h, w)
                for ds in datasets}

    def __call__(self, images, dataset: str) -> Tensor:
        return self.forward(images, [dataset])[dataset]

    def predict(self, images, datasets: Sequence[str]) -> Dict[str, np.ndarray]:
        """Argmax label maps, computed in evaluation mode."""
        mode = self.training
        self.training = False
        try:
            with nc.no_grad():
                logits = self.forward(images, datasets)
        finally:
            self.training = mode
        return {ds: v.data.argmax(axis=-1).astype(np.uint8) for ds, v in logits.items()}

    # --------------------------------------------------------------- state

    def state(self) -> Dict[str, np.ndarray]:
        """Parameters followed by buffers, in construction order."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, tensors: Dict[str, np.ndarray],
                   momentum: Optional[Dict[str, np.ndarray]] = None):
        """Copy matching tensors in; returns (loaded, fresh, unknown) name lists."""
        from .errors import ShapeConflictError
        loaded, unknown = [], []
        for name, value in tensors.items():
            target = self.params[name].data if name in self.params else self.buffers.get(name)
            if target is None:
                unknown.append(name)
                continue
            if tuple(value.shape) != target.shape:
                raise ShapeConflictError(f"shape conflict for {name}: checkpoint "
                                         f"{tuple(value.shape)} vs model {target.shape}")
            target[...] = value
            if momentum and name in momentum and name in self.params:
                self.params[name].momentum_buffer[...] = momentum[name]
            loaded.append(name)
        fresh = [n for n in self.state() if n not in tensors]
        return loaded, fresh, unknown
