"""Synthetic ablation studies: component grid, data-fraction study, universal model.

Target/source roles mirror the usual setting of transferring a graph learnt
on a fine-grained label set to a coarse one.  All studies share one
recipe (:class:`StudyConfig`) so variants differ only in the component
under test.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .model import ModelConfig, SegmentationModel, bidirectional_edges
from .segnet import BackboneConfig
from .synthdata import Sample, SceneConfig, generate_split
from .taxonomy import LabelTaxonomy, load_taxonomy, projection_lut
from .trainer import TrainConfig, finetune_model, fit, predict_all, transfer_model


@dataclass(frozen=True)
class StudyConfig:
    n_train: int = 1000
    n_test: int = 200
    target: str = "coarse"
    source: str = "fine"
    seeds: Tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = TrainConfig(base_lr=0.1, steps=1000)
    backbone: BackboneConfig = BackboneConfig()
    node_dim: int = 128
    scene: SceneConfig = SceneConfig()


VARIANTS = ("baseline", "no-adjacency", "intra", "fine-tune", "handcraft", "learnable",
            "feature", "semantic", "full")


@dataclass
class Outcome:
    variant: str
    seed: int
    results: Dict[str, Dict[str, object]]       # dataset -> metrics.compute output
    seconds: float

    def miou(self, dataset: str) -> float:
        return 100.0 * float(self.results[dataset]["mean_iou"])


def _dataset_samples(seed: int, split: str, dataset: str, n: int, scene) -> List[Sample]:
    return generate_split(seed, split, dataset, n, scene)


def evaluate(model: SegmentationModel, samples: Sequence[Sample], datasets: Sequence[str],
             **kw) -> Dict[str, Dict[str, object]]:
    images = np.stack([s.image for s in samples])
    preds = predict_all(model, images, datasets)
    out = {}
    for ds in datasets:
        cm = metrics.ConfusionMatrix.empty(model.num_classes(ds))
        for p, s in zip(preds[ds], samples):
            cm = metrics.accumulate(cm, p, s.masks[ds])
        out[ds] = metrics.compute(cm, **kw)
    return out


class Study:
    """Holds generated data and pretrained source models for one recipe."""

    def __init__(self, config: StudyConfig = StudyConfig(), taxonomy: Optional[LabelTaxonomy] = None,
                 echo: Optional[Callable[[str], None]] = None):
        self.config = config
        self.taxonomy = taxonomy or load_taxonomy()
        self.echo = echo or (lambda s: None)
        self._data: Dict[tuple, List[Sample]] = {}
        self._sources: Dict[int, SegmentationModel] = {}

    def data(self, split: str, dataset: str, seed: int, n: int) -> List[Sample]:
        key = (split, dataset, seed, n)
        if key not in self._data:
            self._data[key] = _dataset_samples(seed, split, dataset, n, self.config.scene)
        return self._data[key]

    def train_data(self, dataset: str, seed: int, fraction: float = 1.0) -> List[Sample]:
        n = self.config.n_train
        full = self.data("train", dataset, seed, n)
        return full[:max(1, int(round(fraction * n)))]

    def test_data(self, dataset: str, seed: int) -> List[Sample]:
        # the test set does not depend on the run seed
        return self.data("test", dataset, 0, self.config.n_test)

    def model_config(self, datasets, seed, **kw) -> ModelConfig:
        c = self.config
        return ModelConfig(datasets=tuple(datasets), backbone=c.backbone, node_dim=c.node_dim,
                           seed=seed, **kw)

    def train_config(self, seed: int, n_samples: int) -> TrainConfig:
        return replace(self.config.train, seed=seed)

    def source_model(self, seed: int) -> SegmentationModel:
        """Source-label-set model with intra-graph reasoning, trained on the full source set."""
        if seed not in self._sources:
            src = self.config.source
            t0 = time.perf_counter()
            model = SegmentationModel(self.model_config((src,), seed), self.taxonomy)
            fit(model, {src: self.train_data(src, seed)}, self.train_config(seed, self.config.n_train))
            self.echo(f"# pretrained {src} source for seed {seed} in {time.perf_counter() - t0:.0f}s")
            self._sources[seed] = model
        return self._sources[seed]

    def build(self, variant: str, seed: int) -> SegmentationModel:
        tgt = self.config.target
        if variant == "baseline":
            return SegmentationModel(self.model_config((tgt,), seed, graph=False), self.taxonomy)
        if variant == "no-adjacency":
            return SegmentationModel(self.model_config((tgt,), seed, adjacency=False), self.taxonomy)
        if variant == "intra":
            return SegmentationModel(self.model_config((tgt,), seed), self.taxonomy)
        if variant == "fine-tune":
            return finetune_model(self.source_model(seed), tgt, seed=seed)
        schemes = {"full": ("feature", "semantic")}.get(variant, (variant,))
        return transfer_model(self.source_model(seed), tgt, schemes=schemes, seed=seed)

    def run(self, variant: str, seed: int, fraction: float = 1.0) -> Outcome:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        tgt = self.config.target
        model = self.build(variant, seed)
        t0 = time.perf_counter()
        data = self.train_data(tgt, seed, fraction)
        fit(model, {tgt: data}, self.train_config(seed, len(data)))
        res = evaluate(model, self.test_data(tgt, seed), [tgt])
        out = Outcome(variant, seed, res, time.perf_counter() - t0)
        self.echo(f"# {variant} seed={seed} fraction={fraction} mIoU={out.miou(tgt):.2f} "
                  f"({out.seconds:.0f}s)")
        return out

    def grid(self, variants: Sequence[str] = ("baseline", "intra", "full"),
             fraction: float = 1.0) -> Dict[str, List[Outcome]]:
        return {v: [self.run(v, s, fraction) for s in self.config.seeds] for v in variants}


def mean_miou(outcomes: Sequence[Outcome], dataset: str) -> float:
    return float(np.mean([o.miou(dataset) for o in outcomes]))


def format_grid(grid: Dict[str, List[Outcome]], dataset: str) -> str:
    seeds = [o.seed for o in next(iter(grid.values()))]
    head = "variant\t" + "\t".join(f"seed{s}" for s in seeds) + "\tmean"
    lines = [head]
    for v, outs in grid.items():
        cells = "\t".join(f"{o.miou(dataset):.2f}" for o in outs)
        lines.append(f"{v}\t{cells}\t{mean_miou(outs, dataset):.2f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- universal


@dataclass
class UniversalOutcome:
    untrained: Dict[str, float]
    universal: Dict[str, float]
    consistency_universal: float
    consistency_independent: float
    seconds: float


def universal_study(study: Study, seed: int = 0,
                    datasets: Sequence[str] = ("coarse", "mid", "fine")) -> UniversalOutcome:
    """Joint model over all label sets vs independently trained single-set models.

    Each label set gets its own (disjoint) training images; the joint model
    is trained with one-dataset-per-batch sampling for the same total number
    of steps per label set as an independent model.
    """
    tax = study.taxonomy
    t0 = time.perf_counter()
    order = sorted(datasets, key=tax.num_labels)
    edges = bidirectional_edges(zip(order[:-1], order[1:]))
    cfg = study.model_config(order, seed, transfers=edges)
    test = study.test_data("fine", seed)
    train = {ds: study.train_data(ds, seed) for ds in order}
    untrained = evaluate(SegmentationModel(cfg, tax), test, order)
    model = SegmentationModel(cfg, tax)
    tcfg = study.train_config(seed, 0)
    fit(model, train, replace(tcfg, steps=tcfg.steps * len(order)))
    uni = evaluate(model, test, order)
    images = np.stack([s.image for s in test])
    fine, coarse = order[-1], order[0]
    lut = projection_lut(tax, fine, coarse)
    pred = predict_all(model, images, [fine, coarse])
    cons_uni = metrics.hierarchy_consistency(pred[fine], pred[coarse], lut)
    indep = {}
    for ds in (fine, coarse):
        m = SegmentationModel(study.model_config((ds,), seed), tax)
        fit(m, {ds: train[ds]}, tcfg)
        indep[ds] = predict_all(m, images, [ds])[ds]
    cons_ind = metrics.hierarchy_consistency(indep[fine], indep[coarse], lut)
    return UniversalOutcome({d: 100 * float(untrained[d]["mean_iou"]) for d in order},
                            {d: 100 * float(uni[d]["mean_iou"]) for d in order},
                            cons_uni, cons_ind, time.perf_counter() - t0)
