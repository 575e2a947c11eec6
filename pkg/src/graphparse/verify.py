"""Finite-difference verification suite for every differentiable operation.

Each check builds a small random instance in float64, reduces the output to
a scalar with a fixed random weighting and compares reverse-mode gradients
with central differences.  ``run_suite`` drives all checks over several
seeds; the ``gradcheck`` command and the test suite both use it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import numcore as nc
from .graphnn import (SemanticGraph, TransferParams, bidirectional_transfer,
                      feature_similarity_transfer, gcn_layer, inter_graph_transfer,
                      intra_graph_reasoning, IntraParams, project)
from .model import ModelConfig, SegmentationModel
from .numcore import Parameter, Tensor
from .segnet import BackboneConfig, classify, upsample_bilinear
from .taxonomy import AdjacencyMatrix, build_adjacency, load_taxonomy, normalize_adjacency


@dataclass
class CheckResult:
    name: str
    seed: int
    report: nc.GradReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}\t{self.name}\tseed={self.seed}\tmax_rel={self.report.worst():.2e}\t"
                f"coords={self.report.checked}")


def _weighted_sum(out: Tensor, rs) -> Tensor:
    # 1/sqrt(n) keeps the scalar O(1), so finite-difference round-off stays
    # well below the tolerance whatever the output size
    w = Tensor(rs.normal(size=out.shape) / np.sqrt(out.data.size))
    return nc.sum(nc.mul(out, w))


def _param(rs, name, shape, scale=1.0, away_from_zero=False) -> Parameter:
    v = rs.normal(scale=scale, size=shape)
    if away_from_zero:
        v = np.where(np.abs(v) < 0.05, v + np.sign(v + 1e-12) * 0.05, v)
    return Parameter(name, v)


def _random_adjacency(rs, n, p=0.4) -> AdjacencyMatrix:
    a = np.triu((rs.random((n, n)) < p).astype(float), 1)
    return AdjacencyMatrix(normalize_adjacency(a + a.T), "random")


# ------------------------------------------------------------------ checks
# each returns (scalar function, parameters, max_coords)


def _matmul(rs):
    a, b = _param(rs, "a", (3, 4)), _param(rs, "b", (4, 5))
    return lambda: _weighted_sum(nc.matmul(a, b), np.random.default_rng(1)), [a, b], None


def _softmax(rs):
    x = _param(rs, "x", (3, 6), scale=2.0)
    return lambda: _weighted_sum(nc.softmax(x, axis=-1), np.random.default_rng(1)), [x], None


def _relu(rs):
    x = _param(rs, "x", (4, 5), away_from_zero=True)
    return lambda: _weighted_sum(nc.activation(x, "relu"), np.random.default_rng(1)), [x], None


def _cross_entropy(rs):
    x = _param(rs, "logits", (12, 5), scale=2.0)
    labels = rs.integers(0, 5, size=12)
    labels[0] = -1
    return lambda: nc.cross_entropy(x, labels, ignore_index=-1), [x], None


def _conv(rs):
    x = _param(rs, "x", (2, 6, 6, 3))
    w = _param(rs, "w", (3, 3, 3, 4), scale=0.5)
    b = _param(rs, "b", (4,))
    stride = 1 + int(rs.integers(0, 2))
    f = lambda: _weighted_sum(nc.conv2d(x, w, b, stride=stride, padding=1), np.random.default_rng(1))
    return f, [x, w, b], None


def _batch_norm(rs):
    x = _param(rs, "x", (2, 4, 4, 3))
    g, b = _param(rs, "gamma", (3,)), _param(rs, "beta", (3,))
    rm, rv = np.zeros(3), np.ones(3)
    f = lambda: _weighted_sum(nc.batch_norm(x, g, b, rm, rv, training=True), np.random.default_rng(1))
    return f, [x, g, b], None


def _project(rs):
    x = _param(rs, "x", (1, 8, 8, 4))
    proj, embed = _param(rs, "proj", (4, 7)), _param(rs, "embed", (4, 6))
    f = lambda: _weighted_sum(project(x, proj, embed)[0], np.random.default_rng(1))
    return f, [x, proj, embed], 40


def _gcn(rs):
    n = 5
    adj = _random_adjacency(rs, n)
    z, w = _param(rs, "z", (n, 6)), _param(rs, "w", (6, 6))
    return lambda: _weighted_sum(gcn_layer(z, adj, w), np.random.default_rng(1)), [z, w], None


def _intra_params(rs, c, n, d, prefix=""):
    return IntraParams(_param(rs, prefix + "proj", (c, n)), _param(rs, prefix + "embed", (c, d), 0.5),
                       [_param(rs, f"{prefix}gcn{i}", (d, d), 0.5) for i in range(3)],
                       _param(rs, prefix + "reproj", (d, c), 0.5))


def _intra(rs):
    x = _param(rs, "x", (1, 8, 8, 4))
    adj = build_adjacency(load_taxonomy(), "coarse")
    p = _intra_params(rs, 4, 7, 8)
    plist = [x, p.proj, p.embed, *p.gcn, p.reproj]
    f = lambda: _weighted_sum(intra_graph_reasoning(x, adj, p)[0], np.random.default_rng(1))
    return f, plist, 40


def _feature_transfer(rs):
    zs, zt = _param(rs, "z_s", (7, 6)), _param(rs, "z_t", (5, 6))
    f = lambda: _weighted_sum(feature_similarity_transfer(zs, zt).values, np.random.default_rng(1))
    return f, [zs, zt], None


def _transfer_setup(rs, ns=7, nt=5, d=6):
    zs, zt = _param(rs, "z_s", (ns, d)), _param(rs, "z_t", (nt, d))
    gs = SemanticGraph(zs, _random_adjacency(rs, ns), "s")
    gt = SemanticGraph(zt, _random_adjacency(rs, nt), "t")
    sem = rs.random((nt, ns))
    params = TransferParams({"feature": _param(rs, "w_feature", (d, d), 0.5),
                             "semantic": _param(rs, "w_semantic", (d, d), 0.5),
                             "learnable": _param(rs, "w_learnable", (d, d), 0.5)},
                            _param(rs, "a_learnable", (nt, ns), 0.5))
    return gs, gt, params, {"semantic": sem / sem.sum(1, keepdims=True)}


def _inter(rs):
    gs, gt, params, static = _transfer_setup(rs)
    schemes = ["feature", "semantic", "learnable"]
    f = lambda: _weighted_sum(inter_graph_transfer(gt, gs, schemes, params, static).node_features,
                              np.random.default_rng(1))
    plist = [gs.node_features, gt.node_features, *params.weights.values(), params.learnable]
    return f, plist, None


def _bidirectional(rs):
    d = 6
    ga = SemanticGraph(_param(rs, "z_a", (5, d)), _random_adjacency(rs, 5), "a")
    gb = SemanticGraph(_param(rs, "z_b", (7, d)), _random_adjacency(rs, 7), "b")
    params = {"a->b": TransferParams({"feature": _param(rs, "w_ab", (d, d), 0.5)}),
              "b->a": TransferParams({"feature": _param(rs, "w_ba", (d, d), 0.5)})}
    post = {"a": _param(rs, "post_a", (d, d), 0.5), "b": _param(rs, "post_b", (d, d), 0.5)}

    def f():
        oa, ob = bidirectional_transfer(ga, gb, ["feature"], params, {}, post)
        r = np.random.default_rng(1)
        return nc.add(_weighted_sum(oa.node_features, r), _weighted_sum(ob.node_features, r))

    plist = [ga.node_features, gb.node_features, params["a->b"].weights["feature"],
             params["b->a"].weights["feature"], post["a"], post["b"]]
    return f, plist, None


def _classify(rs):
    x = _param(rs, "x", (1, 4, 4, 4))
    params = {"head.coarse.weight": _param(rs, "weight", (4, 7)),
              "head.coarse.bias": _param(rs, "bias", (7,))}
    f = lambda: _weighted_sum(classify(x, "coarse", params), np.random.default_rng(1))
    return f, [x, *params.values()], None


def _upsample(rs):
    x = _param(rs, "x", (1, 3, 4, 2))
    f = lambda: _weighted_sum(upsample_bilinear(x, 8, 8), np.random.default_rng(1))
    return f, [x], None


def _end_to_end(rs):
    seed = int(rs.integers(0, 2 ** 31))
    cfg = ModelConfig(datasets=("coarse", "fine"),
                      backbone=BackboneConfig(widths=(4, 4), output_stride=2),
                      node_dim=8, transfers=(("fine", "coarse"), ("coarse", "fine")),
                      schemes=("feature", "semantic"), seed=seed)
    model = SegmentationModel(cfg, dtype=np.float64)
    # non-zero biases and batch-norm shifts keep relu inputs away from the kink
    for p in model.parameters():
        if p.name.endswith("bias"):
            p.data[...] = rs.normal(scale=0.1, size=p.shape)
    image = rs.random((2, 8, 8, 3))
    labels = {ds: rs.integers(0, model.num_classes(ds), size=(2, 8, 8)) for ds in cfg.datasets}

    def f():
        logits = model.forward(image, ["coarse", "fine"])
        total = None
        for ds, lg in logits.items():
            k = lg.shape[-1]
            loss = nc.cross_entropy(nc.reshape(lg, (-1, k)), labels[ds].reshape(-1))
            total = loss if total is None else nc.add(total, loss)
        return total

    return f, model.parameters(), 6


CHECKS: Dict[str, Callable] = {
    "matmul": _matmul,
    "softmax": _softmax,
    "activation": _relu,
    "cross_entropy": _cross_entropy,
    "conv2d": _conv,
    "batch_norm": _batch_norm,
    "project": _project,
    "gcn_layer": _gcn,
    "intra_graph_reasoning": _intra,
    "feature_similarity_transfer": _feature_transfer,
    "inter_graph_transfer": _inter,
    "bidirectional_transfer": _bidirectional,
    "classify": _classify,
    "upsample_bilinear": _upsample,
    "end_to_end": _end_to_end,
}


def run_check(name: str, seed: int, tol: float = 1e-6) -> CheckResult:
    t0 = time.perf_counter()
    with nc.precision(np.float64):
        rs = np.random.default_rng(seed)
        f, params, max_coords = CHECKS[name](rs)
        report = nc.grad_check(f, params, tol=tol, max_coords=max_coords, seed=seed)
    return CheckResult(name, seed, report, time.perf_counter() - t0)


def run_suite(seeds: Sequence[int] = range(5), names: Optional[Sequence[str]] = None,
              tol: float = 1e-6, echo: Optional[Callable[[str], None]] = None) -> List[CheckResult]:
    results = []
    for name in names or CHECKS:
        for seed in seeds:
            r = run_check(name, seed, tol)
            results.append(r)
            if echo:
                echo(r.line())
    return results
