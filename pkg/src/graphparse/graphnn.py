"""Graph head: pixel-to-node projection, graph reasoning and cross-graph transfer.

Shapes: feature maps are ``[B, H, W, C]`` (a leading batch axis is optional
everywhere), node features ``[B, N, D]``, assignments ``[B, HW, N]``.

Pipeline per label set::

    project -> gcn_layer x3 -> (inter_graph_transfer -> gcn_layer) -> reproject (+ residual)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError
from .numcore import Tensor
from .taxonomy import SCHEMES, AdjacencyMatrix, TransferMatrix

MASS_EPS = 1e-6


@dataclass
class SemanticGraph:
    node_features: Tensor
    adjacency: AdjacencyMatrix
    dataset_id: str

    @property
    def num_nodes(self) -> int:
        return self.node_features.shape[-2]


@dataclass
class AssignmentMatrix:
    values: Tensor  # [B, HW, N], rows sum to one


@dataclass
class IntraParams:
    proj: Tensor            # [C, N]
    embed: Tensor           # [C, D]
    gcn: List[Tensor]       # each [D, D]
    reproj: Tensor          # [D, C]


@dataclass
class TransferParams:
    """Per-scheme weights of one directed transfer edge (source -> target)."""
    weights: Dict[str, Tensor] = field(default_factory=dict)   # scheme -> [D_s, D_t]
    learnable: Optional[Tensor] = None                          # [N_t, N_s]


def _flatten_pixels(x: Tensor) -> Tensor:
    *lead, h, w, c = x.shape
    return nc.reshape(x, (*lead, h * w, c))


def project(x: Tensor, proj: Tensor, embed: Tensor) -> Tuple[Tensor, AssignmentMatrix]:
    """Soft-assign pixels to nodes and pool them into node features.

    Q = softmax_nodes(X W_proj); Z = (Q^T X / mass) W_embed with
    mass = max(sum_pixels Q, 1e-6).
    """
    if x.shape[-1] != proj.shape[0] or x.shape[-1] != embed.shape[0]:
        raise DimensionError(f"project: features have {x.shape[-1]} channels, projection "
                             f"expects {proj.shape[0]} / embedding {embed.shape[0]}")
    xf = _flatten_pixels(x)
    q = nc.softmax(nc.matmul(xf, proj), axis=-1)
    qt = nc.transpose(q)
    pooled = nc.matmul(qt, xf)
    mass = nc.clamp_min(nc.sum(q, axis=-2, keepdims=True), MASS_EPS)
    pooled = nc.div(pooled, nc.transpose(mass))
    return nc.matmul(pooled, embed), AssignmentMatrix(q)


def aggregate(a: Tensor, z: Tensor) -> Tensor:
    """A Z with the neighbour sum taken in sorted order.

    Sorting the products before summing makes the result independent of how
    nodes are numbered, so relabelling a graph permutes the output exactly.
    """
    # [..., N, D, N]: neighbour axis last so the sort runs over contiguous memory
    terms = a.data[..., :, None, :] * np.swapaxes(z.data, -1, -2)[..., None, :, :]
    terms.sort(axis=-1)
    out = terms.sum(axis=-1)

    def bw(g):
        ga = nc._unbroadcast(np.matmul(g, np.swapaxes(z.data, -1, -2)), a.shape) if a.requires_grad else None
        gz = nc._unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), z.shape) if z.requires_grad else None
        return ga, gz

    return nc.make_op(out.astype(z.dtype), (a, z), bw)


def gcn_layer(z: Tensor, adjacency, w: Tensor) -> Tensor:
    """relu(A Z W)."""
    a = adjacency.values if isinstance(adjacency, AdjacencyMatrix) else adjacency
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=z.dtype)
    if a.shape[-1] != z.shape[-2] or z.shape[-1] != w.shape[0]:
        raise DimensionError(f"gcn_layer: adjacency {a.shape}, nodes {z.shape}, weight {w.shape}")
    nc.check_finite(z, "gcn_layer input")
    return nc.relu(nc.matmul(aggregate(a, z), w))


def reproject(x: Tensor, z: Tensor, assignment: AssignmentMatrix, reproj: Tensor) -> Tensor:
    """X + reshape(Q (Z W_reproj)): residual update of every pixel."""
    msg = nc.matmul(assignment.values, nc.matmul(z, reproj))
    return nc.add(x, nc.reshape(msg, x.shape))


def evolve(z: Tensor, adjacency, weights: Sequence[Tensor]) -> Tensor:
    for w in weights:
        z = gcn_layer(z, adjacency, w)
    return z


def intra_graph_reasoning(x: Tensor, adjacency: AdjacencyMatrix,
                          params: IntraParams) -> Tuple[Tensor, SemanticGraph, AssignmentMatrix]:
    """Project, propagate over the body graph and re-project with a residual.

    Returns the enhanced feature map, the evolved graph (for transfer) and
    the assignment used for re-projection.
    """
    z, q = project(x, params.proj, params.embed)
    z = evolve(z, adjacency, params.gcn)
    return reproject(x, z, q, params.reproj), SemanticGraph(z, adjacency, adjacency.dataset_id), q


def feature_similarity_transfer(z_s: Tensor, z_t: Tensor, source_dataset: str = "",
                                target_dataset: str = "") -> TransferMatrix:
    """softmax_j(cos(target_i, source_j)); zero vectors have similarity 0."""
    if z_s.shape[-1] != z_t.shape[-1]:
        raise DimensionError(f"node dimensions differ: {z_s.shape} vs {z_t.shape}")
    sim = nc.matmul(nc.l2_normalize(z_t), nc.transpose(nc.l2_normalize(z_s)))
    return TransferMatrix(nc.softmax(sim, axis=-1), "feature", source_dataset, target_dataset)


def transfer_matrix(scheme: str, source: SemanticGraph, target: SemanticGraph,
                    params: TransferParams, static_matrices: Mapping[str, object]):
    if scheme == "feature":
        return feature_similarity_transfer(source.node_features, target.node_features).values
    if scheme == "learnable":
        if params.learnable is None:
            raise ConfigError("learnable scheme requested without a learnable matrix")
        return params.learnable
    if scheme in ("handcraft", "semantic"):
        if scheme not in static_matrices:
            raise ConfigError(f"no static {scheme} matrix for {source.dataset_id}->"
                              f"{target.dataset_id}")
        m = static_matrices[scheme]
        m = m.values if isinstance(m, TransferMatrix) else m
        return m if isinstance(m, Tensor) else Tensor(m, dtype=source.node_features.dtype)
    raise ConfigError(f"unknown transfer scheme {scheme!r}; expected one of {SCHEMES}")


def transfer_message(scheme: str, source: SemanticGraph, target: SemanticGraph,
                     params: TransferParams, static_matrices: Mapping[str, object]) -> Tensor:
    """relu(A_tr Z_s W_tr) for one scheme."""
    a = transfer_matrix(scheme, source, target, params, static_matrices)
    if scheme not in params.weights:
        raise ConfigError(f"no transfer weight for scheme {scheme!r}")
    return nc.relu(nc.matmul(nc.matmul(a, source.node_features), params.weights[scheme]))


def inter_graph_transfer(target: SemanticGraph, source: SemanticGraph, schemes: Iterable[str],
                         params: TransferParams,
                         static_matrices: Mapping[str, object] = {}) -> SemanticGraph:
    """Z_t + sum over schemes of relu(A_tr Z_s W_tr); keeps the target adjacency."""
    schemes = list(schemes)
    if not schemes:
        raise ConfigError("inter_graph_transfer needs at least one scheme")
    z = target.node_features
    for scheme in schemes:
        z = nc.add(z, transfer_message(scheme, source, target, params, static_matrices))
    return SemanticGraph(z, target.adjacency, target.dataset_id)


def bidirectional_transfer(graph_a: SemanticGraph, graph_b: SemanticGraph, schemes,
                           params: Mapping[str, TransferParams],
                           static_matrices: Mapping[str, Mapping[str, object]],
                           post_gcn: Mapping[str, Tensor]) -> Tuple[SemanticGraph, SemanticGraph]:
    """Exchange information both ways from the pre-transfer graphs, then one more GCN each.

    ``params`` / ``static_matrices`` are keyed by ``"<src>-><tgt>"``;
    ``post_gcn`` by dataset id.
    """
    a_id, b_id = graph_a.dataset_id, graph_b.dataset_id
    a_new = inter_graph_transfer(graph_a, graph_b, schemes, params[f"{b_id}->{a_id}"],
                                 static_matrices.get(f"{b_id}->{a_id}", {}))
    b_new = inter_graph_transfer(graph_b, graph_a, schemes, params[f"{a_id}->{b_id}"],
                                 static_matrices.get(f"{a_id}->{b_id}", {}))
    out = []
    for g in (a_new, b_new):
        z = gcn_layer(g.node_features, g.adjacency, post_gcn[g.dataset_id])
        out.append(SemanticGraph(z, g.adjacency, g.dataset_id))
    return out[0], out[1]
