"""Label vocabularies, body-structure graphs and cross-taxonomy relations.

A :class:`LabelTaxonomy` is read from a small sectioned text file (see
``data/taxonomy.txt``).  From it we build the normalised adjacency used for
graph propagation and the static transfer matrices (hierarchy-based
"handcraft" and word-embedding "semantic") that link two label sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ConfigError, DataError, ParseError, TaxonomyError

BACKGROUND = "background"
SCHEMES = ("handcraft", "learnable", "feature", "semantic")


@dataclass
class LabelTaxonomy:
    labels: Dict[str, List[str]] = field(default_factory=dict)
    tokens: Dict[Tuple[str, str], List[str]] = field(default_factory=dict)
    edges: Dict[str, Set[FrozenSet[str]]] = field(default_factory=dict)
    # (coarse_dataset, fine_dataset) -> set of (coarse_label, fine_label)
    hierarchy: Dict[Tuple[str, str], Set[Tuple[str, str]]] = field(default_factory=dict)

    @property
    def datasets(self) -> List[str]:
        return list(self.labels)

    def num_labels(self, dataset: str) -> int:
        return len(self._labels(dataset))

    def index(self, dataset: str, label: str) -> int:
        try:
            return self._labels(dataset).index(label)
        except ValueError:
            raise DataError(f"unknown label {label!r} in dataset {dataset!r}") from None

    def _labels(self, dataset: str) -> List[str]:
        if dataset not in self.labels:
            raise ConfigError(f"unknown dataset {dataset!r}; known: {', '.join(self.labels)}")
        return self.labels[dataset]

    def label_tokens(self, dataset: str, label: str) -> List[str]:
        return self.tokens.get((dataset, label), [label])

    def all_tokens(self) -> List[str]:
        seen = {}
        for ds, names in self.labels.items():
            for name in names:
                for tok in self.label_tokens(ds, name):
                    seen.setdefault(tok, None)
        return list(seen)

    def validate(self):
        for ds, names in self.labels.items():
            if len(set(names)) != len(names):
                raise TaxonomyError(f"duplicate labels in dataset {ds!r}")
            if not names or names[0] != BACKGROUND:
                raise TaxonomyError(f"dataset {ds!r} must list {BACKGROUND!r} first")
        for ds, es in self.edges.items():
            for e in es:
                if len(e) != 2:
                    raise TaxonomyError(f"self-loop {sorted(e)} in edges of {ds!r}")
                for lab in e:
                    self.index(ds, lab)
        for (coarse, fine), pairs in self.hierarchy.items():
            for c, f in pairs:
                self.index(coarse, c)
                self.index(fine, f)
            has_parent = {f for _, f in pairs}
            orphans = [f for f in self._labels(fine)[1:] if f not in has_parent]
            if orphans:
                raise TaxonomyError(f"labels of {fine!r} without parent in {coarse!r}: {orphans}")

    def hierarchy_pairs(self, a: str, b: str) -> Optional[Set[Tuple[str, str]]]:
        """Pairs ``(label_in_a, label_in_b)`` linked by a hierarchy edge, either direction."""
        if (a, b) in self.hierarchy:
            return set(self.hierarchy[(a, b)])
        if (b, a) in self.hierarchy:
            return {(x, y) for (y, x) in self.hierarchy[(b, a)]}
        return None

    def hierarchy_neighbors(self) -> List[Tuple[str, str]]:
        """Adjacent granularity pairs ``(coarse, fine)`` forming the chain."""
        order = sorted(self.labels, key=self.num_labels)
        return [(c, f) for c, f in zip(order, order[1:])
                if self.hierarchy_pairs(c, f) is not None]


def parse_taxonomy(text: str, source: str = "<string>") -> LabelTaxonomy:
    tax = LabelTaxonomy()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"{source}:{lineno}: unterminated section header")
            parts = line[1:-1].split()
            if len(parts) != 2 or parts[0] not in ("labels", "edges", "hierarchy"):
                raise ParseError(f"{source}:{lineno}: bad section header {line!r}")
            kind, arg = parts
            if kind == "hierarchy":
                if arg.count(":") != 1:
                    raise ParseError(f"{source}:{lineno}: hierarchy section needs <coarse>:<fine>")
                arg = tuple(arg.split(":"))
                tax.hierarchy.setdefault(arg, set())
            elif kind == "labels":
                tax.labels.setdefault(arg, [])
            else:
                tax.edges.setdefault(arg, set())
            section = (kind, arg)
            continue
        if section is None:
            raise ParseError(f"{source}:{lineno}: content before any section")
        kind, arg = section
        fields = line.split()
        if kind == "labels":
            tax.labels[arg].append(fields[0])
            if len(fields) > 1:
                tax.tokens[(arg, fields[0])] = fields[1:]
        elif len(fields) != 2:
            raise ParseError(f"{source}:{lineno}: expected a label pair, got {line!r}")
        elif kind == "edges":
            a, b = fields
            if b == "*":
                if arg not in tax.labels:
                    raise ParseError(f"{source}:{lineno}: wildcard edge before labels of {arg!r}")
                tax.edges[arg].update(frozenset((a, x)) for x in tax.labels[arg] if x != a)
            elif a == b:
                raise TaxonomyError(f"{source}:{lineno}: self-loop {a!r}")
            else:
                tax.edges[arg].add(frozenset((a, b)))
        else:
            tax.hierarchy[arg].add((fields[0], fields[1]))
    for ds in tax.edges:
        if ds not in tax.labels:
            raise TaxonomyError(f"edges for unknown dataset {ds!r}")
    for key in tax.hierarchy:
        for ds in key:
            if ds not in tax.labels:
                raise TaxonomyError(f"hierarchy references unknown dataset {ds!r}")
    tax.validate()
    return tax


def load_taxonomy(path=None) -> LabelTaxonomy:
    """Load a taxonomy file; ``None`` loads the shipped synthetic taxonomy."""
    if path is None:
        text = resources.files("graphparse").joinpath("data/taxonomy.txt").read_text("utf-8")
        return parse_taxonomy(text, "taxonomy.txt")
    return parse_taxonomy(Path(path).read_text("utf-8"), str(path))


# ------------------------------------------------------------- adjacency


@dataclass
class AdjacencyMatrix:
    values: np.ndarray
    dataset_id: str


def connectivity_matrix(taxonomy: LabelTaxonomy, dataset_id: str) -> np.ndarray:
    n = taxonomy.num_labels(dataset_id)
    a = np.zeros((n, n))
    for e in taxonomy.edges.get(dataset_id, ()):
        i, j = (taxonomy.index(dataset_id, lab) for lab in e)
        a[i, j] = a[j, i] = 1.0
    return a


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    a = np.asarray(a, dtype=np.float64) + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d[:, None] * d[None, :]


def build_adjacency(taxonomy: LabelTaxonomy, dataset_id: str) -> AdjacencyMatrix:
    return AdjacencyMatrix(normalize_adjacency(connectivity_matrix(taxonomy, dataset_id)),
                           dataset_id)


# ------------------------------------------------------- transfer matrices


@dataclass
class TransferMatrix:
    """``values[i, j]`` weighs source node j into target node i.

    Static schemes hold a numpy array; the feature scheme holds a Tensor so
    gradients can reach both graphs.
    """
    values: object
    scheme: str
    source_dataset: str
    target_dataset: str


def handcraft_transfer(taxonomy: LabelTaxonomy, src_dataset: str,
                       tgt_dataset: str) -> TransferMatrix:
    pairs = taxonomy.hierarchy_pairs(tgt_dataset, src_dataset)
    if pairs is None:
        raise ConfigError(f"no hierarchy between {src_dataset!r} and {tgt_dataset!r}")
    m = np.zeros((taxonomy.num_labels(tgt_dataset), taxonomy.num_labels(src_dataset)))
    for t, s in pairs:
        m[taxonomy.index(tgt_dataset, t), taxonomy.index(src_dataset, s)] = 1.0
    m[0, 0] = 1.0
    return TransferMatrix(m, "handcraft", src_dataset, tgt_dataset)


@dataclass
class WordEmbeddingTable:
    dimension: int
    entries: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def vector(self, tokens: Sequence[str], label: str = "") -> np.ndarray:
        missing = [t for t in tokens if t not in self.entries]
        if missing:
            raise DataError(f"no embedding for label {label or tokens!r} (tokens {missing})")
        v = np.mean([self.entries[t] for t in tokens], axis=0)
        if not np.any(v):
            raise DataError(f"zero-norm embedding for label {label!r}")
        return v


def load_embeddings(path) -> WordEmbeddingTable:
    """Read the word2vec text layout: ``count dim`` then ``token v1 .. vdim``."""
    lines = Path(path).read_text("utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty embedding file")
    head = lines[0].split()
    try:
        count, dim = int(head[0]), int(head[1])
        if len(head) != 2 or count < 0 or dim < 1:
            raise ValueError
    except (ValueError, IndexError):
        raise ParseError(f"{path}:1: header must be '<count> <dim>'") from None
    table = WordEmbeddingTable(dim)
    body = [(n, ln) for n, ln in enumerate(lines[1:], 2) if ln.strip()]
    for lineno, line in body:
        fields = line.split()
        if len(fields) != dim + 1:
            raise ParseError(f"{path}:{lineno}: expected token and {dim} values, "
                             f"got {len(fields) - 1} values")
        try:
            vec = np.array([float(x) for x in fields[1:]])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric value") from None
        if fields[0] in table.entries:
            raise DataError(f"{path}:{lineno}: duplicate token {fields[0]!r}")
        table.entries[fields[0]] = vec
    if len(table.entries) != count:
        raise ParseError(f"{path}:1: header declares {count} entries, file has {len(table.entries)}")
    return table


def format_embeddings(table: WordEmbeddingTable) -> str:
    out = [f"{len(table.entries)} {table.dimension}"]
    for tok, vec in table.entries.items():
        out.append(tok + " " + " ".join(repr(float(x)) for x in vec))
    return "\n".join(out) + "\n"


def save_embeddings(table: WordEmbeddingTable, path):
    Path(path).write_text(format_embeddings(table), "utf-8")


def load_shipped_embeddings() -> WordEmbeddingTable:
    with resources.as_file(resources.files("graphparse").joinpath("data/embeddings.txt")) as p:
        return load_embeddings(p)


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    ua = np.divide(a, na, out=np.zeros_like(a), where=na > 0)
    ub = np.divide(b, nb, out=np.zeros_like(b), where=nb > 0)
    return ua @ ub.T


def _row_softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def label_embeddings(taxonomy: LabelTaxonomy, embeddings: WordEmbeddingTable,
                     dataset: str) -> np.ndarray:
    return np.stack([embeddings.vector(taxonomy.label_tokens(dataset, lab), lab)
                     for lab in taxonomy._labels(dataset)])


def semantic_transfer(taxonomy: LabelTaxonomy, embeddings: WordEmbeddingTable,
                      src_dataset: str, tgt_dataset: str) -> TransferMatrix:
    sim = _cosine(label_embeddings(taxonomy, embeddings, tgt_dataset),
                  label_embeddings(taxonomy, embeddings, src_dataset))
    return TransferMatrix(_row_softmax(sim), "semantic", src_dataset, tgt_dataset)


def hierarchy_projection(taxonomy: LabelTaxonomy, fine_dataset: str,
                         coarse_dataset: str) -> Dict[str, str]:
    """Map every fine label to its unique coarse ancestor.

    Uses the direct hierarchy section when present, otherwise composes along
    the chain of intermediate granularities.
    """
    if fine_dataset == coarse_dataset:
        return {lab: lab for lab in taxonomy._labels(fine_dataset)}
    if (coarse_dataset, fine_dataset) in taxonomy.hierarchy:
        pairs = taxonomy.hierarchy[(coarse_dataset, fine_dataset)]
        mapping = {BACKGROUND: BACKGROUND}
        for f in taxonomy._labels(fine_dataset)[1:]:
            parents = sorted(c for c, ff in pairs if ff == f)
            if len(parents) != 1:
                raise TaxonomyError(f"{fine_dataset}:{f} has {len(parents)} parents in "
                                    f"{coarse_dataset} ({parents}); expected exactly one")
            mapping[f] = parents[0]
        return mapping
    # compose through an intermediate level
    for (c, mid) in taxonomy.hierarchy:
        if c == coarse_dataset and (mid, fine_dataset) in taxonomy.hierarchy:
            first = hierarchy_projection(taxonomy, fine_dataset, mid)
            second = hierarchy_projection(taxonomy, mid, coarse_dataset)
            return {f: second[m] for f, m in first.items()}
    raise ConfigError(f"no hierarchy path from {fine_dataset!r} to {coarse_dataset!r}")


def projection_lut(taxonomy: LabelTaxonomy, fine_dataset: str, coarse_dataset: str) -> np.ndarray:
    """Index lookup table ``lut[fine_index] -> coarse_index``."""
    mapping = hierarchy_projection(taxonomy, fine_dataset, coarse_dataset)
    return np.array([taxonomy.index(coarse_dataset, mapping[f])
                     for f in taxonomy.labels[fine_dataset]], dtype=np.int64)


def flip_permutation(taxonomy: LabelTaxonomy, dataset: str) -> np.ndarray:
    """Index permutation swapping every ``left-*`` label with its ``right-*`` twin."""
    names = taxonomy.labels[dataset]
    perm = np.arange(len(names))
    for i, name in enumerate(names):
        for a, b in (("left-", "right-"), ("right-", "left-")):
            if name.startswith(a) and b + name[len(a):] in names:
                perm[i] = names.index(b + name[len(a):])
    return perm


def static_transfer(taxonomy: LabelTaxonomy, scheme: str, src: str, tgt: str,
                    embeddings: Optional[WordEmbeddingTable] = None) -> TransferMatrix:
    if scheme == "handcraft":
        return handcraft_transfer(taxonomy, src, tgt)
    if scheme == "semantic":
        if embeddings is None:
            raise ConfigError("semantic transfer needs a word-embedding table")
        return semantic_transfer(taxonomy, embeddings, src, tgt)
    raise ConfigError(f"scheme {scheme!r} has no static matrix")


__all__ = [
    "AdjacencyMatrix", "LabelTaxonomy", "TransferMatrix", "WordEmbeddingTable", "SCHEMES",
    "build_adjacency", "connectivity_matrix", "flip_permutation", "format_embeddings",
    "handcraft_transfer", "hierarchy_projection", "label_embeddings", "load_embeddings",
    "load_shipped_embeddings", "load_taxonomy", "normalize_adjacency", "parse_taxonomy",
    "projection_lut", "save_embeddings", "semantic_transfer", "static_transfer",
]
