"""
Label graphs and transfer matrices
==================================

Walk through the pieces of the graph head on the shipped synthetic
taxonomy: the normalised body graph of each label set, the three static or
dynamic transfer matrices between two label sets, and one pass of
intra-graph reasoning over a random feature map.
"""
import numpy as np

from graphparse import graphnn, numcore as nc
from graphparse.taxonomy import (build_adjacency, handcraft_transfer, load_shipped_embeddings,
                                 load_taxonomy, semantic_transfer)

np.set_printoptions(precision=3, suppress=True, linewidth=120)
tax = load_taxonomy()

# Three label sets of 7, 18 and 20 classes, background first.
for ds in tax.datasets:
    print(ds, tax.num_labels(ds), tax.labels[ds][:6], "...")

# The normalised adjacency D^-1/2 (A + I) D^-1/2 of the coarse body graph.
adj = build_adjacency(tax, "coarse")
print("\ncoarse adjacency\n", adj.values)
print("eigenvalues", np.linalg.eigvalsh(adj.values))

# Handcraft transfer: 1 where a fine label sits under a coarse one.
hand = handcraft_transfer(tax, "fine", "coarse").values
head = tax.index("coarse", "head")
print("\nfine labels under 'head':", [tax.labels["fine"][j] for j in np.flatnonzero(hand[head])])

# Semantic transfer: softmax of word-vector cosine similarity.
sem = semantic_transfer(tax, load_shipped_embeddings(), "fine", "coarse").values
print("semantic row for 'head' (top 4):")
for j in np.argsort(sem[head])[::-1][:4]:
    print(f"   {tax.labels['fine'][j]:<12}{sem[head, j]:.3f}")

# Feature-similarity transfer is recomputed from node features every pass.
rs = np.random.default_rng(0)
z_fine = nc.Tensor(rs.normal(size=(20, 8)))
z_coarse = nc.Tensor(rs.normal(size=(7, 8)))
feat = graphnn.feature_similarity_transfer(z_fine, z_coarse).values.data
print("\nfeature-transfer rows sum to", feat.sum(1))

# Intra-graph reasoning: project pixels to 7 nodes, 3 GCN layers, project back.
x = nc.Tensor(rs.normal(size=(1, 16, 16, 12)))
params = graphnn.IntraParams(nc.Tensor(rs.normal(size=(12, 7))), nc.Tensor(rs.normal(size=(12, 8)) * 0.3),
                             [nc.Tensor(rs.normal(size=(8, 8)) * 0.3) for _ in range(3)],
                             nc.Tensor(rs.normal(size=(8, 12)) * 0.1))
out, graph, q = graphnn.intra_graph_reasoning(x, adj, params)
print("\nassignment", q.values.shape, "node features", graph.node_features.shape, "output", out.shape)
print("mean |update| per pixel", float(np.abs(out.data - x.data).mean()))
