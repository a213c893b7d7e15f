"""From grid cells to virtual graphs.

We plant four demand clusters on a 6x6 grid, then let the aggregation
recover them. Each printed block shows one stage of graph construction.
"""
import numpy as np

from vgnn import graphgen
from vgnn.experiments import cluster_purity
from vgnn.trainer import split, synth_generate

syn = synth_generate(n_cells=36, T=60 * 24, seed=7)
print("planted cluster of each cell (6x6 grid):")
print(syn.labels.reshape(6, 6))

train_range = split(syn.demand.n_slots)[0]
stats = graphgen.compute_stats(syn.demand, train_range)
kept = graphgen.discard_sparse(stats, delta=1.0)
print(f"\n{len(kept)} of {len(stats)} cells average at least one trip per hour")

lo, hi = train_range
nodes = graphgen.aggregate_regions(kept, syn.demand.values[lo:hi], epsilon=0.5, spec=syn.grid)
node_of = np.full(36, -1)
for n in nodes:
    node_of[list(n.member_cells)] = n.node_id
print(f"\naggregation at epsilon=0.5 gives {len(nodes)} virtual nodes:")
print(node_of.reshape(6, 6))

graphs = graphgen.build_graphs(nodes, syn.od, frac=0.1)
print(f"\ncluster purity {cluster_purity(graphs, syn.labels):.0%}")
for kind in graphs.available():
    a = graphs.adjacency(kind)
    print(f"{kind:>12}: {a.sum() // 2} edges, degree {a.sum(axis=1).min()}..{a.sum(axis=1).max()}")

# Edges of the correlation and mobility graphs should mostly stay inside a cluster.
label = np.array([syn.labels[n.member_cells[0]] for n in nodes])
for kind in graphs.available():
    i, j = np.nonzero(np.triu(graphs.adjacency(kind)))
    print(f"{kind:>12}: {np.mean(label[i] == label[j]):.0%} of edges join nodes of one cluster")
