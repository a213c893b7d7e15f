"""Virtual-graph generation: discard sparse cells, merge similar neighbours,
and build top-fraction adjacency matrices over the merged regions."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ingest import DemandTensor, GridSpec, ODTensor

EARTH_RADIUS_KM = 6371.0
GRAPH_KINDS = ("distance", "correlation", "mobility")


class GraphGenError(ValueError):
    pass


@dataclass(frozen=True)
class RegionStats:
    cell_id: int
    mean_demand: float
    series: np.ndarray


@dataclass(frozen=True)
class VirtualNode:
    node_id: int
    member_cells: tuple[int, ...]
    centroid: tuple[float, float]
    series: np.ndarray


@dataclass
class VirtualGraphSet:
    nodes: list[VirtualNode]
    adj_distance: np.ndarray
    adj_correlation: np.ndarray
    adj_mobility: np.ndarray | None = None

    @property
    def graph_count(self) -> int:
        return 2 if self.adj_mobility is None else 3

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def adjacency(self, kind: str) -> np.ndarray:
        adj = {"distance": self.adj_distance, "correlation": self.adj_correlation,
               "mobility": self.adj_mobility}[kind]
        if adj is None:
            raise GraphGenError(f"{kind} graph unavailable")
        return adj

    def available(self) -> tuple[str, ...]:
        return GRAPH_KINDS[: self.graph_count]

    def member_matrix(self, n_cells: int) -> np.ndarray:
        """0/1 matrix (n_cells x N) mapping cells to the node that contains them."""
        P = np.zeros((n_cells, self.n_nodes))
        for k, node in enumerate(self.nodes):
            P[list(node.member_cells), k] = 1.0
        return P

    def to_json(self) -> str:
        doc = {
            "graph_count": self.graph_count,
            "nodes": [{"id": n.node_id, "members": list(n.member_cells),
                       "centroid": [n.centroid[0], n.centroid[1]]} for n in self.nodes],
            "edges": {kind: _edge_list(self.adjacency(kind)) for kind in self.available()},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str, series: np.ndarray | None = None) -> "VirtualGraphSet":
        """Rebuild from :meth:`to_json`; ``series`` is per-cell demand (T x cells)
        used to restore node series, which are not serialized."""
        doc = json.loads(text)
        nodes = []
        for rec in doc["nodes"]:
            members = tuple(rec["members"])
            s = series[:, list(members)].sum(axis=1) if series is not None else np.zeros(0)
            nodes.append(VirtualNode(rec["id"], members, tuple(rec["centroid"]), s))
        n = len(nodes)
        adj = {kind: _from_edges(edges, n) for kind, edges in doc["edges"].items()}
        return cls(nodes, adj["distance"], adj["correlation"], adj.get("mobility"))

    @classmethod
    def load(cls, path: str | Path, series: np.ndarray | None = None) -> "VirtualGraphSet":
        return cls.from_json(Path(path).read_text(), series)


def _edge_list(adj: np.ndarray) -> list[list[int]]:
    i, j = np.nonzero(np.triu(adj, 1))
    return [[int(a), int(b)] for a, b in zip(i, j)]


def _from_edges(edges, n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=np.int8)
    for a, b in edges:
        adj[a, b] = adj[b, a] = 1
    return adj


# step 1: discard sparse regions

def compute_stats(demand: DemandTensor | np.ndarray, train_range: tuple[int, int]) -> list[RegionStats]:
    values = demand.values if isinstance(demand, DemandTensor) else np.asarray(demand)
    lo, hi = train_range
    if not 0 <= lo < hi <= values.shape[0]:
        raise GraphGenError(f"train range {train_range} empty or outside 0..{values.shape[0]}")
    window = values[lo:hi].astype(np.float64)
    means = window.mean(axis=0)
    return [RegionStats(c, float(means[c]), window[:, c]) for c in range(values.shape[1])]


def discard_sparse(stats: Sequence[RegionStats], delta: float) -> list[int]:
    """Cells whose mean demand is at least ``delta`` (sparse means ``< delta``)."""
    if delta < 0:
        raise GraphGenError("delta must be nonnegative")
    kept = [s.cell_id for s in stats if not s.mean_demand < delta]
    if not kept:
        raise GraphGenError(f"no significant regions at delta={delta}")
    return kept


# step 2: aggregate similar neighbours

def pearson(a, b, *, return_degenerate: bool = False):
    """Pearson correlation; 0.0 when either series is constant.

    With ``return_degenerate`` the result is ``(r, flag)`` where ``flag``
    marks the zero-variance case.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GraphGenError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise GraphGenError("pearson needs at least two samples")
    da = a - a.mean()
    db = b - b.mean()
    saa = float(da @ da)
    sbb = float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        return (0.0, True) if return_degenerate else 0.0
    r = float(da @ db) / math.sqrt(saa * sbb)
    r = min(1.0, max(-1.0, r))
    return (r, False) if return_degenerate else r


def pearson_matrix(series: np.ndarray) -> np.ndarray:
    """Pairwise Pearson over columns of ``series`` (T x n); constant columns score 0."""
    x = np.asarray(series, dtype=np.float64)
    d = x - x.mean(axis=0)
    norm = np.sqrt((d * d).sum(axis=0))
    ok = norm > 0
    z = np.zeros_like(d)
    z[:, ok] = d[:, ok] / norm[ok]
    r = np.clip(z.T @ z, -1.0, 1.0)
    r[~ok, :] = 0.0
    r[:, ~ok] = 0.0
    # exact self-similarity for nonconstant series
    idx = np.flatnonzero(ok)
    r[idx, idx] = 1.0
    return r


def spatial_neighbors(cells: Sequence[int], spec: GridSpec) -> dict[int, list[int]]:
    """8-neighbourhood adjacency restricted to ``cells``."""
    present = set(int(c) for c in cells)
    out: dict[int, list[int]] = {}
    for c in cells:
        r, col = spec.row_col(c)
        nbrs = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == dc == 0:
                    continue
                rr, cc = r + dr, col + dc
                if 0 <= rr < spec.rows and 0 <= cc < spec.cols:
                    k = rr * spec.cols + cc
                    if k in present:
                        nbrs.append(k)
        out[int(c)] = sorted(nbrs)
    return out


def aggregate_clusters(cells: Sequence[int], r: np.ndarray, neighbors: dict[int, list[int]],
                       epsilon: float) -> list[tuple[int, ...]]:
    """Greedy merge of similar neighbouring cells into clusters.

    ``r`` is the Pearson matrix indexed like ``cells``. Seeds are visited in
    ascending cell order. A seed collects its unclaimed neighbours with
    correlation above ``epsilon``; a candidate is dropped when one of its
    own similar neighbours correlates with it more strongly than the seed
    does. Seeds with no similar unclaimed neighbour stay unclaimed (a later
    seed may absorb them); whatever remains becomes a singleton.
    """
    cells = sorted(int(c) for c in cells)
    pos = {c: i for i, c in enumerate(cells)}
    labeled = {c: False for c in cells}
    clusters: list[tuple[int, ...]] = []

    def similar(c: int) -> list[int]:
        return [k for k in neighbors[c] if r[pos[k], pos[c]] > epsilon]

    for i in cells:
        if labeled[i]:
            continue
        cand = [j for j in similar(i) if not labeled[j]]
        if not cand:
            continue
        members = []
        for j in cand:
            rij = r[pos[i], pos[j]]
            rivals = [r[pos[k], pos[j]] for k in similar(j)]
            if rivals and max(rivals) > rij:
                continue
            members.append(j)
        for j in members:
            labeled[j] = True
        labeled[i] = True
        clusters.append((i, *members))

    clusters.extend((c,) for c in cells if not any(c in cl for cl in clusters))
    return sorted((tuple(sorted(cl)) for cl in clusters), key=lambda cl: cl[0])


def aggregate_regions(s_new: Sequence[int], series: np.ndarray, epsilon: float,
                      spec: GridSpec) -> list[VirtualNode]:
    """Merge retained cells into virtual nodes.

    ``series`` is the per-cell demand matrix (T x n_cells) over the training
    window; node series are member sums, centroids the mean of member centres.
    """
    if not -1.0 < epsilon <= 1.0:
        raise GraphGenError(f"epsilon must lie in (-1, 1], got {epsilon}")
    cells = sorted(int(c) for c in s_new)
    series = np.asarray(series, dtype=np.float64)
    r = pearson_matrix(series[:, cells])
    clusters = aggregate_clusters(cells, r, spatial_neighbors(cells, spec), epsilon)
    nodes = []
    for k, members in enumerate(clusters):
        centers = np.array([spec.cell_center(c) for c in members])
        lat, lon = centers.mean(axis=0)
        nodes.append(VirtualNode(k, members, (float(lat), float(lon)),
                                 series[:, list(members)].sum(axis=1)))
    return nodes


# step 3: graphs

def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def region_distance(a: VirtualNode, b: VirtualNode) -> float:
    return haversine_km(a.centroid, b.centroid)


def mobility_score(od: ODTensor, a: VirtualNode, b: VirtualNode) -> float:
    """Trips between the two nodes' cells, both directions."""
    ia, ib = list(a.member_cells), list(b.member_cells)
    c = od.counts
    return float(c[np.ix_(ia, ib)].sum() + c[np.ix_(ib, ia)].sum())


def neighbor_count(n: int, frac: float) -> int:
    return max(1, int(math.floor(frac * (n - 1) + 1e-9)))


def build_adjacency(scores: np.ndarray, frac: float = 0.1) -> np.ndarray:
    """Connect each row to its ``max(1, floor(frac*(N-1)))`` best-scoring
    other nodes (ties go to the lower index), then symmetrize by union."""
    s = np.array(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise GraphGenError(f"score matrix must be square, got {s.shape}")
    n = s.shape[0]
    if n < 2:
        raise GraphGenError("need at least two nodes")
    if not 0 < frac <= 1:
        raise GraphGenError(f"frac must lie in (0, 1], got {frac}")
    k = neighbor_count(n, frac)
    s[np.isnan(s)] = -np.inf
    adj = np.zeros((n, n), dtype=np.int8)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        order = np.argsort(-s[i, others], kind="stable")
        adj[i, others[order[:k]]] = 1
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0)
    return adj


def distance_scores(nodes: Sequence[VirtualNode]) -> np.ndarray:
    n = len(nodes)
    s = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = region_distance(nodes[i], nodes[j])
            s[i, j] = s[j, i] = math.inf if d == 0 else 1.0 / d
    return s


def mobility_scores(od: ODTensor, nodes: Sequence[VirtualNode]) -> np.ndarray:
    n = len(nodes)
    s = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s[i, j] = s[j, i] = mobility_score(od, nodes[i], nodes[j])
    return s


def build_graphs(nodes: Sequence[VirtualNode], od: ODTensor | None = None,
                 frac: float = 0.1) -> VirtualGraphSet:
    nodes = list(nodes)
    if len(nodes) < 2:
        raise GraphGenError("need at least two virtual nodes to build graphs")
    series = np.stack([n.series for n in nodes], axis=1)
    adj_d = build_adjacency(distance_scores(nodes), frac)
    adj_c = build_adjacency(pearson_matrix(series), frac)
    adj_m = build_adjacency(mobility_scores(od, nodes), frac) if od is not None else None
    return VirtualGraphSet(nodes, adj_d, adj_c, adj_m)


@dataclass
class GraphReport:
    n_cells: int
    n_significant: int
    n_virtual: int
    graph_count: int


def generate(demand: DemandTensor, train_range: tuple[int, int], spec: GridSpec,
             od: ODTensor | None = None, delta: float = 1.0, epsilon: float = 0.5,
             frac: float = 0.1) -> tuple[VirtualGraphSet, GraphReport]:
    """Discard, aggregate and connect, all from the training window only."""
    stats = compute_stats(demand, train_range)
    kept = discard_sparse(stats, delta)
    lo, hi = train_range
    nodes = aggregate_regions(kept, demand.values[lo:hi], epsilon, spec)
    graphs = build_graphs(nodes, od, frac)
    return graphs, GraphReport(demand.n_units, len(kept), len(nodes), graphs.graph_count)


def node_demand(demand: DemandTensor, graphs: VirtualGraphSet) -> np.ndarray:
    """Full-period demand per virtual node (T x N)."""
    return demand.values.astype(np.float64) @ graphs.member_matrix(demand.n_units)
