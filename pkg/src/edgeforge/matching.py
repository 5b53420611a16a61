"""Polyline matching across views: weighted similarity and Louvain communities."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .edge_graph import Polyline2D, ViewEdges

logger = logging.getLogger(__name__)


class ZeroDenominator(ArithmeticError):
    pass


@dataclass(eq=False)
class ReferencePoint:
    """Sparse SfM point with its per-view image observations."""

    id: str
    position: np.ndarray
    observations: dict[str, np.ndarray]
    weight_cache: float | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.observations = {v: np.asarray(uv, dtype=float).reshape(2) for v, uv in self.observations.items()}


NodeKey = tuple[str, int]


@dataclass
class SimilarityGraph:
    nodes: list[NodeKey]
    weights: dict[tuple[NodeKey, NodeKey], float] = field(default_factory=dict)

    def add_edge(self, a: NodeKey, b: NodeKey, w: float) -> None:
        if a[0] == b[0]:
            raise ValueError("polylines of the same view cannot be linked")
        if w <= 0:
            raise ValueError("similarity edges must have positive weight")
        self.weights[(a, b) if a < b else (b, a)] = float(w)

    def neighbors(self) -> dict[NodeKey, dict[NodeKey, float]]:
        nb: dict[NodeKey, dict[NodeKey, float]] = {n: {} for n in self.nodes}
        for (a, b), w in self.weights.items():
            nb[a][b] = w
            nb[b][a] = w
        return nb


@dataclass
class PEC:
    """Polylines on several views hypothesized to image the same 3D edge."""

    views: dict[str, list[int]]

    def __post_init__(self):
        if len(self.views) < 2:
            raise ValueError("a PEC spans at least two views")

    def to_json(self) -> dict:
        return {"views": {v: list(p) for v, p in self.views.items()}}


def close_points(pl: Polyline2D, view: str, refs, d_plmatch: float) -> set[str]:
    """Ids of reference points whose observation in ``view`` lies within ``d_plmatch`` of ``pl``."""
    out = set()
    for r in refs:
        uv = r.observations.get(view)
        if uv is not None and pl.distance(uv) <= d_plmatch:
            out.add(r.id)
    return out


def nearby_counts(r: ReferencePoint, views: dict[str, ViewEdges], d_plmatch: float) -> dict[str, list[int]]:
    """Per observing view, the polylines within ``d_plmatch`` of the observation."""
    return {v: views[v].near(uv, d_plmatch) for v, uv in r.observations.items() if v in views}


def point_weight(r: ReferencePoint, views: dict[str, ViewEdges], d_plmatch: float) -> float:
    """Inverse of the mean number of polylines near ``r`` over its observing views."""
    near = nearby_counts(r, views, d_plmatch)
    total = sum(len(p) for p in near.values())
    if not near or total == 0:
        raise ZeroDenominator(f"reference point {r.id} is not near any polyline")
    return len(near) / total


def polyline_similarity(close_a: set, close_b: set, weights: dict) -> float:
    """Weighted intersection over union of two close-point sets."""
    # fsum is exact, so the result does not depend on set iteration order
    den = math.fsum(weights[r] for r in close_a | close_b if r in weights)
    if den <= 0:
        return 0.0
    num = math.fsum(weights[r] for r in close_a & close_b if r in weights)
    return num / den


def close_sets(views: dict[str, ViewEdges], refs, d_plmatch: float):
    """Close-point sets per polyline node and the weight of every usable point."""
    close: dict[NodeKey, set] = defaultdict(set)
    weights: dict[str, float] = {}
    for r in refs:
        near = nearby_counts(r, views, d_plmatch)
        total = sum(len(p) for p in near.values())
        if total == 0:
            continue
        weights[r.id] = len(near) / total
        r.weight_cache = weights[r.id]
        for v, pids in near.items():
            for pid in pids:
                close[(v, pid)].add(r.id)
    return close, weights


def build_similarity_graph(views: dict[str, ViewEdges], refs, d_plmatch: float = 4.0, min_sim: float = 0.05,
                           view_order=None) -> SimilarityGraph:
    """Link polylines of different views whose similarity is at least ``min_sim``."""
    order = view_order or {v: i for i, v in enumerate(views)}
    nodes = sorted(((v, pid) for v, ve in views.items() for pid in range(len(ve))),
                   key=lambda n: (order[n[0]], n[1]))
    graph = SimilarityGraph(nodes)
    close, weights = close_sets(views, refs, d_plmatch)
    by_ref: dict[str, list[NodeKey]] = defaultdict(list)
    for node in sorted(close, key=lambda n: (order[n[0]], n[1])):
        for rid in close[node]:
            by_ref[rid].append(node)
    pairs = set()
    for members in by_ref.values():
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if a[0] != b[0]:
                    pairs.add((a, b))
    for a, b in sorted(pairs, key=lambda p: (order[p[0][0]], p[0][1], order[p[1][0]], p[1][1])):
        s = polyline_similarity(close[a], close[b], weights)
        if s >= min_sim and s > 0:
            graph.add_edge(a, b, s)
    return graph


def modularity(adj: list[dict[int, float]], communities: list[int]) -> float:
    """Newman modularity (resolution 1) of a node -> community assignment."""
    m2 = sum(sum(nb.values()) for nb in adj)
    if m2 == 0:
        return 0.0
    k = [sum(nb.values()) for nb in adj]
    inner: dict[int, float] = defaultdict(float)
    tot: dict[int, float] = defaultdict(float)
    for i, nb in enumerate(adj):
        tot[communities[i]] += k[i]
        for j, w in nb.items():
            if communities[i] == communities[j]:
                inner[communities[i]] += w
    return sum(inner[c] / m2 - (tot[c] / m2) ** 2 for c in tot)


def _local_moving(adj: list[dict[int, float]], m2: float) -> list[int]:
    n = len(adj)
    comm = list(range(n))
    k = [sum(nb.values()) for nb in adj]
    tot = k[:]
    moved = True
    while moved:
        moved = False
        for i in range(n):
            ci = comm[i]
            links: dict[int, float] = defaultdict(float)
            for j, w in adj[i].items():
                if j != i:
                    links[comm[j]] += w
            tot[ci] -= k[i]
            # gain of joining community c, up to a constant shared by all c
            stay_gain = links.get(ci, 0.0) - tot[ci] * k[i] / m2
            best_c, best_gain = ci, stay_gain
            for c in sorted(links):
                gain = links[c] - tot[c] * k[i] / m2
                if gain > best_gain + 1e-12:
                    best_c, best_gain = c, gain
            # sorted scan keeps the smallest id among equal gains
            if best_gain <= stay_gain + 1e-12:
                best_c = ci
            tot[best_c] += k[i]
            if best_c != ci:
                comm[i] = best_c
                moved = True
    return comm


def louvain(adj: list[dict[int, float]], return_history: bool = False):
    """Louvain modularity maximization on a weighted undirected graph.

    ``adj[i]`` maps neighbour index to weight.  Nodes are visited in index
    order and ties go to the smallest community id, so the result is fully
    deterministic.  Returns a community label per node (labels are
    0..C-1 ordered by first member), plus the per-pass modularity history
    when requested.
    """
    n = len(adj)
    m2 = sum(sum(nb.values()) for nb in adj)
    membership = list(range(n))
    history = [modularity(adj, membership)]
    if m2 == 0:
        labels = _relabel(membership)
        return (labels, history) if return_history else labels
    level = [dict(nb) for nb in adj]
    while True:
        comm = _relabel(_local_moving(level, m2))
        ncomm = max(comm) + 1
        if ncomm == len(level):
            break
        membership = [comm[c] for c in membership]
        q = modularity(adj, membership)
        if q < history[-1] - 1e-12:
            raise AssertionError("Louvain pass decreased modularity")
        history.append(q)
        agg: list[dict[int, float]] = [defaultdict(float) for _ in range(ncomm)]
        for i, nb in enumerate(level):
            for j, w in nb.items():
                agg[comm[i]][comm[j]] += w
        level = [dict(d) for d in agg]
    labels = _relabel(membership)
    return (labels, history) if return_history else labels


def _relabel(comm: list[int]) -> list[int]:
    mapping: dict[int, int] = {}
    return [mapping.setdefault(c, len(mapping)) for c in comm]


def detect_communities(g: SimilarityGraph) -> list[PEC]:
    """Louvain communities of the similarity graph that span two or more views."""
    index = {node: i for i, node in enumerate(g.nodes)}
    adj: list[dict[int, float]] = [{} for _ in g.nodes]
    for (a, b), w in g.weights.items():
        adj[index[a]][index[b]] = w
        adj[index[b]][index[a]] = w
    labels = louvain(adj)
    groups: dict[int, dict[str, list[int]]] = defaultdict(lambda: defaultdict(list))
    for node, lab in zip(g.nodes, labels):
        groups[lab][node[0]].append(node[1])
    pecs = []
    for lab in sorted(groups):
        views = groups[lab]
        if len(views) >= 2:
            pecs.append(PEC({v: sorted(p) for v, p in views.items()}))
    return pecs
