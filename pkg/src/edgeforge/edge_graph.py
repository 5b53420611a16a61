"""2D edge-graphs built from binary edge bitmaps.

A node sits at the center of every edge pixel (pixel ``(col, row)`` covers
``[col, col+1) x [row, row+1)``, so its center is ``(col+0.5, row+0.5)``).
Adjacent pixels are linked unless the link would close a loop shorter
than 4 px.  Polylines are maximal chains whose interior nodes have degree 2.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

LOOP_MIN_LENGTH = 4.0
_FORWARD = ((0, 1), (1, -1), (1, 0), (1, 1))  # (drow, dcol), scanline order


class EdgeImageError(ValueError):
    pass


@dataclass
class EdgeImage:
    width: int
    height: int
    mask: np.ndarray  # (height, width) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.height, self.width):
            raise EdgeImageError(
                f"mask shape {self.mask.shape} does not match {self.height}x{self.width}"
            )

    @classmethod
    def from_mask(cls, mask) -> "EdgeImage":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask.shape[1], mask.shape[0], mask)


def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise EdgeImageError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_edge_image(path, threshold: int = 128) -> EdgeImage:
    """Load a P4/P5 PNM or 8-bit PNG as a binary edge mask.

    Gray values ``>= threshold`` are edge pixels.  For bit-packed P4 files a
    set bit (black ink) marks an edge pixel.
    """
    path = Path(path)
    data = path.read_bytes()
    magic = data[:2]
    if magic == b"P5":
        (w, h, maxval), pos = _pnm_tokens(data[2:], 3)
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=2 + pos)
        gray = raw.reshape(h, w).astype(float) * (255.0 / maxval)
        return EdgeImage(w, h, gray >= threshold)
    if magic == b"P4":
        (w, h), pos = _pnm_tokens(data[2:], 2)
        w, h = int(w), int(h)
        row_bytes = (w + 7) // 8
        raw = np.frombuffer(data, dtype=np.uint8, count=row_bytes * h, offset=2 + pos)
        bits = np.unpackbits(raw.reshape(h, row_bytes), axis=1)[:, :w]
        return EdgeImage(w, h, bits.astype(bool))
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"))
        return EdgeImage(gray.shape[1], gray.shape[0], gray >= threshold)
    raise EdgeImageError(f"{path}: unsupported edge image format")


def write_pgm(path, mask) -> None:
    """Write a binary mask as an 8-bit P5 PGM (edges = 255)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write((mask.astype(np.uint8) * 255).tobytes())


@dataclass
class EdgeGraph2D:
    nodes: np.ndarray  # (n, 2) float, (u, v)
    adjacency: list[list[int]]
    graph_id: str = ""

    @classmethod
    def empty(cls, graph_id="") -> "EdgeGraph2D":
        return cls(np.zeros((0, 2)), [], graph_id)

    @classmethod
    def from_edges(cls, nodes, edges, graph_id="") -> "EdgeGraph2D":
        nodes = np.asarray(nodes, dtype=float).reshape(-1, 2)
        adj: list[list[int]] = [[] for _ in range(len(nodes))]
        for i, j in edges:
            if i == j:
                raise ValueError("self-loop")
            if j in adj[i]:
                raise ValueError(f"duplicate edge ({i}, {j})")
            adj[i].append(j)
            adj[j].append(i)
        for a in adj:
            a.sort()
        return cls(nodes, adj, graph_id)

    def __len__(self):
        return len(self.nodes)

    @property
    def degrees(self) -> list[int]:
        return [len(a) for a in self.adjacency]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(i, j) for i, nb in enumerate(self.adjacency) for j in nb if i < j]

    def components(self) -> np.ndarray:
        """Connected-component label per node."""
        n = len(self.nodes)
        labels = np.full(n, -1, dtype=int)
        c = 0
        for s in range(n):
            if labels[s] >= 0:
                continue
            labels[s] = c
            stack = [s]
            while stack:
                u = stack.pop()
                for v in self.adjacency[u]:
                    if labels[v] < 0:
                        labels[v] = c
                        stack.append(v)
            c += 1
        return labels

    def subgraph(self, keep) -> "EdgeGraph2D":
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        adj = [
            [int(new_index[j]) for j in nb if keep[j]]
            for i, nb in enumerate(self.adjacency)
            if keep[i]
        ]
        return EdgeGraph2D(self.nodes[keep].copy(), adj, self.graph_id)

    def to_json(self) -> dict:
        return {
            "nodes": [[float(u), float(v)] for u, v in self.nodes],
            "edges": [[i, j] for i, j in self.edges],
        }

    @classmethod
    def from_json(cls, doc, graph_id="") -> "EdgeGraph2D":
        return cls.from_edges(doc["nodes"], doc["edges"], graph_id)


def _closes_short_loop(adj, nodes, src, dst, limit) -> bool:
    """True if a path src -> dst shorter than ``limit`` already exists."""
    best = {src: 0.0}
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if u == dst:
            return True
        if d > best[u]:
            continue
        pu = nodes[u]
        for v in adj[u]:
            pv = nodes[v]
            nd = d + math.hypot(pu[0] - pv[0], pu[1] - pv[1])
            if nd < limit - 1e-9 and nd < best.get(v, math.inf):
                best[v] = nd
                heapq.heappush(heap, (nd, v))
    return False


def build_graph(img: EdgeImage, bridge_gap: float = 0.0, graph_id: str = "") -> EdgeGraph2D:
    """Edge-graph with one node per edge pixel.

    Candidate 8-neighbour links are visited in scanline order and skipped
    when they would close a loop shorter than 4 px.  With ``bridge_gap > 0``
    chain ends (degree <= 1) of different components closer than
    ``bridge_gap`` are then linked, shortest gaps first.
    """
    rows, cols = np.nonzero(img.mask)
    n = len(rows)
    if n == 0:
        return EdgeGraph2D.empty(graph_id)
    index = np.full(img.mask.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(n)
    nodes = np.column_stack([cols + 0.5, rows + 0.5]).astype(float)
    pts = nodes.tolist()
    adj: list[list[int]] = [[] for _ in range(n)]
    H, W = img.mask.shape
    for i in range(n):
        r, c = int(rows[i]), int(cols[i])
        for dr, dc in _FORWARD:
            rr, cc = r + dr, c + dc
            if not (0 <= rr < H and 0 <= cc < W):
                continue
            j = int(index[rr, cc])
            if j < 0:
                continue
            w = math.sqrt(2.0) if dr and dc else 1.0
            if _closes_short_loop(adj, pts, i, j, LOOP_MIN_LENGTH - w):
                continue
            adj[i].append(j)
            adj[j].append(i)
    graph = EdgeGraph2D(nodes, adj, graph_id)
    if bridge_gap > 0:
        _bridge_gaps(graph, bridge_gap)
    for a in adj:
        a.sort()
    return graph


def _bridge_gaps(graph: EdgeGraph2D, radius: float) -> None:
    adj = graph.adjacency
    ends = np.array([i for i, a in enumerate(adj) if len(a) <= 1], dtype=int)
    if len(ends) < 2:
        return
    labels = graph.components()
    parent = {int(lab): int(lab) for lab in np.unique(labels)}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    tree = cKDTree(graph.nodes[ends])
    pairs = []
    for a, b in sorted(tree.query_pairs(radius + 1e-9)):
        i, j = int(ends[a]), int(ends[b])
        d = float(np.hypot(*(graph.nodes[i] - graph.nodes[j])))
        pairs.append((d, min(i, j), max(i, j)))
    for _, i, j in sorted(pairs):
        if len(adj[i]) > 1 or len(adj[j]) > 1:
            continue
        ri, rj = find(int(labels[i])), find(int(labels[j]))
        if ri == rj:
            continue
        parent[ri] = rj
        adj[i].append(j)
        adj[j].append(i)


def _point_segment_distance(p, a, b):
    """Distances from points ``p`` (n,2) to the segment ``a``-``b``."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(p - a).T)
    t = np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(p - proj).T)


@dataclass(eq=False)
class Polyline2D:
    """Ordered chain of graph nodes together with their coordinates."""

    node_indices: list[int]
    coords: np.ndarray
    graph_id: str = ""
    pid: int = -1

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        if len(self.coords) < 2:
            raise ValueError("a polyline needs at least 2 nodes")
        if len(self.node_indices) != len(self.coords):
            raise ValueError("node_indices and coords differ in length")

    @classmethod
    def from_points(cls, pts, graph_id="", pid=-1) -> "Polyline2D":
        pts = np.asarray(pts, dtype=float)
        return cls(list(range(len(pts))), pts, graph_id, pid)

    def __len__(self):
        return len(self.coords)

    @property
    def is_closed(self) -> bool:
        return self.node_indices[0] == self.node_indices[-1]

    @cached_property
    def seg_lengths(self) -> np.ndarray:
        return np.hypot(*np.diff(self.coords, axis=0).T)

    @cached_property
    def cum(self) -> np.ndarray:
        """Arc length at each vertex."""
        return np.concatenate([[0.0], np.cumsum(self.seg_lengths)])

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def arc(self, seg: int, t: float) -> float:
        return float(self.cum[seg] + t * self.seg_lengths[seg])

    def locate(self, s: float) -> tuple[int, float]:
        s = min(max(s, 0.0), self.length)
        seg = int(np.searchsorted(self.cum, s, side="right") - 1)
        seg = min(max(seg, 0), len(self.seg_lengths) - 1)
        L = self.seg_lengths[seg]
        t = 0.0 if L == 0 else (s - self.cum[seg]) / L
        return seg, min(max(t, 0.0), 1.0)

    def point_at(self, s: float) -> np.ndarray:
        seg, t = self.locate(s)
        return self.coords[seg] + t * (self.coords[seg + 1] - self.coords[seg])

    def closest_point(self, p) -> tuple[np.ndarray, int, float, float]:
        """Closest chain point to ``p`` as ``(point, seg, t, distance)``."""
        p = np.asarray(p, dtype=float)
        a, b = self.coords[:-1], self.coords[1:]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(denom > 0, np.einsum("ij,ij->i", p - a, ab) / denom, 0.0)
        t = np.clip(t, 0.0, 1.0)
        proj = a + t[:, None] * ab
        d = np.hypot(*(proj - p).T)
        k = int(np.argmin(d))
        return proj[k], k, float(t[k]), float(d[k])

    def distance(self, p) -> float:
        return self.closest_point(p)[3]

    def intersections(self, line, tol: float = 1e-9) -> list[tuple[int, float]]:
        """Crossings of the chain with ``line`` as ``(seg, t)``, in chain order.

        A vertex on the line, or a run of vertices on the line, counts once.
        """
        s = self.coords @ line[:2] + line[2]
        on = np.abs(s) <= tol
        out: list[tuple[int, float]] = []
        nseg = len(s) - 1
        prev_on = False
        for k in range(nseg + 1):
            if on[k]:
                if not prev_on:
                    out.append((k, 0.0) if k < nseg else (nseg - 1, 1.0))
                prev_on = True
                continue
            prev_on = False
            if k < nseg and not on[k + 1] and s[k] * s[k + 1] < 0:
                out.append((k, float(s[k] / (s[k] - s[k + 1]))))
        return out

    def first_intersection(self, line, s_from: float, direction: int, tol: float = 1e-9) -> float | None:
        """Arc position of the first crossing strictly beyond ``s_from``."""
        best = None
        for seg, t in self.intersections(line, tol):
            s = self.arc(seg, t)
            gap = (s - s_from) * direction
            if gap > 1e-9 and (best is None or gap < best[0]):
                best = (gap, s)
        return None if best is None else best[1]


def extract_polylines(g: EdgeGraph2D) -> list[Polyline2D]:
    """Split the graph into maximal chains at nodes whose degree is not 2.

    Pure cycles are cut at their topmost-leftmost node.  Every graph edge
    belongs to exactly one polyline.
    """
    adj = g.adjacency
    deg = [len(a) for a in adj]
    seen: set[tuple[int, int]] = set()
    chains: list[list[int]] = []

    def walk(start, nb):
        chain = [start, nb]
        seen.add((min(start, nb), max(start, nb)))
        prev, cur = start, nb
        while deg[cur] == 2 and cur != start:
            a, b = adj[cur]
            nxt = b if a == prev else a
            e = (min(cur, nxt), max(cur, nxt))
            if e in seen:
                break
            seen.add(e)
            chain.append(nxt)
            prev, cur = cur, nxt
        return chain

    for start in range(len(adj)):
        if deg[start] == 2:
            continue
        for nb in adj[start]:
            if (min(start, nb), max(start, nb)) not in seen:
                chains.append(walk(start, nb))
    order = sorted(range(len(adj)), key=lambda i: (g.nodes[i][1], g.nodes[i][0], i))
    for start in order:
        if deg[start] != 2:
            continue
        for nb in adj[start]:
            if (min(start, nb), max(start, nb)) not in seen:
                chains.append(walk(start, nb))
    return [
        Polyline2D(c, g.nodes[c], g.graph_id, pid) for pid, c in enumerate(chains)
    ]


def _douglas_peucker(pts: np.ndarray, tol: float) -> list[int]:
    keep = [0, len(pts) - 1]
    stack = [(0, len(pts) - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        d = _point_segment_distance(pts[i + 1 : j], pts[i], pts[j])
        k = int(np.argmax(d))
        if d[k] > tol:
            m = i + 1 + k
            keep.append(m)
            stack.append((i, m))
            stack.append((m, j))
    return sorted(set(keep))


def smooth_polyline(pl: Polyline2D, tol: float = 1.0) -> Polyline2D:
    """Douglas-Peucker simplification keeping both extremes.

    Every original vertex stays within ``tol`` of the output chain and all
    output vertices are original vertices.  Closed chains are split at the
    vertex farthest from their seam first.
    """
    pts = pl.coords
    if pl.is_closed or np.array_equal(pts[0], pts[-1]):
        if len(pts) <= 3:
            return pl
        far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
        left = _douglas_peucker(pts[: far + 1], tol)
        right = _douglas_peucker(pts[far:], tol)
        keep = left + [far + k for k in right[1:]]
    else:
        keep = _douglas_peucker(pts, tol)
    return Polyline2D([pl.node_indices[k] for k in keep], pts[keep], pl.graph_id, pl.pid)


def smooth_graph(g: EdgeGraph2D, tol: float = 1.0) -> EdgeGraph2D:
    """Replace every polyline of ``g`` by its smoothed version.

    Junctions are unchanged.  When two smoothed polylines would produce the
    same graph edge, the ones with interior vertices are split at their
    farthest interior vertex so the result stays a simple graph.
    """
    segments: dict[tuple[int, int], list[list[int]]] = {}
    for pl in extract_polylines(g):
        sm = smooth_polyline(pl, tol)
        last = 0
        for a, b in zip(sm.node_indices[:-1], sm.node_indices[1:]):
            # slice of the original chain between two kept vertices
            start = last
            end = _next_index(pl.node_indices, b, start)
            sub = pl.node_indices[start : end + 1]
            last = end
            segments.setdefault((min(a, b), max(a, b)), []).append(sub)
    edges: set[tuple[int, int]] = set()
    pending = [sub for subs in segments.values() for sub in subs]
    counts: dict[tuple[int, int], int] = {}
    for sub in pending:
        key = (min(sub[0], sub[-1]), max(sub[0], sub[-1]))
        counts[key] = counts.get(key, 0) + 1
    while pending:
        sub = pending.pop()
        a, b = sub[0], sub[-1]
        key = (min(a, b), max(a, b))
        if (counts[key] > 1 or a == b) and len(sub) > 2:
            inner = g.nodes[sub[1:-1]]
            d = _point_segment_distance(inner, g.nodes[a], g.nodes[b])
            m = 1 + int(np.argmax(d))
            counts[key] -= 1
            for part in (sub[: m + 1], sub[m:]):
                k2 = (min(part[0], part[-1]), max(part[0], part[-1]))
                counts[k2] = counts.get(k2, 0) + 1
                pending.append(part)
            continue
        edges.add(key)
    used = sorted({i for e in edges for i in e})
    remap = {old: new for new, old in enumerate(used)}
    return EdgeGraph2D.from_edges(
        g.nodes[used], [(remap[i], remap[j]) for i, j in sorted(edges)], g.graph_id
    )


def _next_index(chain, node, start):
    for k in range(start + 1, len(chain)):
        if chain[k] == node:
            return k
    raise ValueError("node not found in chain")


def turning_angles(pl: Polyline2D) -> np.ndarray:
    """Direction change (degrees) at each interior vertex."""
    d = np.diff(pl.coords, axis=0)
    a, b = d[:-1], d[1:]
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    dot = np.einsum("ij,ij->i", a, b)
    return np.degrees(np.abs(np.arctan2(cross, dot)))


def regular_length(pl: Polyline2D, alpha_R: float = 20.0) -> float:
    """Longest run of consecutive segments whose turns are all <= alpha_R."""
    lengths = pl.seg_lengths
    angles = turning_angles(pl)
    best = run = float(lengths[0])
    for k in range(1, len(lengths)):
        run = run + lengths[k] if angles[k - 1] <= alpha_R else float(lengths[k])
        best = max(best, run)
    return best


def filter_graph(g: EdgeGraph2D, alpha_R: float = 20.0, top_fraction: float = 0.10) -> EdgeGraph2D:
    """Drop connected components that hold none of the top-ranked polylines.

    ``L*`` is the smallest regular length among the top
    ``ceil(top_fraction * P)`` polylines; components whose best polyline is
    shorter are removed.  The rule is re-applied until nothing changes, which
    makes the filter idempotent.
    """
    polylines = extract_polylines(g)
    if not polylines:
        return EdgeGraph2D.empty(g.graph_id)
    labels = g.components()
    comp_rl: dict[int, list[float]] = {}
    for pl in polylines:
        comp_rl.setdefault(int(labels[pl.node_indices[0]]), []).append(regular_length(pl, alpha_R))
    alive = set(comp_rl)
    while True:
        values = sorted((v for c in alive for v in comp_rl[c]), reverse=True)
        k = max(1, math.ceil(top_fraction * len(values)))
        threshold = values[k - 1]
        survivors = {c for c in alive if max(comp_rl[c]) >= threshold}
        if survivors == alive:
            break
        alive = survivors
    keep = np.isin(labels, sorted(alive))
    return g.subgraph(keep)


def graph_to_svg(g: EdgeGraph2D, width: int, height: int, polylines=None, colors=None) -> str:
    """Render polylines as SVG for visual inspection."""
    if polylines is None:
        polylines = extract_polylines(g)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for k, pl in enumerate(polylines):
        color = colors[k] if colors is not None else "black"
        pts = " ".join(f"{u:.2f},{v:.2f}" for u, v in pl.coords)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>')
    parts.append("</svg>")
    return "\n".join(parts)


@dataclass
class ViewEdges:
    """Smoothed, filtered polylines of one view with stacked segment arrays."""

    view_id: str
    graph: EdgeGraph2D
    polylines: list[Polyline2D] = field(default_factory=list)

    def __post_init__(self):
        for pid, pl in enumerate(self.polylines):
            pl.pid = pid
            pl.graph_id = self.view_id
        if self.polylines:
            self._a = np.concatenate([pl.coords[:-1] for pl in self.polylines])
            self._b = np.concatenate([pl.coords[1:] for pl in self.polylines])
            self._owner = np.concatenate(
                [np.full(len(pl.coords) - 1, pid) for pid, pl in enumerate(self.polylines)]
            )
        else:
            self._a = self._b = np.zeros((0, 2))
            self._owner = np.zeros(0, dtype=int)

    @classmethod
    def from_graph(cls, view_id: str, g: EdgeGraph2D) -> "ViewEdges":
        return cls(view_id, g, extract_polylines(g))

    def __len__(self):
        return len(self.polylines)

    def polyline_distances(self, p) -> np.ndarray:
        """Minimum distance from ``p`` to each polyline."""
        out = np.full(len(self.polylines), np.inf)
        if not self.polylines:
            return out
        p = np.asarray(p, dtype=float)
        ab = self._b - self._a
        denom = np.einsum("ij,ij->i", ab, ab)
        t = np.clip(np.einsum("ij,ij->i", p - self._a, ab) / np.maximum(denom, 1e-300), 0.0, 1.0)
        d = np.hypot(*(self._a + t[:, None] * ab - p).T)
        np.minimum.at(out, self._owner, d)
        return out

    def near(self, p, radius: float) -> list[int]:
        return [int(i) for i in np.nonzero(self.polyline_distances(p) <= radius)[0]]
