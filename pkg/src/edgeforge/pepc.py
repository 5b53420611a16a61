"""Potential edge-point correspondences (PEPCs).

A PEPC anchors a seed 2D edge-point on one view and lists, for every other
view, the edge-graph points lying on the seed's epipolar line.  They are
generated around sparse reference points and by sampling matched polylines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .edge_graph import Polyline2D, ViewEdges
from .geometry import CameraRig, GeometryError, sphere_projection_radius
from .matching import PEC, ReferencePoint


@dataclass(frozen=True)
class CandidatePoint:
    """A point on a polyline, located by segment index and parameter."""

    view: str
    point: tuple[float, float]
    pid: int
    seg: int
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"chain parameter {self.t} outside [0, 1]")

    @classmethod
    def on(cls, view: str, pl: Polyline2D, seg: int, t: float) -> "CandidatePoint":
        p = pl.coords[seg] + t * (pl.coords[seg + 1] - pl.coords[seg])
        return cls(view, (float(p[0]), float(p[1])), pl.pid, seg, float(t))

    @property
    def uv(self) -> np.ndarray:
        return np.array(self.point)

    def to_json(self) -> dict:
        return {"view": self.view, "uv": list(self.point), "polyline": self.pid, "seg": self.seg, "t": self.t}


@dataclass
class PEPC:
    seed: CandidatePoint
    candidates: dict[str, list[CandidatePoint]] = field(default_factory=dict)
    provenance: tuple = ()

    def __post_init__(self):
        if self.seed.view in self.candidates:
            raise ValueError("seed view cannot hold candidates")

    def sort_key(self):
        kind = 0 if self.provenance and self.provenance[0] == "ref" else 1
        return (kind, self.provenance[1:2], self.seed.view, self.seed.pid, self.seed.seg, self.seed.t)

    def to_json(self) -> dict:
        return {
            "provenance": list(self.provenance),
            "seed": self.seed.to_json(),
            "candidates": {v: [c.to_json() for c in cs] for v, cs in self.candidates.items()},
        }


def intersect_polyline_line(pl: Polyline2D, line, clip=None, view: str = "") -> list[CandidatePoint]:
    """Crossings of ``pl`` with ``line``; ``clip`` is an optional ``(center, radius)``."""
    out = []
    for seg, t in pl.intersections(line):
        c = CandidatePoint.on(view or pl.graph_id, pl, seg, t)
        if clip is not None:
            center, radius = clip
            if math.hypot(c.point[0] - center[0], c.point[1] - center[1]) > radius + 1e-9:
                continue
        out.append(c)
    return out


def count_selections(pepc_or_sizes) -> int:
    """Number of selections holding the seed plus at least two further views.

    Accepts a PEPC or a sequence of per-view candidate counts.
    """
    if isinstance(pepc_or_sizes, PEPC):
        sizes = [len(c) for c in pepc_or_sizes.candidates.values()]
    else:
        sizes = list(pepc_or_sizes)
    return math.prod(n + 1 for n in sizes) - sum(sizes) - 1


def _epipolar_candidates(rig: CameraRig, views: dict[str, ViewEdges], seed: CandidatePoint, targets,
                         pids_for=None, clips=None) -> dict[str, list[CandidatePoint]]:
    cands: dict[str, list[CandidatePoint]] = {}
    for v in targets:
        if v == seed.view or v not in views:
            continue
        try:
            line = rig.epipolar_line(seed.view, v, seed.point)
        except GeometryError:
            continue
        pids = pids_for[v] if pids_for is not None else range(len(views[v]))
        clip = clips.get(v) if clips is not None else None
        found = []
        for pid in pids:
            found.extend(intersect_polyline_line(views[v].polylines[pid], line, clip, v))
        if found:
            cands[v] = found
    return cands


def pepc_from_ref_point(r: ReferencePoint, views: dict[str, ViewEdges], rig: CameraRig,
                        r_inner: float, r_outer: float, ref_index: int = 0) -> list[PEPC]:
    """PEPCs seeded near a reference point.

    On every observing view, each polyline crossing the projected inner
    sphere contributes its point closest to the projection as a seed; the
    other views contribute epipolar crossings inside the projected outer
    sphere.
    """
    if not r_inner < r_outer:
        raise ValueError("inner radius must be smaller than the outer radius")
    observing = [v for v in rig.sort_views(r.observations) if v in views]
    if len(observing) < 3:
        return []
    proj, inner, outer = {}, {}, {}
    for v in observing:
        cam = rig[v]
        if cam.depth(r.position) <= 0:
            continue
        h = cam.K @ (cam.R @ (r.position - cam.C))
        proj[v] = h[:2] / h[2]
        inner[v] = sphere_projection_radius(cam, r.position, r_inner)
        outer[v] = sphere_projection_radius(cam, r.position, r_outer)
    observing = [v for v in observing if v in proj]
    clips = {v: (proj[v], outer[v]) for v in observing}
    out = []
    for s in observing:
        ve = views[s]
        for pid in ve.near(proj[s], inner[s]):
            pl = ve.polylines[pid]
            _, seg, t, _ = pl.closest_point(proj[s])
            seed = CandidatePoint.on(s, pl, seg, t)
            cands = _epipolar_candidates(rig, views, seed, observing, clips=clips)
            if len(cands) >= 2:
                out.append(PEPC(seed, cands, ("ref", ref_index, r.id)))
    return out


def dedupe_seeds(pepcs: list[PEPC], views: dict[str, ViewEdges], min_gap: float = 2.0) -> list[PEPC]:
    """Drop PEPCs whose seed is within ``min_gap`` px (along the chain) of an earlier seed."""
    kept: list[PEPC] = []
    taken: dict[tuple[str, int], list[float]] = {}
    for p in pepcs:
        pl = views[p.seed.view].polylines[p.seed.pid]
        s = pl.arc(p.seed.seg, p.seed.t)
        prev = taken.setdefault((p.seed.view, p.seed.pid), [])
        if any(abs(s - q) < min_gap for q in prev):
            continue
        prev.append(s)
        kept.append(p)
    return kept


def pepc_from_pec(pec: PEC, views: dict[str, ViewEdges], rig: CameraRig, sample_step: float = 10.0,
                  pec_id: int = 0) -> list[PEPC]:
    """PEPCs from seeds sampled every ``sample_step`` px on the PEC's longest view."""
    pec_views = [v for v in rig.sort_views(pec.views) if v in views]
    if len(pec_views) < 3:
        return []

    def total_length(v):
        return sum(views[v].polylines[p].length for p in pec.views[v])

    initial = max(pec_views, key=lambda v: (total_length(v), -rig.order[v]))
    out = []
    for pid in pec.views[initial]:
        pl = views[initial].polylines[pid]
        for s in np.arange(0.0, pl.length + 1e-9, sample_step):
            seg, t = pl.locate(float(s))
            seed = CandidatePoint.on(initial, pl, seg, t)
            cands = _epipolar_candidates(rig, views, seed, pec_views, pids_for=pec.views)
            if len(cands) >= 2:
                out.append(PEPC(seed, cands, ("pec", pec_id)))
    return out
