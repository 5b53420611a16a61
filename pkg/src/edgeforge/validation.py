"""PEPC validation, 3D edge growth, visibility refinement and outlier removal."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field

import numpy as np

from .edge_graph import ViewEdges
from .geometry import CameraRig, GeometryError, TriangulationResult
from .pepc import PEPC, CandidatePoint

logger = logging.getLogger(__name__)

DirectionTriple = dict  # view id -> +1 / -1 along that view's polyline


@dataclass(eq=False)
class EdgePoint3D:
    position: np.ndarray
    observations: dict[str, CandidatePoint]
    max_error: float = 0.0

    @property
    def n_obs(self) -> int:
        return len(self.observations)


@dataclass(eq=False)
class Polyline3D:
    points: list[EdgePoint3D]
    provenance: tuple = ()
    seed_view: str = ""
    seed_index: int = 0
    dirs: DirectionTriple = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points]).reshape(-1, 3)

    @property
    def mean_observations(self) -> float:
        return float(np.mean([p.n_obs for p in self.points])) if self.points else 0.0


@dataclass
class EdgeContext:
    """Frozen inputs shared by all validation steps."""

    rig: CameraRig
    views: dict[str, ViewEdges]
    eps: float = 2.5
    step: float = 10.0

    def polyline(self, c: CandidatePoint):
        return self.views[c.view].polylines[c.pid]

    def arc(self, c: CandidatePoint) -> float:
        return self.polyline(c).arc(c.seg, c.t)

    def candidate_at(self, view: str, pid: int, s: float) -> CandidatePoint:
        pl = self.views[view].polylines[pid]
        seg, t = pl.locate(s)
        return CandidatePoint.on(view, pl, seg, t)

    def triangulate(self, obs: dict[str, CandidatePoint]) -> TriangulationResult | None:
        try:
            return self.rig.triangulate({v: c.point for v, c in obs.items()})
        except GeometryError:
            return None


def _walk(ctx: EdgeContext, start: EdgePoint3D, seed_view: str, dirs: DirectionTriple, orientation: int,
          max_steps: int | None = None, allow_drop: bool = True) -> list[EdgePoint3D]:
    """Follow the edge from ``start`` in one orientation.

    Each step advances ``ctx.step`` px along the seed view's polyline and
    takes, in every other view, the first crossing of the new epipolar line
    beyond the previous observation.  Views that stop producing
    observations are dropped while three or more views remain.
    """
    active = [v for v in dirs if v in start.observations]
    seed_c = start.observations[seed_view]
    seed_pl = ctx.polyline(seed_c)
    cur = {v: (start.observations[v].pid, ctx.arc(start.observations[v])) for v in active}
    out: list[EdgePoint3D] = []
    while max_steps is None or len(out) < max_steps:
        s_prev = cur[seed_view][1]
        target = min(max(s_prev + orientation * dirs[seed_view] * ctx.step, 0.0), seed_pl.length)
        if abs(target - s_prev) < 1e-9:
            break
        new_seed = ctx.candidate_at(seed_view, seed_c.pid, target)
        obs = {seed_view: new_seed}
        arcs = {seed_view: target}
        for v in active:
            if v == seed_view:
                continue
            pid, s_v = cur[v]
            line = ctx.rig.epipolar_line(seed_view, v, new_seed.point)
            pl = ctx.views[v].polylines[pid]
            s_new = pl.first_intersection(line, s_v, orientation * dirs[v])
            if s_new is not None:
                obs[v] = ctx.candidate_at(v, pid, s_new)
                arcs[v] = s_new
        if len(obs) < 3 or (not allow_drop and len(obs) < len(active)):
            break
        tri = ctx.triangulate(obs)
        while tri is None or tri.max_reproj_error > ctx.eps:
            if not allow_drop or len(obs) <= 3:
                tri = None
                break
            views = list(obs)
            if tri is None:
                worst = views[-1]
            else:
                errs = [e if v != seed_view else -1.0 for v, e in zip(views, tri.per_view_errors)]
                worst = views[int(np.argmax(errs))]
            del obs[worst]
            tri = ctx.triangulate(obs)
        if tri is None:
            break
        active = list(obs)
        cur = {v: (obs[v].pid, arcs[v]) for v in active}
        out.append(EdgePoint3D(tri.point, obs, tri.max_reproj_error))
    return out


def direction_classes(ctx: EdgeContext, point: EdgePoint3D, seed_view: str) -> list[DirectionTriple]:
    """Orientation sign combinations (up to global sign) that admit one valid step."""
    others = [v for v in point.observations if v != seed_view]
    combos = [{}]
    for v in others:
        combos = [dict(c, **{v: d}) for c in combos for d in (1, -1)]
    valid = []
    for combo in combos:
        dirs = {seed_view: 1, **combo}
        for orientation in (1, -1):
            if _walk(ctx, point, seed_view, dirs, orientation, max_steps=1, allow_drop=False):
                valid.append(dirs)
                break
    return valid


def validate_selection(ctx: EdgeContext, selection: list[CandidatePoint]):
    """Triangulate a seed plus two candidates and check edge-direction matching.

    Returns ``(EdgePoint3D, DirectionTriple)`` or ``None``.  The first
    element of ``selection`` is the seed.
    """
    if len({c.view for c in selection}) != len(selection) or len(selection) < 3:
        return None
    obs = {c.view: c for c in selection}
    tri = ctx.triangulate(obs)
    if tri is None or tri.max_reproj_error > ctx.eps:
        return None
    point = EdgePoint3D(tri.point, obs, tri.max_reproj_error)
    classes = direction_classes(ctx, point, selection[0].view)
    if len(classes) != 1:
        return None
    return point, classes[0]


def aux_view_pairs(ctx: EdgeContext, pepc: PEPC) -> list[tuple[str, str]]:
    ranked = sorted((v for v, c in pepc.candidates.items() if c),
                    key=lambda v: (-len(pepc.candidates[v]), ctx.rig.order[v]))
    return [(a, b) for i, a in enumerate(ranked) for b in ranked[i + 1:]]


def resolve_pepc(ctx: EdgeContext, pepc: PEPC):
    """Unique valid three-view selection of a PEPC, or ``None``.

    Auxiliary view pairs are tried in order of candidate count; the first
    pair with any valid selection decides: exactly one is accepted, more
    than one is rejected as ambiguous.
    """
    for a, b in aux_view_pairs(ctx, pepc):
        found = []
        for ca in pepc.candidates[a]:
            for cb in pepc.candidates[b]:
                res = validate_selection(ctx, [pepc.seed, ca, cb])
                if res is not None:
                    found.append(res)
                    if len(found) > 1:
                        return None
        if found:
            return found[0]
    return None


def follow_edge(ctx: EdgeContext, start: EdgePoint3D, dirs: DirectionTriple, seed_view: str,
                provenance: tuple = ()) -> Polyline3D:
    """Grow a 3D polyline from ``start`` in both orientations."""
    backward = _walk(ctx, start, seed_view, dirs, -1)
    forward = _walk(ctx, start, seed_view, dirs, 1)
    points = backward[::-1] + [start] + forward
    return Polyline3D(points, provenance, seed_view, len(backward), dict(dirs))


def _view_direction(ctx: EdgeContext, point: EdgePoint3D, seed_view: str, dirs: DirectionTriple,
                    view: str) -> int | None:
    """Unique orientation of ``view``'s polyline consistent with one edge step."""
    good = []
    for d in (1, -1):
        trial = dict(dirs, **{view: d})
        for orientation in (1, -1):
            if _walk(ctx, point, seed_view, trial, orientation, max_steps=1, allow_drop=False):
                good.append(d)
                break
    return good[0] if len(good) == 1 else None


def compatible_candidate(ctx: EdgeContext, point: EdgePoint3D, seed_view: str, dirs: DirectionTriple,
                         cand: CandidatePoint):
    """Enlarged edge-point and view direction if ``cand`` fits, else ``None``."""
    if cand.view in point.observations:
        return None
    obs = dict(point.observations, **{cand.view: cand})
    tri = ctx.triangulate(obs)
    if tri is None or tri.max_reproj_error > ctx.eps:
        return None
    enlarged = EdgePoint3D(tri.point, obs, tri.max_reproj_error)
    d = _view_direction(ctx, enlarged, seed_view, dirs, cand.view)
    if d is None:
        return None
    return enlarged, d


def integrate_candidates(ctx: EdgeContext, point: EdgePoint3D, seed_view: str, dirs: DirectionTriple,
                         pepc: PEPC):
    """Add the remaining PEPC views whose single compatible candidate fits the edge."""
    dirs = dict(dirs)
    for v in ctx.rig.sort_views(pepc.candidates):
        if v in point.observations:
            continue
        fits = [r for r in (compatible_candidate(ctx, point, seed_view, dirs, c) for c in pepc.candidates[v]) if r]
        if len(fits) == 1:
            point, dirs[v] = fits[0]
    return point, dirs


def integrate_view(ctx: EdgeContext, pl: Polyline3D, view: str, cand: CandidatePoint) -> Polyline3D:
    """Add ``cand`` as an observation of the polyline's seed point and regrow.

    Returns ``pl`` unchanged when the view already observes the seed point
    or the candidate is incompatible.
    """
    start = pl.points[pl.seed_index]
    if view in start.observations or cand.view != view:
        return pl
    fit = compatible_candidate(ctx, start, pl.seed_view, pl.dirs, cand)
    if fit is None:
        return pl
    point, d = fit
    dirs = dict(pl.dirs, **{view: d})
    grown = follow_edge(ctx, point, dirs, pl.seed_view, pl.provenance)
    for p in grown.points:
        tri = ctx.triangulate(p.observations)
        if tri is None or tri.max_reproj_error > ctx.eps:
            return pl
    return grown


def _neighbor_support(ctx: EdgeContext, pl: Polyline3D, i: int, cand: CandidatePoint, d: int) -> int:
    """Number of 3D neighbours of point ``i`` reproduced on ``cand``'s polyline walking ``d``."""
    view_pl = ctx.polyline(cand)
    s0 = ctx.arc(cand)
    hits = 0
    for j, sign in ((i - 1, -1), (i + 1, 1)):
        if not 0 <= j < len(pl.points):
            continue
        nb = pl.points[j]
        ref = nb.observations.get(pl.seed_view)
        if ref is None:
            continue
        line = ctx.rig.epipolar_line(pl.seed_view, cand.view, ref.point)
        s = view_pl.first_intersection(line, s0, sign * d)
        if s is None:
            continue
        obs = dict(nb.observations)
        obs[cand.view] = ctx.candidate_at(cand.view, cand.pid, s)
        tri = ctx.triangulate(obs)
        if tri is not None and tri.max_reproj_error <= ctx.eps:
            hits += 1
    return hits


def refine_visibility(ctx: EdgeContext, pl: Polyline3D, d_sev: float = 3.0) -> Polyline3D:
    """Add observations from views that see the polyline near its projection.

    A view contributes to an edge-point only if exactly one of its
    polylines lies within ``d_sev`` px of the projection, the enlarged set
    triangulates within epsilon, and the 2D polyline runs along the 3D
    neighbours in one consistent direction.
    """
    points = list(pl.points)
    for v in ctx.rig.sort_views(ctx.views):
        cam = ctx.rig[v]
        ve = ctx.views[v]
        if not len(ve):
            continue
        for i, p in enumerate(points):
            if v in p.observations:
                continue
            q = cam.R @ (p.position - cam.C)
            if q[2] <= 0:
                continue
            h = cam.K @ q
            uv = h[:2] / h[2]
            if not cam.contains(uv):
                continue
            near = ve.near(uv, d_sev)
            if len(near) != 1:
                continue
            line_pl = ve.polylines[near[0]]
            _, seg, t, _ = line_pl.closest_point(uv)
            cand = CandidatePoint.on(v, line_pl, seg, t)
            obs = dict(p.observations, **{v: cand})
            tri = ctx.triangulate(obs)
            if tri is None or tri.max_reproj_error > ctx.eps:
                continue
            probe = Polyline3D(points, pl.provenance, pl.seed_view, pl.seed_index, pl.dirs)
            up = _neighbor_support(ctx, probe, i, cand, 1)
            down = _neighbor_support(ctx, probe, i, cand, -1)
            if (up > 0) == (down > 0):
                continue
            points[i] = EdgePoint3D(tri.point, obs, tri.max_reproj_error)
    return Polyline3D(points, pl.provenance, pl.seed_view, pl.seed_index, pl.dirs)


def min_observations(v_median: float) -> float:
    """Outlier threshold ``max(4, v_M / 2 + 1)``, no rounding."""
    return max(4.0, v_median / 2.0 + 1.0)


def filter_outliers(edges: list[Polyline3D]) -> list[Polyline3D]:
    """Drop polylines whose mean per-point observation count is below the threshold."""
    counts = [p.n_obs for pl in edges for p in pl.points]
    if not counts:
        return []
    k_v = min_observations(statistics.median(counts))
    return [pl for pl in edges if pl.mean_observations >= k_v]
