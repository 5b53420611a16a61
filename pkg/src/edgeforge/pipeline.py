"""Scene I/O, configuration, the end-to-end pipeline, sampling and PLY export."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .edge_graph import (
    EdgeGraph2D,
    ViewEdges,
    build_graph,
    filter_graph,
    read_edge_image,
    smooth_graph,
)
from .geometry import CameraRig, CameraView, GeometryError
from .matching import PEC, ReferencePoint, build_similarity_graph, detect_communities
from .pepc import PEPC, dedupe_seeds, pepc_from_pec, pepc_from_ref_point
from .validation import (
    EdgeContext,
    Polyline3D,
    filter_outliers,
    follow_edge,
    integrate_candidates,
    refine_visibility,
    resolve_pepc,
)

logger = logging.getLogger(__name__)

BATCH_SIZE = 16


class InputError(ValueError):
    """Bad or inconsistent input (CLI exit code 2)."""


class ParseError(InputError):
    pass


class MissingEdgeImage(InputError):
    pass


class DanglingViewReference(InputError):
    pass


class InvariantBreach(RuntimeError):
    """Internal consistency check failed (CLI exit code 3)."""


@dataclass
class Scene:
    cameras: list[CameraView]
    ref_points: list[ReferencePoint]
    edge_image_paths: dict[str, Path]
    root: Path = Path(".")

    def __post_init__(self):
        ids = [c.id for c in self.cameras]
        if len(set(ids)) != len(ids):
            raise ParseError("duplicate camera ids")
        known = set(ids)
        for r in self.ref_points:
            for v in r.observations:
                if v not in known:
                    raise DanglingViewReference(f"point {r.id} references unknown view {v!r}")
            if len(r.observations) < 2:
                raise ParseError(f"point {r.id} has fewer than 2 observations")
        for v in ids:
            if v not in self.edge_image_paths:
                raise MissingEdgeImage(f"no edge image for view {v!r}")
        for v in self.edge_image_paths:
            if v not in known:
                raise DanglingViewReference(f"edge image for unknown view {v!r}")

    @property
    def diagonal(self) -> float:
        if not self.ref_points:
            return 0.0
        xyz = np.array([r.position for r in self.ref_points])
        return float(np.linalg.norm(xyz.max(axis=0) - xyz.min(axis=0)))

    def edge_image_path(self, view: str) -> Path:
        p = Path(self.edge_image_paths[view])
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {
            "cameras": [
                {
                    "id": c.id,
                    "K": [float(x) for x in c.K.ravel()],
                    "R": [float(x) for x in c.R.ravel()],
                    "C": [float(x) for x in c.C],
                    "width": c.width,
                    "height": c.height,
                }
                for c in self.cameras
            ],
            "points": [
                {
                    "id": r.id,
                    "xyz": [float(x) for x in r.position],
                    "obs": [{"view": v, "uv": [float(uv[0]), float(uv[1])]} for v, uv in r.observations.items()],
                }
                for r in self.ref_points
            ],
            "edge_images": {v: str(p) for v, p in self.edge_image_paths.items()},
        }


def _field(obj, key, where):
    try:
        return obj[key]
    except (KeyError, TypeError, IndexError):
        raise ParseError(f"{where}: missing field {key!r}") from None


def _numbers(val, n, where):
    try:
        arr = np.asarray(val, dtype=float).ravel()
    except (TypeError, ValueError):
        raise ParseError(f"{where}: expected {n} numbers") from None
    if arr.size != n or not np.all(np.isfinite(arr)):
        raise ParseError(f"{where}: expected {n} finite numbers")
    return arr


def scene_from_json(doc: dict, root=".") -> Scene:
    cameras = []
    for k, c in enumerate(_field(doc, "cameras", "scene")):
        where = f"cameras[{k}]"
        try:
            cameras.append(
                CameraView(
                    str(_field(c, "id", where)),
                    _numbers(_field(c, "K", where), 9, f"{where}.K").reshape(3, 3),
                    _numbers(_field(c, "R", where), 9, f"{where}.R").reshape(3, 3),
                    _numbers(_field(c, "C", where), 3, f"{where}.C"),
                    int(_field(c, "width", where)),
                    int(_field(c, "height", where)),
                )
            )
        except GeometryError as exc:
            raise ParseError(f"{where}: {exc}") from None
    refs = []
    for k, p in enumerate(_field(doc, "points", "scene")):
        where = f"points[{k}]"
        obs = {}
        for j, o in enumerate(_field(p, "obs", where)):
            obs[str(_field(o, "view", f"{where}.obs[{j}]"))] = _numbers(_field(o, "uv", f"{where}.obs[{j}]"), 2,
                                                                        f"{where}.obs[{j}].uv")
        refs.append(ReferencePoint(str(_field(p, "id", where)), _numbers(_field(p, "xyz", where), 3, f"{where}.xyz"),
                                   obs))
    images = _field(doc, "edge_images", "scene")
    if not isinstance(images, dict):
        raise ParseError("scene.edge_images: expected an object")
    return Scene(cameras, refs, {str(v): Path(p) for v, p in images.items()}, Path(root))


def load_scene(path) -> Scene:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    scene = scene_from_json(doc, path.parent)
    for v in scene.edge_image_paths:
        if not scene.edge_image_path(v).is_file():
            raise MissingEdgeImage(f"edge image for view {v!r} not found: {scene.edge_image_path(v)}")
    return scene


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(canonical_json(scene.to_json()))


@dataclass
class PipelineConfig:
    eps: float = 2.5
    alpha_R: float = 20.0
    top_fraction: float = 0.10
    d_plmatch: float = 4.0
    d_sev: float = 3.0
    l_d: float = 10.0
    r_outer: float = 0.01  # fraction of the scene diagonal
    r_inner_ratio: float = 1.0 / 3.0
    sample_spacing: float | None = None  # world units; None -> diagonal / 1000
    min_sim: float = 0.05
    seed: int = 0
    smooth_tol: float = 1.0
    gap_bridge: float = 3.0  # px; 0 disables end-point bridging
    pec_sample_step: float = 10.0
    seed_merge_px: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("seed", "gap_bridge"):
                if val < 0:
                    raise InputError(f"config {f.name} must be non-negative")
                continue
            if val is not None and not val > 0:
                raise InputError(f"config {f.name} must be positive")
        if not self.r_inner_ratio < 1:
            raise InputError("config r_inner_ratio must be < 1")

    @classmethod
    def from_json(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            return cls.from_json(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EdgeSetOutput:
    polylines: list[Polyline3D]
    sampled_cloud: list[tuple[np.ndarray, int]] = field(default_factory=list)
    stats: dict = field(default_factory=dict)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EDGEFORGE_THREADS", "1")))
    except ValueError:
        raise InputError("EDGEFORGE_THREADS must be an integer") from None


def _pmap(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def process_view(view: str, img, config: PipelineConfig) -> tuple[EdgeGraph2D, ViewEdges]:
    """Raw graph and the smoothed, filtered polylines of one edge image."""
    raw = build_graph(img, config.gap_bridge, graph_id=view)
    smoothed = smooth_graph(raw, config.smooth_tol)
    filtered = filter_graph(smoothed, config.alpha_R, config.top_fraction)
    return raw, ViewEdges.from_graph(view, filtered)


def build_views(scene: Scene, config: PipelineConfig, workers: int = 1) -> dict[str, ViewEdges]:
    def one(cam):
        img = read_edge_image(scene.edge_image_path(cam.id))
        if (img.width, img.height) != (cam.width, cam.height):
            raise InputError(f"edge image of {cam.id} is {img.width}x{img.height}, camera expects "
                             f"{cam.width}x{cam.height}")
        return process_view(cam.id, img, config)[1]

    return dict(zip([c.id for c in scene.cameras], _pmap(one, scene.cameras, workers)))


def match_polylines(scene: Scene, views: dict[str, ViewEdges], config: PipelineConfig) -> list[PEC]:
    rig_order = {c.id: i for i, c in enumerate(scene.cameras)}
    g = build_similarity_graph(views, scene.ref_points, config.d_plmatch, config.min_sim, rig_order)
    return detect_communities(g)


class _Coverage:
    """Arc-length intervals of 2D polylines already explained by accepted 3D edges."""

    def __init__(self, ctx: EdgeContext, margin: float):
        self.ctx = ctx
        self.margin = margin
        self.spans: dict[tuple[str, int], list[tuple[float, float]]] = {}

    def add(self, pl: Polyline3D) -> None:
        per: dict[tuple[str, int], list[float]] = {}
        for p in pl.points:
            for v, c in p.observations.items():
                per.setdefault((v, c.pid), []).append(self.ctx.arc(c))
        for key, arcs in per.items():
            self.spans.setdefault(key, []).append((min(arcs), max(arcs)))

    def covers(self, pepc: PEPC) -> bool:
        s = self.ctx.arc(pepc.seed)
        return any(lo - self.margin <= s <= hi + self.margin
                   for lo, hi in self.spans.get((pepc.seed.view, pepc.seed.pid), ()))


def reconstruct_pepc(ctx: EdgeContext, pepc: PEPC, d_sev: float):
    """Resolve one PEPC into a refined 3D polyline, or ``(None, reason)``."""
    res = resolve_pepc(ctx, pepc)
    if res is None:
        return None, "no unique selection"
    point, dirs = res
    point, dirs = integrate_candidates(ctx, point, pepc.seed.view, dirs, pepc)
    pl = follow_edge(ctx, point, dirs, pepc.seed.view, pepc.provenance)
    if len(pl) < 2:
        return None, "edge did not grow"
    return refine_visibility(ctx, pl, d_sev), "accepted"


def generate_pepcs(scene: Scene, views, rig, pecs, config: PipelineConfig, workers: int = 1) -> list[PEPC]:
    diag = scene.diagonal
    r_outer = config.r_outer * diag
    r_inner = r_outer * config.r_inner_ratio
    from_refs: list[PEPC] = []
    if r_outer > 0:
        per_ref = _pmap(lambda ir: pepc_from_ref_point(ir[1], views, rig, r_inner, r_outer, ir[0]),
                        list(enumerate(scene.ref_points)), workers)
        from_refs = [p for group in per_ref for p in group]
        from_refs = dedupe_seeds(from_refs, views, config.seed_merge_px)
    per_pec = _pmap(lambda ip: pepc_from_pec(ip[1], views, rig, config.pec_sample_step, ip[0]),
                    list(enumerate(pecs)), workers)
    out = from_refs + [p for group in per_pec for p in group]
    out.sort(key=PEPC.sort_key)
    return out


def run_pipeline(scene: Scene, config: PipelineConfig | None = None, workers: int | None = None,
                 debug_log=None) -> EdgeSetOutput:
    """Edge-graphs -> matching -> PEPCs -> validation/growth -> refinement -> outlier filter -> sampling.

    PEPCs are processed in canonical order in fixed-size batches; a batch
    only sees the edges accepted in earlier batches, so the output does not
    depend on the number of workers.
    """
    config = config or PipelineConfig()
    workers = worker_count() if workers is None else workers
    t0 = time.perf_counter()
    rig = CameraRig(scene.cameras)
    views = build_views(scene, config, workers)
    t_graph = time.perf_counter()
    pecs = match_polylines(scene, views, config)
    pepcs = generate_pepcs(scene, views, rig, pecs, config, workers)
    t_pepc = time.perf_counter()
    ctx = EdgeContext(rig, views, config.eps, config.l_d)
    coverage = _Coverage(ctx, 0.5 * config.l_d)
    edges: list[Polyline3D] = []
    skipped = 0
    for start in range(0, len(pepcs), BATCH_SIZE):
        batch = [p for p in pepcs[start:start + BATCH_SIZE] if not coverage.covers(p)]
        skipped += min(BATCH_SIZE, len(pepcs) - start) - len(batch)
        results = _pmap(lambda p: reconstruct_pepc(ctx, p, config.d_sev), batch, workers)
        for pepc, (pl, reason) in zip(batch, results):
            if debug_log is not None:
                debug_log.write(json.dumps({"pepc": pepc.to_json(), "result": reason,
                                            "points": len(pl) if pl is not None else 0}) + "\n")
            if pl is not None:
                edges.append(pl)
                coverage.add(pl)
    t_grow = time.perf_counter()
    kept = filter_outliers(edges)
    check_edge_points(ctx, kept)
    spacing = config.sample_spacing or (scene.diagonal / 1000.0 if scene.diagonal > 0 else 0.01)
    cloud = sample_edges(kept, spacing) if kept else []
    stats = {
        "views": len(views),
        "polylines_2d": sum(len(v) for v in views.values()),
        "pecs": len(pecs),
        "pepcs": len(pepcs),
        "pepcs_skipped": skipped,
        "edges_grown": len(edges),
        "edges_kept": len(kept),
        "samples": len(cloud),
        "t_graphs": t_graph - t0,
        "t_pepcs": t_pepc - t_graph,
        "t_growth": t_grow - t_pepc,
        "t_total": time.perf_counter() - t0,
    }
    logger.info("pipeline stats: %s", stats)
    return EdgeSetOutput(kept, cloud, stats)


def check_edge_points(ctx: EdgeContext, edges: list[Polyline3D]) -> None:
    for pl in edges:
        for p in pl.points:
            tri = ctx.triangulate(p.observations)
            if len(p.observations) < 3 or tri is None or tri.max_reproj_error > ctx.eps + 1e-9:
                raise InvariantBreach("emitted edge-point violates its reprojection bound")


def sample_edges(polylines, spacing: float) -> list[tuple[np.ndarray, int]]:
    """Uniform arc-length samples of each 3D chain, both endpoints included."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    out = []
    for k, pl in enumerate(polylines):
        pts = np.asarray(getattr(pl, "positions", pl), dtype=float).reshape(-1, 3)
        if len(pts) == 1:
            out.append((pts[0].copy(), k))
            continue
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        n = max(1, math.ceil(cum[-1] / spacing - 1e-12))
        for s in np.linspace(0.0, cum[-1], n + 1)[:-1]:
            j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
            t = 0.0 if seg[j] == 0 else (s - cum[j]) / seg[j]
            out.append((pts[j] + min(max(t, 0.0), 1.0) * (pts[j + 1] - pts[j]), k))
        out.append((pts[-1].copy(), k))
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def export_ply(output, path, mode: str = "wireframe") -> None:
    """ASCII PLY: ``points`` writes the sampled cloud, ``wireframe`` the chains with edge records."""
    if mode == "points":
        cloud = output.sampled_cloud if isinstance(output, EdgeSetOutput) else output
        verts = [p for p, _ in cloud]
        edges = []
    elif mode == "wireframe":
        polylines = output.polylines if isinstance(output, EdgeSetOutput) else output
        verts, edges = [], []
        for pl in polylines:
            pts = np.asarray(getattr(pl, "positions", pl), dtype=float).reshape(-1, 3)
            base = len(verts)
            verts.extend(pts)
            edges.extend((base + k, base + k + 1) for k in range(len(pts) - 1))
    else:
        raise ValueError(f"unknown PLY mode {mode!r}")
    lines = ["ply", "format ascii 1.0", f"element vertex {len(verts)}",
             "property double x", "property double y", "property double z"]
    if mode == "wireframe":
        lines += [f"element edge {len(edges)}", "property int vertex1", "property int vertex2"]
    lines.append("end_header")
    lines += [f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])}" for p in verts]
    lines += [f"{a} {b}" for a, b in edges]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Vertices and edge records of an ASCII PLY written by :func:`export_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ParseError(f"{path}: not a PLY file")
    counts: dict[str, int] = {}
    order = []
    k = 1
    while text[k] != "end_header":
        parts = text[k].split()
        if parts[0] == "format" and parts[1] != "ascii":
            raise ParseError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
            order.append(parts[1])
        k += 1
    k += 1
    verts, edges = [], []
    for name in order:
        rows = text[k:k + counts[name]]
        k += counts[name]
        if name == "vertex":
            verts = [[float(x) for x in r.split()[:3]] for r in rows]
        elif name == "edge":
            edges = [tuple(int(x) for x in r.split()[:2]) for r in rows]
    return np.array(verts, dtype=float).reshape(-1, 3), edges


def chains_from_edges(verts: np.ndarray, edges) -> list[np.ndarray]:
    """Rebuild ordered chains from consecutive-vertex edge records."""
    chains, current = [], []
    for a, b in edges:
        if current and current[-1] == a:
            current.append(b)
        else:
            if current:
                chains.append(verts[current])
            current = [a, b]
    if current:
        chains.append(verts[current])
    return chains
