"""Synthetic scenes with known 3D edges, for end-to-end verification."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .edge_graph import write_pgm
from .geometry import CameraView, project_many


@dataclass
class RigSpec:
    count: int = 6
    radius: float = 7.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    elevations: tuple[float, ...] = (20.0, 40.0)  # degrees, cycled over cameras
    azimuth_offset: float = 15.0
    width: int = 1024
    height: int = 768
    focal: float = 1000.0


@dataclass
class NoiseSpec:
    dropout: float = 0.0
    spurious_density: float = 0.0  # strokes per 10^4 px
    jitter: float = 0.0  # px


@dataclass
class RefSpec:
    on_edge: int = 150
    near_edge: int = 20
    off_edge: int = 30
    near_offset: float = 0.01  # world units


@dataclass
class SyntheticSpec:
    polylines: list[np.ndarray]
    rig: RigSpec = field(default_factory=RigSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    refs: RefSpec = field(default_factory=RefSpec)
    seed: int = 0

    def __post_init__(self):
        self.polylines = [np.asarray(p, dtype=float).reshape(-1, 3) for p in self.polylines]
        if self.rig.count < 2:
            raise ValueError("a synthetic rig needs at least 2 cameras")
        for name in ("dropout",):
            val = getattr(self.noise, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise.spurious_density < 0 or self.noise.jitter < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if any(len(p) < 2 for p in self.polylines):
            raise ValueError("ground-truth polylines need at least 2 points")

    def to_json(self) -> dict:
        return {
            "polylines": [p.tolist() for p in self.polylines],
            "rig": asdict(self.rig),
            "noise": asdict(self.noise),
            "refs": asdict(self.refs),
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticSpec":
        rig = dict(doc.get("rig", {}))
        for key in ("look_at", "elevations"):
            if key in rig:
                rig[key] = tuple(rig[key])
        return cls(
            polylines=doc["polylines"],
            rig=RigSpec(**rig),
            noise=NoiseSpec(**doc.get("noise", {})),
            refs=RefSpec(**doc.get("refs", {})),
            seed=int(doc.get("seed", 0)),
        )


@dataclass
class GroundTruth:
    polylines: list[np.ndarray]
    diagonal: float

    @property
    def tau(self) -> float:
        return 0.005 * self.diagonal

    def to_json(self) -> dict:
        return {"polylines": [p.tolist() for p in self.polylines], "diagonal": self.diagonal}

    @classmethod
    def from_json(cls, doc) -> "GroundTruth":
        return cls([np.asarray(p, dtype=float) for p in doc["polylines"]], float(doc["diagonal"]))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_json(json.loads(Path(path).read_text()))


def cube_edges(half: float = 1.0) -> list[np.ndarray]:
    corners = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    edges = []
    for i in range(8):
        for j in range(i + 1, 8):
            if np.count_nonzero(corners[i] != corners[j]) == 1:
                edges.append(np.array([corners[i], corners[j]]))
    return edges


def helix_arc(radius: float = 1.35, z0: float = -0.8, z1: float = 0.8, turns: float = 0.75,
              start: float = 0.25 * math.pi, n: int = 400) -> np.ndarray:
    a = start + np.linspace(0.0, 2 * math.pi * turns, n)
    return np.column_stack([radius * np.cos(a), radius * np.sin(a), np.linspace(z0, z1, n)])


def cube_helix_spec(dropout: float = 0.05, jitter: float = 0.3, seed: int = 7, helix_only: bool = False,
                    spurious_density: float = 0.5) -> SyntheticSpec:
    """Cube wireframe plus one helix arc, 6 orbiting cameras, 200 reference points."""
    lines = [helix_arc()] if helix_only else cube_edges() + [helix_arc()]
    return SyntheticSpec(
        lines,
        RigSpec(),
        NoiseSpec(dropout=dropout, spurious_density=spurious_density, jitter=jitter),
        RefSpec(on_edge=150, near_edge=20, off_edge=30),
        seed,
    )


def look_at_camera(view_id: str, center, target, focal, width, height) -> CameraView:
    center = np.asarray(center, dtype=float)
    z = np.asarray(target, dtype=float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, [0.0, 0.0, 1.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    K = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1.0]])
    return CameraView(view_id, K, np.vstack([x, y, z]), center, width, height)


def make_rig(rig: RigSpec) -> list[CameraView]:
    cams = []
    for k in range(rig.count):
        az = math.radians(rig.azimuth_offset + 360.0 * k / rig.count)
        el = math.radians(rig.elevations[k % len(rig.elevations)])
        c = np.asarray(rig.look_at) + rig.radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        cams.append(look_at_camera(f"view{k:02d}", c, rig.look_at, rig.focal, rig.width, rig.height))
    return cams


def resample(chain: np.ndarray, spacing: float) -> np.ndarray:
    """Points at uniform arc-length spacing (both ends included)."""
    seg = np.linalg.norm(np.diff(chain, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(math.ceil(cum[-1] / spacing)))
    s = np.linspace(0.0, cum[-1], n + 1)
    return np.column_stack([np.interp(s, cum, chain[:, k]) for k in range(chain.shape[1])])


def draw_line(mask: np.ndarray, p0, p1) -> None:
    """Anti-aliased segment thresholded at 0.5, i.e. nearest-pixel stepping."""
    h, w = mask.shape
    x0, y0 = p0[0] - 0.5, p0[1] - 0.5
    x1, y1 = p1[0] - 0.5, p1[1] - 0.5
    dx, dy = x1 - x0, y1 - y0
    if abs(dx) >= abs(dy):
        if dx < 0:
            x0, y0, x1, y1, dx, dy = x1, y1, x0, y0, -dx, -dy
        xs = np.arange(int(round(x0)), int(round(x1)) + 1)
        ys = y0 + (xs - x0) * (dy / dx if dx else 0.0)
        cols, rows = xs, np.rint(ys).astype(int)
    else:
        if dy < 0:
            x0, y0, x1, y1, dx, dy = x1, y1, x0, y0, -dx, -dy
        ys = np.arange(int(round(y0)), int(round(y1)) + 1)
        xs = x0 + (ys - y0) * (dx / dy)
        cols, rows = np.rint(xs).astype(int), ys
    ok = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    mask[rows[ok], cols[ok]] = True


def project_chain(cam: CameraView, chain: np.ndarray, px_spacing: float = 0.5) -> np.ndarray:
    """Project a 3D chain, densified so the image spacing is about ``px_spacing``."""
    depth = float(np.min((chain - cam.C) @ cam.R[2]))
    dense = resample(chain, max(px_spacing * depth / cam.focal, 1e-6))
    uv, z = project_many(cam, dense)
    return uv[z > 0]


def rasterize(cam: CameraView, polylines, rng: np.random.Generator, jitter: float = 0.0,
              knot_spacing: float = 4.0) -> np.ndarray:
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    for chain in polylines:
        uv = project_chain(cam, chain)
        if len(uv) < 2:
            continue
        knots = resample(uv, knot_spacing)
        if jitter > 0:
            knots = knots + rng.normal(0.0, jitter, knots.shape)
        for a, b in zip(knots[:-1], knots[1:]):
            draw_line(mask, a, b)
    return mask


def add_noise(mask: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    out = mask.copy()
    if noise.dropout > 0:
        rows, cols = np.nonzero(out)
        drop = rng.random(len(rows)) < noise.dropout
        out[rows[drop], cols[drop]] = False
    if noise.spurious_density > 0:
        h, w = out.shape
        n = rng.poisson(noise.spurious_density * h * w / 1e4)
        steps = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]
        for _ in range(n):
            r, c = int(rng.integers(0, h)), int(rng.integers(0, w))
            dr, dc = steps[int(rng.integers(0, 8))]
            for k in range(int(rng.integers(2, 4))):
                rr, cc = r + k * dr, c + k * dc
                if 0 <= rr < h and 0 <= cc < w:
                    out[rr, cc] = True
    return out


def sample_on_polylines(polylines, n: int, rng: np.random.Generator) -> np.ndarray:
    lengths = np.array([np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)) for p in polylines])
    out = []
    for _ in range(n):
        k = int(rng.choice(len(polylines), p=lengths / lengths.sum()))
        chain = polylines[k]
        seg = np.linalg.norm(np.diff(chain, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = rng.uniform(0.0, cum[-1])
        out.append([np.interp(s, cum, chain[:, j]) for j in range(3)])
    return np.array(out).reshape(-1, 3)


def generate(spec: SyntheticSpec, out_dir) -> tuple[Path, GroundTruth]:
    """Write ``scene.json``, one PGM per view and ``ground_truth.json`` to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    cams = make_rig(spec.rig)
    edge_images = {}
    for cam in cams:
        view_rng = np.random.default_rng([spec.seed, int(cam.id[4:])])
        mask = rasterize(cam, spec.polylines, view_rng, spec.noise.jitter)
        mask = add_noise(mask, spec.noise, view_rng)
        name = f"{cam.id}.pgm"
        write_pgm(out_dir / name, mask)
        edge_images[cam.id] = name

    on = sample_on_polylines(spec.polylines, spec.refs.on_edge, rng)
    near = sample_on_polylines(spec.polylines, spec.refs.near_edge, rng)
    if len(near):
        d = rng.normal(size=near.shape)
        near = near + spec.refs.near_offset * d / np.linalg.norm(d, axis=1, keepdims=True)
    allpts = np.concatenate(spec.polylines)
    lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    off = rng.uniform(lo, hi, size=(spec.refs.off_edge, 3))
    points = []
    for xyz in np.concatenate([on, near, off]):
        obs = []
        for cam in cams:
            uv, z = project_many(cam, xyz[None])
            if z[0] > 0 and 0 <= uv[0, 0] < cam.width and 0 <= uv[0, 1] < cam.height:
                obs.append({"view": cam.id, "uv": [float(uv[0, 0]), float(uv[0, 1])]})
        if len(obs) >= 2:
            points.append({"id": f"p{len(points):04d}", "xyz": [float(x) for x in xyz], "obs": obs})

    scene = {
        "cameras": [
            {
                "id": cam.id,
                "K": [float(x) for x in cam.K.ravel()],
                "R": [float(x) for x in cam.R.ravel()],
                "C": [float(x) for x in cam.C],
                "width": cam.width,
                "height": cam.height,
            }
            for cam in cams
        ],
        "points": points,
        "edge_images": edge_images,
    }
    scene_path = out_dir / "scene.json"
    scene_path.write_text(json.dumps(scene, indent=1, sort_keys=True) + "\n")
    xyz = np.array([p["xyz"] for p in points]).reshape(-1, 3)
    diag = float(np.linalg.norm(xyz.max(axis=0) - xyz.min(axis=0))) if len(xyz) else 0.0
    truth = GroundTruth([p.copy() for p in spec.polylines], diag)
    (out_dir / "ground_truth.json").write_text(json.dumps(truth.to_json()))
    return scene_path, truth


class ChainDistance:
    """Exact point-to-polyline-set distances, pruned with a KD-tree on dense samples."""

    def __init__(self, polylines, spacing: float):
        a, b, samples, owner = [], [], [], []
        for chain in polylines:
            chain = np.asarray(chain, dtype=float)
            for k in range(len(chain) - 1):
                p, q = chain[k], chain[k + 1]
                n = max(1, int(math.ceil(np.linalg.norm(q - p) / spacing)))
                t = np.linspace(0.0, 1.0, n + 1)
                samples.append(p + t[:, None] * (q - p))
                owner.append(np.full(n + 1, len(a)))
                a.append(p)
                b.append(q)
        self.a = np.array(a).reshape(-1, 3)
        self.b = np.array(b).reshape(-1, 3)
        self.spacing = spacing
        self.samples = np.concatenate(samples) if samples else np.zeros((0, 3))
        self.owner = np.concatenate(owner) if owner else np.zeros(0, dtype=int)
        self.tree = cKDTree(self.samples) if len(self.samples) else None

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, 3)
        if self.tree is None:
            return np.full(len(pts), np.inf)
        d0, _ = self.tree.query(pts)
        out = np.empty(len(pts))
        groups = self.tree.query_ball_point(pts, d0 + self.spacing)
        for i, (p, idx) in enumerate(zip(pts, groups)):
            segs = np.unique(self.owner[idx])
            a, b = self.a[segs], self.b[segs]
            ab = b - a
            den = np.einsum("ij,ij->i", ab, ab)
            t = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.maximum(den, 1e-300), 0, 1)
            out[i] = np.min(np.linalg.norm(a + t[:, None] * ab - p, axis=1))
        return out


def dense_samples(polylines, spacing: float) -> np.ndarray:
    out = [resample(np.asarray(p, dtype=float), spacing) for p in polylines if len(p) >= 2]
    single = [np.asarray(p, dtype=float) for p in polylines if len(p) == 1]
    return np.concatenate(out + single) if out or single else np.zeros((0, 3))


def evaluate(reconstructed, truth: GroundTruth, tau: float | None = None) -> dict:
    """Recall, precision, MAE and RMSE of reconstructed 3D chains against the truth.

    ``reconstructed`` holds ``(n, 3)`` arrays or objects with ``positions``.
    """
    tau = truth.tau if tau is None else tau
    chains = [np.asarray(getattr(p, "positions", p), dtype=float).reshape(-1, 3) for p in reconstructed]
    chains = [c for c in chains if len(c)]
    step = tau / 10.0
    gt_samples = dense_samples(truth.polylines, step)
    rec_samples = dense_samples(chains, step)
    if len(rec_samples) == 0:
        return {"recall": 0.0, "precision": 0.0, "mae": math.nan, "rmse": math.nan, "max_error": math.nan,
                "tau": tau, "n_points": 0}
    to_rec = ChainDistance(chains, step)(gt_samples)
    to_gt = ChainDistance(truth.polylines, step)(rec_samples)
    return {
        "recall": float(np.mean(to_rec <= tau)),
        "precision": float(np.mean(to_gt <= tau)),
        "mae": float(np.mean(to_gt)),
        "rmse": float(np.sqrt(np.mean(to_gt ** 2))),
        "max_error": float(np.max(to_gt)),
        "tau": tau,
        "n_points": int(len(rec_samples)),
    }
