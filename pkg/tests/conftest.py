import os
import time

import numpy as np
import pytest

from edgeforge.edge_graph import EdgeGraph2D, Polyline2D, ViewEdges
from edgeforge.geometry import CameraRig, CameraView, project_many
from edgeforge.pipeline import PipelineConfig, export_ply, load_scene, run_pipeline
from edgeforge.synth import RigSpec, cube_helix_spec, generate, look_at_camera, make_rig


def simple_camera(view_id="c", f=100.0, pp=(50.0, 50.0), R=None, C=(0.0, 0.0, 0.0), size=(100, 100)):
    K = np.array([[f, 0, pp[0]], [0, f, pp[1]], [0, 0, 1.0]])
    return CameraView(view_id, K, np.eye(3) if R is None else np.asarray(R), np.asarray(C, dtype=float), *size)


def ring_cameras(n=6, radius=7.0, elevations=(20.0, 40.0)):
    return make_rig(RigSpec(count=n, radius=radius, elevations=elevations))


def view_from_chains(view_id, chains) -> ViewEdges:
    """ViewEdges whose polylines are exactly the given 2D chains."""
    nodes, edges, pls = [], [], []
    for chain in chains:
        chain = np.asarray(chain, dtype=float)
        base = len(nodes)
        nodes.extend(map(tuple, chain))
        edges.extend((base + k, base + k + 1) for k in range(len(chain) - 1))
        pls.append(Polyline2D(list(range(base, base + len(chain))), chain))
    return ViewEdges(view_id, EdgeGraph2D.from_edges(nodes, edges, view_id), pls)


def projected_views(cams, curves3d) -> dict[str, ViewEdges]:
    out = {}
    for cam in cams:
        chains = [project_many(cam, np.asarray(c, dtype=float))[0] for c in curves3d]
        out[cam.id] = view_from_chains(cam.id, chains)
    return out


@pytest.fixture
def rig6():
    cams = ring_cameras()
    return cams, CameraRig(cams)


@pytest.fixture
def lookat():
    return look_at_camera


@pytest.fixture(scope="session")
def cube_helix_scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("cube_helix")
    scene_path, truth = generate(cube_helix_spec(), d)
    return scene_path, truth


@pytest.fixture(scope="session")
def helix_scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("helix")
    scene_path, truth = generate(cube_helix_spec(helix_only=True), d)
    return scene_path, truth


def _run_with_threads(scene_path, threads, ply_path):
    old = os.environ.get("EDGEFORGE_THREADS")
    os.environ["EDGEFORGE_THREADS"] = str(threads)
    try:
        t0 = time.perf_counter()
        out = run_pipeline(load_scene(scene_path), PipelineConfig())
        elapsed = time.perf_counter() - t0
    finally:
        if old is None:
            del os.environ["EDGEFORGE_THREADS"]
        else:
            os.environ["EDGEFORGE_THREADS"] = old
    export_ply(out, ply_path, "wireframe")
    return out, elapsed


@pytest.fixture(scope="session")
def cube_helix_run(cube_helix_scene, tmp_path_factory):
    """Pipeline output, runtime and wireframe PLY path with one worker."""
    scene_path, _ = cube_helix_scene
    ply = tmp_path_factory.mktemp("run1") / "edges.ply"
    out, elapsed = _run_with_threads(scene_path, 1, ply)
    return out, elapsed, ply


@pytest.fixture(scope="session")
def cube_helix_run_8(cube_helix_scene, tmp_path_factory):
    scene_path, _ = cube_helix_scene
    ply = tmp_path_factory.mktemp("run8") / "edges.ply"
    out, elapsed = _run_with_threads(scene_path, 8, ply)
    return out, elapsed, ply


@pytest.fixture(scope="session")
def helix_run(helix_scene):
    scene_path, _ = helix_scene
    return run_pipeline(load_scene(scene_path), PipelineConfig(), workers=1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
