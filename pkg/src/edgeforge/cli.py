"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .edge_graph import EdgeImageError, extract_polylines, graph_to_svg, read_edge_image
from .geometry import GeometryError
from .pipeline import (
    InputError,
    InvariantBreach,
    PipelineConfig,
    build_views,
    canonical_json,
    chains_from_edges,
    export_ply,
    load_scene,
    match_polylines,
    process_view,
    read_ply,
    run_pipeline,
    sample_edges,
    worker_count,
)

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 2, 3


def _config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def cmd_extract_graph(args) -> int:
    scene = load_scene(args.scene)
    cams = {c.id: c for c in scene.cameras}
    if args.view not in cams:
        raise InputError(f"unknown view {args.view!r}")
    img = read_edge_image(scene.edge_image_path(args.view))
    raw, ve = process_view(args.view, img, _config(args.config))
    g = raw if args.stage == "raw" else ve.graph
    Path(args.out).write_text(canonical_json(g.to_json()))
    if args.svg:
        pls = extract_polylines(g) if args.stage == "raw" else ve.polylines
        Path(args.svg).write_text(graph_to_svg(g, img.width, img.height, pls))
    return EXIT_OK


def cmd_match(args) -> int:
    scene = load_scene(args.scene)
    config = _config(args.config)
    views = build_views(scene, config, worker_count())
    pecs = match_polylines(scene, views, config)
    Path(args.out).write_text(canonical_json([p.to_json() for p in pecs]))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    scene = load_scene(args.scene)
    config = _config(args.config)
    log = open(args.debug_log, "w") if args.debug_log else None
    try:
        out = run_pipeline(scene, config, debug_log=log)
    finally:
        if log is not None:
            log.close()
    export_ply(out, args.out, "wireframe")
    if args.points_out:
        export_ply(out, args.points_out, "points")
    print(json.dumps(out.stats, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    if not args.spacing > 0:
        raise InputError("--spacing must be positive")
    verts, edges = read_ply(args.inp)
    chains = chains_from_edges(verts, edges)
    export_ply(sample_edges(chains, args.spacing), args.out, "points")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SyntheticSpec, cube_helix_spec, generate

    if args.spec:
        try:
            spec = SyntheticSpec.from_json(json.loads(Path(args.spec).read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"{args.spec}: {exc}") from None
    else:
        spec = cube_helix_spec(helix_only=args.preset == "helix")
    scene_path, truth = generate(spec, args.out_dir)
    print(scene_path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .report import write_report
    from .synth import GroundTruth

    truth = GroundTruth.load(args.truth)
    verts, edges = read_ply(args.edges)
    metrics = write_report(chains_from_edges(verts, edges), truth, args.out_dir, name=Path(args.edges).stem,
                           delimiter=args.delimiter)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgeforge", description="3D edge reconstruction from 2D edge images")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract-graph", help="build and filter the edge-graph of one view")
    s.add_argument("scene")
    s.add_argument("--view", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--svg")
    s.add_argument("--config")
    s.add_argument("--stage", choices=("raw", "filtered"), default="filtered")
    s.set_defaults(func=cmd_extract_graph)

    s = sub.add_parser("match", help="write polyline equivalence classes")
    s.add_argument("scene")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("reconstruct", help="run the full pipeline")
    s.add_argument("scene")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--points-out")
    s.add_argument("--debug-log")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("sample", help="resample a wireframe PLY into a point cloud")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--spacing", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec")
    g.add_argument("--preset", choices=("cube-helix", "helix"))
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("evaluate", help="score a wireframe PLY against ground truth; writes CSV and figures")
    s.add_argument("--edges", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--delimiter", default=",")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InvariantBreach as exc:
        print(f"error: invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (InputError, EdgeImageError, GeometryError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
