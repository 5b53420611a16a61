import math

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from edgeforge.edge_graph import (
    EdgeGraph2D,
    EdgeImage,
    EdgeImageError,
    Polyline2D,
    build_graph,
    extract_polylines,
    filter_graph,
    graph_to_svg,
    read_edge_image,
    regular_length,
    smooth_graph,
    smooth_polyline,
    write_pgm,
)



def mask_from(rows):
    return EdgeImage.from_mask(np.array([[ch == "#" for ch in r] for r in rows]))


def cycle_length(nodes, cyc):
    return sum(np.hypot(*(nodes[a] - nodes[b])) for a, b in zip(cyc, cyc[1:] + cyc[:1]))


def oracle_graph(mask):
    """Scanline-order greedy linking, checked by enumerating every cycle after each insertion."""
    rows, cols = np.nonzero(mask)
    nodes = np.column_stack([cols + 0.5, rows + 0.5])
    index = {(r, c): i for i, (r, c) in enumerate(zip(rows, cols))}
    g = nx.Graph()
    g.add_nodes_from(range(len(nodes)))
    for i, (r, c) in enumerate(zip(rows, cols)):
        for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):
            j = index.get((r + dr, c + dc))
            if j is None:
                continue
            g.add_edge(i, j)
            short = any(cycle_length(nodes, cyc) < 4.0 - 1e-9
                        for cyc in nx.simple_cycles(g, length_bound=5) if i in cyc and j in cyc)
            if short:
                g.remove_edge(i, j)
    return {tuple(sorted(e)) for e in g.edges}


def short_cycles(graph):
    g = nx.Graph(graph.edges)
    return [c for c in nx.simple_cycles(g, length_bound=5) if cycle_length(graph.nodes, c) < 4.0 - 1e-9]


def test_single_pixel():
    g = build_graph(mask_from(["...", ".#.", "..."]))
    assert len(g) == 1
    assert g.edges == []
    assert np.array_equal(g.nodes[0], [1.5, 1.5])


def test_horizontal_run():
    g = build_graph(mask_from(["#####"]))
    assert len(g) == 5 and len(g.edges) == 4
    assert g.degrees == [1, 2, 2, 2, 1]


def test_block_2x2_matches_cycle_oracle():
    img = mask_from(["##", "##"])
    g = build_graph(img)
    assert set(g.edges) == oracle_graph(img.mask)
    assert set(g.edges) == {(0, 1), (0, 2), (0, 3)}
    assert short_cycles(g) == []


def test_unit_square_loop_survives():
    # 4 diagonal links around one pixel: loop length 4*sqrt(2) >= 4 px
    g = build_graph(mask_from([".#.", "#.#", ".#."]))
    assert len(g.edges) == 4


def test_ring_diagonal_shortcuts_follow_scan_order():
    img = mask_from(["###", "#.#", "###"])
    g = build_graph(img)
    assert set(g.edges) == oracle_graph(img.mask)
    assert short_cycles(g) == []


def test_empty_mask():
    g = build_graph(EdgeImage.from_mask(np.zeros((4, 4), bool)))
    assert len(g) == 0


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (5, 6)))
def test_random_masks_match_oracle_and_have_no_short_loops(mask):
    g = build_graph(EdgeImage.from_mask(mask))
    assert len(g) == int(mask.sum())
    assert set(g.edges) == oracle_graph(mask)
    assert short_cycles(g) == []


def test_gap_bridging_joins_ends_only():
    img = mask_from(["###..###"])
    assert len(build_graph(img).edges) == 4
    g = build_graph(img, bridge_gap=3.0)
    assert len(g.edges) == 5
    assert len(set(g.components().tolist())) == 1
    assert len(build_graph(img, bridge_gap=2.0).edges) == 4


def test_extract_path():
    pls = extract_polylines(build_graph(mask_from(["######"])))
    assert len(pls) == 1 and len(pls[0]) == 6


def test_extract_y_junction():
    g = build_graph(mask_from([
        "#...#",
        ".#.#.",
        "..#..",
        "..#..",
        "..#..",
    ]))
    pls = extract_polylines(g)
    assert len(pls) == 3
    junction = [i for i, d in enumerate(g.degrees) if d == 3]
    assert len(junction) == 1
    assert all(junction[0] in (pl.node_indices[0], pl.node_indices[-1]) for pl in pls)


def test_extract_pure_cycle_starts_top_left():
    g = build_graph(mask_from([".#.", "#.#", ".#."]))
    (pl,) = extract_polylines(g)
    assert pl.node_indices[0] == pl.node_indices[-1] == 0
    assert len(pl) == 5


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (6, 6)))
def test_polylines_cover_every_edge_once(mask):
    g = build_graph(EdgeImage.from_mask(mask), bridge_gap=2.0)
    seen = []
    for pl in extract_polylines(g):
        seen += [tuple(sorted(e)) for e in zip(pl.node_indices, pl.node_indices[1:])]
    assert sorted(seen) == sorted(g.edges)


def test_graph_json_round_trip():
    g = build_graph(mask_from(["##.", ".##"]))
    h = EdgeGraph2D.from_json(g.to_json())
    assert np.array_equal(g.nodes, h.nodes) and g.edges == h.edges


def test_graph_rejects_self_loop():
    with pytest.raises(ValueError):
        EdgeGraph2D.from_edges([[0, 0], [1, 0]], [(0, 0)])


def test_svg_export():
    g = build_graph(mask_from(["####"]))
    svg = graph_to_svg(g, 4, 1)
    assert svg.startswith("<svg") and "polyline" in svg


# Douglas-Peucker


def dense(pts, step=0.05):
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / step)))
        out.append(a + np.linspace(0, 1, n, endpoint=False)[:, None] * (b - a))
    out.append(pts[-1:])
    return np.concatenate(out)


def seg_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(ab @ ab, 1e-300), 0, 1)
    return np.hypot(*(a + t[:, None] * ab - p).T)


def chain_distance(p, chain):
    return np.min([seg_distance(p, a, b) for a, b in zip(chain[:-1], chain[1:])], axis=0)


def hausdorff(a, b):
    return max(chain_distance(dense(a), b).max(), chain_distance(dense(b), a).max())


def test_dp_collinear():
    pl = Polyline2D.from_points(np.column_stack([np.arange(10.0), 2 * np.arange(10.0)]))
    assert len(smooth_polyline(pl)) == 2


def test_dp_right_angle():
    pts = [(float(x), 0.0) for x in range(11)] + [(10.0, float(y)) for y in range(1, 11)]
    out = smooth_polyline(Polyline2D.from_points(pts))
    assert out.coords.tolist() == [[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]


def random_walk_polyline(rng):
    n = int(rng.integers(2, 40))
    steps = rng.normal(0, 1, (n - 1, 2)) * rng.uniform(0.3, 4)
    return Polyline2D.from_points(np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)]))


@pytest.mark.parametrize("seed", range(5))
def test_dp_contract_random(seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        pl = random_walk_polyline(rng)
        out = smooth_polyline(pl, 1.0)
        assert np.array_equal(out.coords[0], pl.coords[0])
        assert np.array_equal(out.coords[-1], pl.coords[-1])
        assert len(out) <= len(pl)
        assert hausdorff(pl.coords, out.coords) <= 1.0 + 1e-9


def test_smooth_graph_keeps_junctions_and_simple():
    g = build_graph(mask_from([
        "#.......#",
        ".#.....#.",
        "..#...#..",
        "...#.#...",
        "....#....",
        "....#....",
        "....#....",
    ]))
    s = smooth_graph(g)
    assert sorted(s.degrees, reverse=True)[0] == 3
    assert len(set(s.edges)) == len(s.edges)
    assert len(extract_polylines(s)) == 3


# regular length


def oracle_regular_length(pl, alpha):
    d = np.diff(pl.coords, axis=0)
    lens = np.hypot(d[:, 0], d[:, 1])
    ang = [math.degrees(abs(math.atan2(d[k][0] * d[k + 1][1] - d[k][1] * d[k + 1][0], d[k] @ d[k + 1])))
           for k in range(len(d) - 1)]
    best = 0.0
    for i in range(len(lens)):
        for j in range(i, len(lens)):
            if all(a <= alpha for a in ang[i:j]):
                best = max(best, float(sum(lens[i:j + 1])))
    return best


def test_regular_length_straight():
    assert regular_length(Polyline2D.from_points([(0, 0), (37, 0)])) == 37.0


def test_regular_length_zigzag():
    pts = [(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (3, 2)]
    assert regular_length(Polyline2D.from_points(pts)) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_regular_length_matches_interval_oracle(seed):
    rng = np.random.default_rng(50 + seed)
    for _ in range(100):
        pl = random_walk_polyline(rng)
        alpha = float(rng.choice([5.0, 20.0, 45.0, 90.0]))
        assert regular_length(pl, alpha) == pytest.approx(oracle_regular_length(pl, alpha), rel=1e-12)


# filter


def long_line_and_specks(n_noise=99):
    nodes = [(float(x) + 0.5, 0.5) for x in range(101)]
    edges = [(k, k + 1) for k in range(100)]
    for k in range(n_noise):
        base = len(nodes)
        y = 10.5 + 3 * (k // 20)
        x = 0.5 + 5 * (k % 20)
        nodes += [(x, y), (x + 1 + (k % 3), y)]
        edges.append((base, base + 1))
    return EdgeGraph2D.from_edges(nodes, edges)


def test_filter_single_component_unchanged():
    g = build_graph(mask_from(["#####", "....#"]))
    f = filter_graph(g)
    assert np.array_equal(f.nodes, g.nodes) and f.edges == g.edges


def test_filter_empty():
    assert len(filter_graph(EdgeGraph2D.empty())) == 0


def test_filter_keeps_long_component():
    g = long_line_and_specks()
    # 100 polylines: top 10 = the line plus nine specks of length 3
    ranked = sorted((regular_length(p) for p in extract_polylines(g)), reverse=True)
    assert ranked[0] == 100.0 and ranked[9] == 3.0
    f = filter_graph(g)
    kept = [regular_length(p) for p in extract_polylines(f)]
    assert 100.0 in kept
    assert all(v >= 3.0 for v in kept)


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (8, 8)), st.sampled_from([0.05, 0.1, 0.3]))
def test_filter_idempotent(mask, frac):
    once = filter_graph(build_graph(EdgeImage.from_mask(mask)), 20.0, frac)
    twice = filter_graph(once, 20.0, frac)
    assert np.array_equal(once.nodes, twice.nodes) and once.edges == twice.edges


# edge image I/O


def test_pgm_round_trip(tmp_path):
    mask = np.random.default_rng(0).random((7, 9)) < 0.3
    write_pgm(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_edge_image(tmp_path / "m.pgm").mask, mask)


def test_pgm_threshold_and_comment(tmp_path):
    gray = np.array([[0, 127, 128, 255]], dtype=np.uint8)
    (tmp_path / "g.pgm").write_bytes(b"P5\n# edges\n4 1\n255\n" + gray.tobytes())
    assert read_edge_image(tmp_path / "g.pgm").mask.tolist() == [[False, False, True, True]]


def test_p4_bits(tmp_path):
    (tmp_path / "b.pbm").write_bytes(b"P4\n10 1\n" + bytes([0b10100000, 0b01000000]))
    assert np.nonzero(read_edge_image(tmp_path / "b.pbm").mask[0])[0].tolist() == [0, 2, 9]


def test_png(tmp_path):
    gray = np.array([[0, 200], [129, 10]], dtype=np.uint8)
    Image.fromarray(gray).save(tmp_path / "e.png")
    assert read_edge_image(tmp_path / "e.png").mask.tolist() == [[False, True], [True, False]]


def test_unknown_format(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"GIF89a")
    with pytest.raises(EdgeImageError):
        read_edge_image(tmp_path / "x.bin")
