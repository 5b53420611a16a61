import numpy as np
import pytest

from edgeforge.geometry import CameraRig, project_many
from edgeforge.pepc import PEPC, CandidatePoint, intersect_polyline_line
from edgeforge.synth import helix_arc
from edgeforge.validation import (
    EdgeContext,
    EdgePoint3D,
    Polyline3D,
    _walk,
    filter_outliers,
    follow_edge,
    integrate_view,
    min_observations,
    refine_visibility,
    resolve_pepc,
    validate_selection,
)

from conftest import projected_views, ring_cameras, simple_camera, view_from_chains

SEG = np.array([[-0.9, -0.6, -0.5], [0.8, 0.7, 0.6]])


def context(cams, curves, extra=None):
    views = projected_views(cams, curves)
    for v, chains in (extra or {}).items():
        views[v] = view_from_chains(v, [pl.coords for pl in views[v].polylines] + chains)
    return EdgeContext(CameraRig(cams), views)


def seed_on(ctx, view, s, pid=0):
    return ctx.candidate_at(view, pid, s)


def epi_candidates(ctx, seed, view):
    line = ctx.rig.epipolar_line(seed.view, view, seed.point)
    return [c for pl in ctx.views[view].polylines for c in intersect_polyline_line(pl, line, view=view)]


def true_triple(ctx, views, s=100.0):
    seed = seed_on(ctx, views[0], s)
    return [seed] + [epi_candidates(ctx, seed, v)[0] for v in views[1:]]


def offset_chain(coords, px, extend=0.0):
    d = coords[-1] - coords[0]
    u = d / np.hypot(*d)
    n = np.array([-u[1], u[0]])
    out = coords + px * n
    out[0] -= extend * u
    out[-1] += extend * u
    return out


def test_validate_true_triple():
    cams = ring_cameras()[:3]
    ctx = context(cams, [SEG])
    res = validate_selection(ctx, true_triple(ctx, [c.id for c in cams]))
    assert res is not None
    point, dirs = res
    assert point.max_error < 1e-6
    assert set(dirs) == {c.id for c in cams}


def test_validate_decoy_rejected():
    cams = ring_cameras()[:3]
    base = context(cams, [SEG])
    decoy = offset_chain(base.views[cams[2].id].polylines[0].coords, 8.0, extend=200.0)
    ctx = context(cams, [SEG], {cams[2].id: [decoy]})
    seed, ca, _ = true_triple(ctx, [c.id for c in cams])
    cands = epi_candidates(ctx, seed, cams[2].id)
    wrong = [c for c in cands if c.pid == 1]
    assert wrong
    assert validate_selection(ctx, [seed, ca, wrong[0]]) is None


def test_validate_degenerate_geometry_rejected():
    cams = [simple_camera(f"c{k}", C=(0.0, 0.0, -float(k))) for k in range(3)]
    views = {c.id: view_from_chains(c.id, [[(0.0, 50.0), (100.0, 50.0)]]) for c in cams}
    ctx = EdgeContext(CameraRig(cams), views)
    sel = [ctx.candidate_at(c.id, 0, 50.0) for c in cams]
    assert validate_selection(ctx, sel) is None


def true_pepc(ctx, views, s=100.0):
    seed = seed_on(ctx, views[0], s)
    return PEPC(seed, {v: epi_candidates(ctx, seed, v) for v in views[1:]}, ("ref", 0))


def test_resolve_unique():
    cams = ring_cameras()[:3]
    ctx = context(cams, [SEG])
    assert resolve_pepc(ctx, true_pepc(ctx, [c.id for c in cams])) is not None


def mirrored_segment(cam, seg, scale=1.25):
    """Segment behind ``seg`` along the rays of ``cam``: identical image in that view."""
    return cam.C + scale * (seg - cam.C)


def test_resolve_mirrored_decoy_ambiguous():
    cams = ring_cameras()[:3]
    twin = mirrored_segment(cams[0], SEG)
    ctx = context(cams[1:], [SEG, twin])
    ctx = EdgeContext(CameraRig(cams), {**ctx.views, **projected_views(cams[:1], [SEG])})
    pepc = true_pepc(ctx, [c.id for c in cams])
    assert all(len(c) == 2 for c in pepc.candidates.values())
    assert resolve_pepc(ctx, pepc) is None
    # the same PEPC restricted to the true edge resolves
    unique = PEPC(pepc.seed, {v: [c for c in cs if c.pid == 0] for v, cs in pepc.candidates.items()}, ("ref", 0))
    assert resolve_pepc(ctx, unique) is not None


def test_resolve_no_valid_selection():
    cams = ring_cameras()[:3]
    ctx = context(cams, [SEG])
    pepc = true_pepc(ctx, [c.id for c in cams])
    shifted = {v: [CandidatePoint.on(v, ctx.polyline(c), c.seg, min(1.0, c.t + 0.2)) for c in cs]
               for v, cs in pepc.candidates.items()}
    assert resolve_pepc(ctx, PEPC(pepc.seed, shifted, ("ref", 0))) is None


def grow(ctx, views, s=100.0):
    point, dirs = validate_selection(ctx, true_triple(ctx, views, s))
    return follow_edge(ctx, point, dirs, views[0])


def test_follow_straight_segment():
    cams = ring_cameras()[:3]
    ctx = context(cams, [SEG])
    pl = grow(ctx, [c.id for c in cams])
    seed_pl = ctx.views[cams[0].id].polylines[0]
    arcs = [ctx.arc(p.observations[cams[0].id]) for p in pl.points]
    assert (max(arcs) - min(arcs)) >= 0.9 * seed_pl.length
    assert all(p.max_error <= ctx.eps for p in pl.points)


def test_follow_helix_five_views():
    cams = ring_cameras()[:5]
    helix = helix_arc()
    ctx = context(cams, [helix])
    X = helix[200]
    sel = []
    for cam in cams:
        uv = project_many(cam, X[None])[0][0]
        if not sel:
            pl0 = ctx.views[cam.id].polylines[0]
            _, seg, t, _ = pl0.closest_point(uv)
            sel.append(CandidatePoint.on(cam.id, pl0, seg, t))
        else:
            sel.append(min(epi_candidates(ctx, sel[0], cam.id), key=lambda c: np.hypot(*(c.uv - uv))))
    point, dirs = validate_selection(ctx, sel)
    pl = follow_edge(ctx, point, dirs, cams[0].id)
    assert len(pl.points[pl.seed_index].observations) == 5
    assert len(pl) > 20
    dense = helix_arc(n=20000)
    d = np.min(np.linalg.norm(pl.positions[:, None, :] - dense[None], axis=2), axis=1)
    diag = np.linalg.norm(helix.max(axis=0) - helix.min(axis=0))
    assert d.max() <= 0.005 * diag


def test_seed_at_endpoint_grows_one_way():
    cams = ring_cameras()[:3]
    ctx = context(cams, [SEG])
    views = [c.id for c in cams]
    point, dirs = validate_selection(ctx, true_triple(ctx, views, s=0.0))
    walks = [_walk(ctx, point, views[0], dirs, o) for o in (1, -1)]
    assert sorted(len(w) > 0 for w in walks) == [False, True]


def test_integrate_true_fourth_view():
    cams = ring_cameras()[:4]
    ctx = context(cams, [SEG])
    pl = grow(ctx, [c.id for c in cams[:3]])
    start = pl.points[pl.seed_index]
    cand = epi_candidates(ctx, start.observations[cams[0].id], cams[3].id)[0]
    out = integrate_view(ctx, pl, cams[3].id, cand)
    assert out is not pl
    assert all(cams[3].id in p.observations for p in out.points[1:-1])
    assert all(ctx.triangulate(p.observations).max_reproj_error <= ctx.eps for p in out.points)


def test_integrate_parallel_decoy_rejected():
    cams = ring_cameras()[:4]
    base = context(cams, [SEG])
    decoy = offset_chain(base.views[cams[3].id].polylines[0].coords, 6.0, extend=200.0)
    ctx = context(cams, [SEG], {cams[3].id: [decoy]})
    pl = grow(ctx, [c.id for c in cams[:3]])
    start = pl.points[pl.seed_index]
    wrong = [c for c in epi_candidates(ctx, start.observations[cams[0].id], cams[3].id) if c.pid == 1]
    assert integrate_view(ctx, pl, cams[3].id, wrong[0]) is pl


def test_integrate_existing_view_rejected():
    cams = ring_cameras()[:3]
    ctx = context(cams, [SEG])
    pl = grow(ctx, [c.id for c in cams])
    cand = pl.points[pl.seed_index].observations[cams[1].id]
    assert integrate_view(ctx, pl, cams[1].id, cand) is pl


def three_view_polyline(ctx, cams):
    pl = grow(ctx, [c.id for c in cams[:3]])
    assert all(p.n_obs == 3 for p in pl.points)
    return pl


def test_refine_adds_visible_view():
    cams = ring_cameras()
    ctx = context(cams[:3], [SEG])
    six = context(cams, [SEG])
    pl = three_view_polyline(ctx, cams)
    ctx6 = EdgeContext(six.rig, {**six.views, **ctx.views})
    out = refine_visibility(ctx6, pl)
    gained = [p for p in out.points if p.n_obs > 3]
    assert len(gained) >= 0.8 * len(out.points)
    assert all(p.max_error <= ctx.eps for p in out.points)


def test_refine_two_parallel_polylines_skipped():
    cams = ring_cameras()
    base = context(cams, [SEG])
    extra = {c.id: [offset_chain(base.views[c.id].polylines[0].coords, 1.5)] for c in cams[3:]}
    ctx = context(cams, [SEG], extra)
    pl = three_view_polyline(context(cams[:3], [SEG]), cams)
    out = refine_visibility(ctx, pl)
    assert all(p.n_obs == 3 for p in out.points)


def test_refine_occluded_view_unchanged():
    cams = ring_cameras()
    ctx = context(cams[:3], [SEG])
    far = np.array([[2.5, 2.5, 2.0], [2.6, 2.4, 2.2]])
    views = {**projected_views(cams[3:], [far]), **ctx.views}
    pl = three_view_polyline(ctx, cams)
    out = refine_visibility(EdgeContext(CameraRig(cams), views), pl)
    assert [p.n_obs for p in out.points] == [p.n_obs for p in pl.points]


K_V_TABLE = {1: 4, 2: 4, 3: 4, 4: 4, 5: 4, 6: 4, 7: 4.5, 8: 5, 9: 5.5, 10: 6, 11: 6.5, 12: 7, 13: 7.5,
             14: 8, 15: 8.5, 16: 9, 17: 9.5, 18: 10, 19: 10.5, 20: 11}


@pytest.mark.parametrize("v_m", sorted(K_V_TABLE))
def test_min_observations_table(v_m):
    assert min_observations(v_m) == K_V_TABLE[v_m]


def fake_polyline(counts):
    pts = []
    for k, n in enumerate(counts):
        obs = {f"v{j}": CandidatePoint(f"v{j}", (0.0, 0.0), 0, 0, 0.0) for j in range(n)}
        pts.append(EdgePoint3D(np.array([float(k), 0.0, 0.0]), obs))
    return Polyline3D(pts)


def test_filter_outliers_all_four():
    edges = [fake_polyline([4, 4, 4]), fake_polyline([4, 4])]
    assert filter_outliers(edges) == edges


def test_filter_outliers_median_ten():
    good = [fake_polyline([10] * 5) for _ in range(3)]
    weak = fake_polyline([4, 4, 4])
    assert filter_outliers(good + [weak]) == good


def test_filter_outliers_empty():
    assert filter_outliers([]) == []


def test_resolve_order_independent():
    cams = ring_cameras()[:3]
    twin = mirrored_segment(cams[0], SEG)
    views = {**projected_views(cams[1:], [SEG, twin]), **projected_views(cams[:1], [SEG])}
    ctx = EdgeContext(CameraRig(cams), views)
    pepc = true_pepc(ctx, [c.id for c in cams])
    clean = context(cams, [SEG])
    single = true_pepc(clean, [c.id for c in cams])
    for c, p in ((ctx, pepc), (clean, single)):
        base = resolve_pepc(c, p)
        flipped = PEPC(p.seed, {v: cs[::-1] for v, cs in reversed(list(p.candidates.items()))}, p.provenance)
        other = resolve_pepc(c, flipped)
        assert (base is None) == (other is None)
        if base is not None:
            assert np.array_equal(base[0].position, other[0].position) and base[1] == other[1]


def test_refine_never_removes_observations(helix_run):
    for pl in helix_run.polylines:
        assert all(p.n_obs >= 3 for p in pl.points)
    cams = ring_cameras()
    ctx = context(cams[:3], [SEG])
    pl = three_view_polyline(ctx, cams)
    out = refine_visibility(EdgeContext(CameraRig(cams), {**context(cams, [SEG]).views, **ctx.views}), pl)
    for before, after in zip(pl.points, out.points):
        assert set(before.observations) <= set(after.observations)
