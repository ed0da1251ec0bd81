import math

import numpy as np
import pytest
from scipy import stats

from saimc.adjoint import (
    AdjointMismatch,
    AllZeroSource,
    NonConvergence,
    assemble,
    ballistic_signal,
    build_sai_directions,
    build_sai_source,
    form_factor_rows,
    load_adjoint_csv,
    solve,
    solve_adjoint,
    spectral_radius_estimate,
)
from saimc.estimators import loglog_slope
from saimc.geometry import SurfaceClass, visibility_matrix_numpy
from saimc.scene import build_scene, toy_plates_scene
from saimc.transport import block_generator, make_kernel


def test_zero_albedo_gives_rg(cos3_scene):
    mesh = cos3_scene.mesh
    vis = visibility_matrix_numpy(mesh)
    A, rg = assemble(mesh, np.zeros(mesh.n_segments), cos3_scene.detector.g0, vis)
    assert not A.any()
    phi, iters, resid = solve(A, rg)
    assert iters == 1
    assert np.array_equal(phi, rg)


def test_hand_computed_entry(flat_scene, flat_adjoint):
    mesh = flat_scene.mesh
    floor = mesh.segments_of(SurfaceClass.MOUNTAIN)
    sky = mesh.segments_of(SurfaceClass.SKY)
    i = floor[np.argmin(np.abs(mesh.center[floor, 0] - 0.3))]
    j = sky[np.argmin(np.abs(mesh.center[sky, 0] + 0.4))]
    d = mesh.center[j] - mesh.center[i]
    dist = np.linalg.norm(d)
    cos_i = d[1] / dist
    cos_j = d[1] / dist
    alpha_i = flat_adjoint.alpha[i]
    assert alpha_i > 0
    hand = alpha_i * mesh.length[j] * (cos_i / 2) * (cos_j / dist)
    assert flat_adjoint.A[i, j] == pytest.approx(hand, rel=1e-12)


def test_occluded_pair_has_zero_entry(cos3_adjoint):
    mesh = cos3_adjoint.mesh
    surf = mesh.segments_of(SurfaceClass.MOUNTAIN)
    i = surf[np.argmin(np.abs(mesh.center[surf, 0] - 0.5))]
    j = surf[np.argmin(np.abs(mesh.center[surf, 0] - 3.0))]
    assert not cos3_adjoint.vis[i, j]
    assert cos3_adjoint.A[i, j] == 0.0 and cos3_adjoint.A[j, i] == 0.0


def test_direct_solve_agrees():
    sc = build_scene("flat", h=0.05, mfp=math.inf, albedo_variant="constant", source_variant="flat")
    adj = solve_adjoint(sc)
    direct = np.linalg.solve(np.eye(sc.mesh.n_segments) - adj.A, adj.rg)
    np.testing.assert_allclose(adj.phi, direct, rtol=0, atol=1e-10 * direct.max())
    assert adj.residual < 1e-12


def test_cos3_direct_solve_and_residual(cos3_adjoint):
    direct = np.linalg.solve(np.eye(cos3_adjoint.mesh.n_segments) - cos3_adjoint.A, cos3_adjoint.rg)
    assert np.max(np.abs(direct - cos3_adjoint.phi)) <= 10 * 1e-12
    assert cos3_adjoint.residual < 1e-12


def test_monotone_iterates(cos3_adjoint):
    A, rg = cos3_adjoint.A, cos3_adjoint.rg
    phi = rg.copy()
    for _ in range(20):
        nxt = A @ phi + rg
        assert np.all(nxt >= phi)
        phi = nxt


def test_zero_importance_where_detector_unreachable(cos3_adjoint):
    mesh = cos3_adjoint.mesh
    non_reflecting = (cos3_adjoint.alpha == 0) & (mesh.tags != SurfaceClass.DETECTOR)
    assert non_reflecting.any()
    assert np.all(cos3_adjoint.phi[non_reflecting] == 0.0)
    assert np.all(cos3_adjoint.phi >= 0)


def test_nonconvergence_reports_spectral_radius(cos3_scene):
    with pytest.raises(NonConvergence, match="spectral radius"):
        solve_adjoint(cos3_scene, max_iter=2)
    rho = spectral_radius_estimate(solve_adjoint(cos3_scene).A)
    assert 0 < rho < 1


def test_geometric_series_toy_cavity():
    # one segment per plate: floor F, two ceiling pieces C1, C2 and the
    # detector wall D; ceilings cannot see each other, so the importance is
    # a hand-summed geometric series of floor-ceiling bounces
    sc = toy_plates_scene(h=10.0)
    adj = solve_adjoint(sc)
    mesh = sc.mesh
    assert mesh.n_segments == 6
    F, D, C1, W, C2, L = range(6)
    g0 = sc.detector.g0

    def a(i, j):
        d = mesh.center[j] - mesh.center[i]
        dist = np.linalg.norm(d)
        ci = max(0.0, mesh.inward[i] @ d / dist)
        cj = max(0.0, -mesh.inward[j] @ d / dist)
        alpha = {F: 0.8, C1: 0.6, C2: 0.6}.get(i, 0.0)
        return alpha * mesh.length[j] * ci * cj / (2 * dist)

    loop = a(F, C1) * a(C1, F) + a(F, C2) * a(C2, F)
    phi_f = (a(F, D) + a(F, C1) * a(C1, D) + a(F, C2) * a(C2, D)) * g0 / (1 - loop)
    assert adj.phi[F] == pytest.approx(phi_f, rel=1e-12)
    assert adj.phi[D] == g0
    assert ballistic_signal(adj) == pytest.approx(phi_f / g0, rel=1e-12)


def test_ballistic_zero_without_reflection():
    sc = build_scene("cos3", h=0.1, mfp=math.inf)
    adj = solve_adjoint(sc)
    A, rg = assemble(sc.mesh, np.zeros(sc.mesh.n_segments), sc.detector.g0, adj.vis)
    phi, _, _ = solve(A, rg)
    # vertical source rays land on the floor, never on the wall detector
    landing = adj.source.landing
    assert np.all(sc.mesh.tags[landing] != SurfaceClass.DETECTOR)
    assert float(sum(adj.source.mass * phi[landing])) == 0.0


def test_source_table_constant_importance(cos3_scene):
    mesh = cos3_scene.mesh
    src = build_sai_source(mesh, np.ones(mesh.n_segments), cos3_scene.source)
    assert src.mass.sum() == pytest.approx(1.0, abs=1e-12)
    for x in np.linspace(-2.49, 2.49, 57):
        assert src.ratio(x) == pytest.approx(1.0, rel=1e-10)


def test_source_table_support_restriction(cos3_scene):
    mesh = cos3_scene.mesh
    phi = np.where(mesh.center[:, 0] < 0, 0.0, 1.0)
    src = build_sai_source(mesh, phi, cos3_scene.source)
    left = mesh.center[src.landing, 0] < 0
    assert left.any()
    assert np.all(src.pmf[left] == 0.0)
    assert src.pmf[~left].sum() == pytest.approx(1.0)


def test_all_zero_source(cos3_scene):
    with pytest.raises(AllZeroSource):
        build_sai_source(cos3_scene.mesh, np.zeros(cos3_scene.mesh.n_segments), cos3_scene.source)


def test_source_interval_draws_chi_square(cos3_scene, cos3_adjoint):
    kern = make_kernel(cos3_scene, cos3_adjoint)
    xs = kern.draw_source(block_generator(11, 0), True, 200_000)
    src = cos3_adjoint.source
    idx = np.searchsorted(src.x0, xs, side="right") - 1
    counts = np.bincount(idx, minlength=src.pmf.size)
    keep = src.pmf > 0
    assert counts[~keep].sum() == 0
    assert stats.chisquare(counts[keep], src.pmf[keep] * xs.size).pvalue > 1e-3


def test_direction_rows(cos3_adjoint):
    rows = cos3_adjoint.rows
    mesh = cos3_adjoint.mesh
    for i in range(mesh.n_segments):
        tgt, pmf = rows.row(i)
        if tgt.size:
            assert pmf.sum() == pytest.approx(1.0, abs=1e-14)
            assert rows.cdf[rows.start[i + 1] - 1] == 1.0
            assert np.all(cos3_adjoint.vis[i, tgt])


def test_rows_with_constant_importance_follow_form_factors(flat_scene):
    mesh = flat_scene.mesh
    vis = visibility_matrix_numpy(mesh)
    alpha = np.ones(mesh.n_segments)
    rows, c_sai = build_sai_directions(mesh, np.ones(mesh.n_segments), alpha, vis)
    W = form_factor_rows(mesh, vis)
    for i in range(0, mesh.n_segments, 17):
        tgt, pmf = rows.row(i)
        np.testing.assert_allclose(pmf, W[i, tgt] / W[i].sum(), rtol=1e-12)
        # convex domain: the form factors from a midpoint add up to one
        assert W[i].sum() == pytest.approx(1.0, abs=1e-12)
        assert c_sai[i] == pytest.approx(1.0, abs=1e-12)


def test_c_sai_close_to_albedo(cos3_adjoint):
    mesh = cos3_adjoint.mesh
    sel = (cos3_adjoint.alpha > 0.1) & (mesh.tags == SurfaceClass.MOUNTAIN)
    dev = np.abs(cos3_adjoint.c_sai[sel] - cos3_adjoint.alpha[sel]) / cos3_adjoint.alpha[sel]
    assert dev.max() < 0.05


def test_ballistic_refinement_slope():
    hs = [0.1, 0.05, 0.02, 0.01]
    b = {}
    for h in hs + [0.005]:
        sc = build_scene("flat", h=h, mfp=math.inf, albedo_variant="constant", source_variant="flat")
        b[h] = ballistic_signal(solve_adjoint(sc))
    halves = {0.1: 0.05, 0.05: 0.02, 0.02: 0.01, 0.01: 0.005}
    diffs = [abs(b[h] - b[halves[h]]) for h in hs]
    assert loglog_slope(hs, diffs) >= 0.8


def test_adjoint_csv_roundtrip(tmp_path, cos3_scene, cos3_adjoint):
    path = tmp_path / "adjoint.csv"
    cos3_adjoint.to_csv(path)
    again = load_adjoint_csv(cos3_scene, path)
    np.testing.assert_array_equal(again.phi, cos3_adjoint.phi)
    np.testing.assert_array_equal(again.rows.pmf, cos3_adjoint.rows.pmf)
    np.testing.assert_array_equal(again.source.pmf, cos3_adjoint.source.pmf)
    other = build_scene("cos3", h=0.1)
    with pytest.raises(AdjointMismatch):
        load_adjoint_csv(other, path)


def test_dump_is_deterministic(tmp_path, cos3_scene):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    solve_adjoint(cos3_scene).to_csv(a)
    solve_adjoint(cos3_scene).to_csv(b)
    assert a.read_bytes() == b.read_bytes()
