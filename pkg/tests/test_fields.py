import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import quad, simpson

from saimc.fields import (
    Albedo,
    BoundarySource,
    CoefficientField,
    Collision,
    BoundaryHit,
    LambertianPhase,
    RayleighPhase,
    detector_hit,
    optical_depth,
    sample_free_path,
    transmittance,
)
from saimc.geometry import RayHit, SurfaceClass
from saimc.scene import build_scene


def rayleigh_cdf(theta):
    return (1.5 * theta + 0.25 * np.sin(2 * theta)) / (3 * math.pi)


def test_optical_depth_examples():
    assert optical_depth(CoefficientField(), (0, 0), (1, 1)) == 0.0
    f = CoefficientField(absorption=1.0, scattering=1.0)
    assert optical_depth(f, (0, 2), (1, 2)) == pytest.approx(2.0)
    assert transmittance(f, (0, 2), (0, 3)) == pytest.approx(math.exp(-2), abs=1e-15)
    assert transmittance(CoefficientField(), (0, 2), (3, 3)) == 1.0


def test_optical_depth_against_simpson():
    f = CoefficientField(absorption=0.5, scattering=0.5, amplitude=0.5, period=0.5, axis=1)
    r0, r1 = np.array([0.3, 2.1]), np.array([0.3, 3.1])
    s = np.linspace(0.0, 1.0, 200_001)
    sig = 1.0 + 0.5 * np.sin(2 * math.pi * (2.1 + s) / 0.5)
    ref = simpson(sig, x=s)
    assert optical_depth(f, r0, r1) == pytest.approx(ref, abs=1e-8)
    # oblique ray, x-modulated field
    g = CoefficientField(absorption=0.2, scattering=0.4, amplitude=0.8, period=0.3, axis=0)
    a, b = np.array([-1.0, 2.5]), np.array([1.7, 3.9])
    L = np.linalg.norm(b - a)
    pts = a[None, :] + np.linspace(0, 1, 400_001)[:, None] * (b - a)[None, :]
    ref = simpson(g.sigma(pts, "total"), x=np.linspace(0, L, 400_001))
    assert optical_depth(g, a, b) == pytest.approx(ref, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(x0=st.floats(-3, 3), y0=st.floats(2, 4), ang=st.floats(0, 2 * math.pi),
       t1=st.floats(0.01, 2), t2=st.floats(0.01, 2), amp=st.floats(0, 1))
def test_transmittance_multiplicative(x0, y0, ang, t1, t2, amp):
    f = CoefficientField(absorption=0.3, scattering=0.6, amplitude=amp, period=0.4, axis=0)
    a = np.array([x0, y0])
    v = np.array([math.cos(ang), math.sin(ang)])
    b, c = a + t1 * v, a + (t1 + t2) * v
    lhs = transmittance(f, a, c)
    rhs = transmittance(f, a, b) * transmittance(f, b, c)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)
    assert 0.0 < lhs <= 1.0


def test_mfp_convention():
    f = CoefficientField.from_mfp(4.0)
    assert f.total == pytest.approx(0.25)
    assert f.scattering / f.total == pytest.approx(2.0 / 3.0)
    assert f.scattering == pytest.approx(2 * f.absorption)
    assert CoefficientField.from_mfp(math.inf).total == 0.0


def test_sample_free_path_examples(cos3_scene):
    mesh = cos3_scene.mesh
    r, v = np.array([0.0, 3.0]), np.array([0.0, -1.0])
    with pytest.raises(ValueError):
        sample_free_path(CoefficientField(1.0, 0.0), mesh, r, v, 1.0)
    out = sample_free_path(CoefficientField(1.0, 0.0), mesh, r, v, math.exp(-1))
    assert isinstance(out, Collision)
    assert out.t == pytest.approx(1.0, abs=1e-12)
    out = sample_free_path(CoefficientField(), mesh, r, v, 0.3)
    assert isinstance(out, BoundaryHit)


def test_free_path_distribution_reference_sampler(cos3_scene):
    # constant sigma_s = 1.5 along one ray: truncated exponential law
    f = CoefficientField(absorption=0.0, scattering=1.5)
    mesh = cos3_scene.mesh
    r, v = np.array([-3.0, 3.9]), np.array([1.0, -0.3]) / math.hypot(1.0, 0.3)
    rng = np.random.default_rng(7)
    ts, tb = [], None
    for u in rng.random(20_000):
        out = sample_free_path(f, mesh, r, v, u, "scattering")
        if isinstance(out, Collision):
            ts.append(out.t)
        else:
            tb = out.hit.t
    tb = tb if tb is not None else sample_free_path(CoefficientField(), mesh, r, v, 0.5).hit.t
    cdf = lambda t: (1 - np.exp(-1.5 * t)) / (1 - math.exp(-1.5 * tb))
    assert stats.kstest(ts, cdf).pvalue > 1e-3


def test_rayleigh_values_and_normalization():
    p = RayleighPhase()
    v = np.array([1.0, 0.0])
    assert p.eval(v, np.array([0.0, 1.0])) == pytest.approx(1 / (3 * math.pi))
    assert p.eval(v, v) == pytest.approx(2 / (3 * math.pi))
    assert p.eval(v, -v) == pytest.approx(2 / (3 * math.pi))
    assert p.max_value == pytest.approx(2 / (3 * math.pi))
    total = quad(lambda th: p.eval(v, np.array([math.cos(th), math.sin(th)])), 0, 2 * math.pi)[0]
    assert total == pytest.approx(1.0, abs=1e-8)
    assert rayleigh_cdf(2 * math.pi) == pytest.approx(1.0)
    # closed-form cdf matches quadrature
    for th in (0.3, 1.7, 4.0):
        ref = quad(lambda t: (1 + math.cos(t) ** 2) / (3 * math.pi), 0, th)[0]
        assert rayleigh_cdf(th) == pytest.approx(ref, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(0, 2 * math.pi), b=st.floats(0, 2 * math.pi))
def test_rayleigh_symmetry(a, b):
    p = RayleighPhase()
    v = np.array([math.cos(a), math.sin(a)])
    w = np.array([math.cos(b), math.sin(b)])
    assert p.eval(v, w) == pytest.approx(p.eval(w, v), rel=1e-14)
    assert p.eval(v, w) == pytest.approx(p.eval(-v, -w), rel=1e-14)


def test_rayleigh_reference_sampler():
    p = RayleighPhase()
    rng = np.random.default_rng(8)
    v = np.array([0.6, 0.8])
    ang = []
    for _ in range(50_000):
        w = p.sample(v, rng)
        assert abs(np.linalg.norm(w) - 1) < 1e-12
        ang.append(math.atan2(v[0] * w[1] - v[1] * w[0], v @ w) % (2 * math.pi))
    assert stats.kstest(ang, rayleigh_cdf).pvalue > 1e-3


def test_lambertian_values_and_sampler():
    lam = LambertianPhase()
    n = np.array([0.0, 1.0])
    assert lam.eval(n, n) == pytest.approx(0.5)
    assert lam.eval(n, np.array([1.0, 0.0])) == 0.0
    assert lam.eval(n, -n) == 0.0
    total = quad(lambda phi: lam.eval(n, np.array([math.sin(phi), math.cos(phi)])), -math.pi / 2, math.pi / 2)[0]
    assert total == pytest.approx(1.0, abs=1e-8)
    rng = np.random.default_rng(9)
    phis = []
    for _ in range(50_000):
        w = lam.sample(n, rng)
        assert w @ n >= 0
        phis.append(math.atan2(w[0], w[1]))
    counts, edges = np.histogram(phis, bins=64, range=(-math.pi / 2, math.pi / 2))
    expected = len(phis) * 0.5 * np.diff(np.sin(edges))
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_albedo_examples():
    a = Albedo.oscillating()
    assert a.at(3.0) == 0.0
    assert a.at(-3.0) == 0.0
    assert a.at(1.0125) == pytest.approx(1.0)
    assert a.at(0.0) == pytest.approx(0.35)
    assert a.at(0.5, SurfaceClass.SKY) == 0.0
    xs = np.linspace(-3.2, 3.2, 2001)
    vals = np.array([a.at(x) for x in xs])
    assert vals.min() >= 0.0 and vals.max() <= 1.0


def test_source_examples():
    s = BoundarySource.flat()
    assert s.density((0.0, 4.0), (0.0, -1.0)) == pytest.approx(0.2)
    assert s.density((0.0, 4.0), (1.0, 0.0)) == 0.0
    assert s.density((3.0, 4.0), (0.0, -1.0)) == 0.0
    osc = BoundarySource.oscillating()
    for src in (s, osc):
        total = sum(quad(lambda x: float(src.density_x(x)), lo, lo + 0.05, epsabs=1e-14)[0]
                    for lo in np.arange(-2.5, 2.5 - 1e-12, 0.05))
        assert total == pytest.approx(1.0, abs=1e-10)
        assert src.mass(-2.5, 2.5) == pytest.approx(1.0, abs=1e-15)


def test_source_reference_sampler():
    src = BoundarySource.oscillating()
    rng = np.random.default_rng(10)
    xs = [src.sample_x(rng) for _ in range(50_000)]
    cdf = np.vectorize(lambda x: src.mass(src.x_lo, x))
    assert stats.kstest(xs, cdf).pvalue > 1e-3


def test_detector(cos3_scene):
    det = cos3_scene.detector
    assert det.g0 * det.length * math.pi == pytest.approx(1.0)
    assert det.length == pytest.approx(0.2)
    hit = RayHit(np.array([math.pi, 3.1]), 0, 1.0, SurfaceClass.DETECTOR)
    assert detector_hit(det, hit)
    assert not detector_hit(det, RayHit(np.array([0.0, 0.0]), 0, 1.0, SurfaceClass.MOUNTAIN))


def test_scene_defaults():
    sc = build_scene("cos3", h=0.1, mfp=4.0)
    assert sc.field.total == pytest.approx(1.0 / (4.0 * sc.diameter))
    # corners (-pi, 4) and (pi, 2) are the farthest pair
    assert sc.diameter == pytest.approx(math.hypot(2 * math.pi, 2.0), rel=1e-12)
