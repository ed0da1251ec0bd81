"""Path densities of the analog, heuristic and SAI chains, evaluated from the
path geometry alone (no kernel code). All densities use one dominating
measure: per unit x at the source, per unit length at volume vertices and per
unit angle at every direction change.
"""

from __future__ import annotations

import math

import numpy as np

from .adjoint import window_sines
from .fields import optical_depth
from .geometry import SurfaceClass, ray_cast


def _unit(d):
    return d / math.hypot(d[0], d[1])


def _crosses(p, v, a, b) -> bool:
    """Does the ray p + t v (t > 0) cross the closed segment a-b?"""
    e = np.asarray(b) - np.asarray(a)
    den = v[0] * e[1] - v[1] * e[0]
    if den == 0.0:
        return False
    w = np.asarray(a) - p
    t = (w[0] * e[1] - w[1] * e[0]) / den
    s = (w[0] * v[1] - w[1] * v[0]) / den
    return t > 0.0 and 0.0 <= s <= 1.0


def _steps(path):
    """Yield (r_prev, r, vertex, v_in, v_out) for every interior vertex."""
    pos = [v.position for v in path.vertices]
    dirs = [np.array([0.0, -1.0])] + [_unit(b - a) for a, b in zip(pos[:-1], pos[1:])]
    # dirs[k] is the direction arriving at vertex k
    for k in range(1, len(pos) - 1):
        yield pos[k], path.vertices[k], dirs[k], dirs[k + 1]


def _albedo(scene, vertex) -> float:
    mesh = scene.mesh
    j = vertex.segment
    return scene.albedo.at(float(vertex.position[0]), SurfaceClass(int(mesh.tags[j])), int(mesh.arc_index[j]))


def _lambert(scene, vertex, v) -> float:
    return scene.reflection.eval(scene.mesh.inward[vertex.segment], v)


def _transmissions(scene, path, which):
    pos = [v.position for v in path.vertices]
    return [math.exp(-optical_depth(scene.field, a, b, which)) for a, b in zip(pos[:-1], pos[1:])]


def density_analog(scene, path) -> float:
    d = float(scene.source.density_x(path.vertices[0].position[0]))
    for e in _transmissions(scene, path, "total"):
        d *= e
    for r, vert, v_in, v_out in _steps(path):
        if vert.kind == "volume":
            d *= float(scene.field.sigma(r, "scattering")) * scene.phase.eval(v_in, v_out)
        else:
            d *= _albedo(scene, vert) * _lambert(scene, vert, v_out)
    return d


def detector_cone(scene, r):
    """(direction to detector midpoint, cone half-test) or None when the
    midpoint is hidden; the cone is the set of directions whose ray crosses
    the detector interval."""
    mid = scene.detector.midpoint
    u = _unit(mid - r)
    hit = ray_cast(scene.mesh, r, u)
    if hit.tag != SurfaceClass.DETECTOR:
        return None
    a = np.asarray(scene.detector.a, float) - r
    b = np.asarray(scene.detector.b, float) - r
    width = abs(math.atan2(a[0] * b[1] - a[1] * b[0], a[0] * b[0] + a[1] * b[1]))
    return u, width


def heuristic_kernel(scene, q_v: float, r, v_in, v_out) -> float:
    p = scene.phase.eval(v_in, v_out)
    if q_v >= 1.0:
        return p
    cone = detector_cone(scene, r)
    if cone is None:
        return p
    u, width = cone
    q_heu = 1.0 - (1.0 - q_v) * scene.phase.eval(v_in, u) / scene.phase.max_value
    inside = _crosses(r, v_out, scene.detector.a, scene.detector.b)
    return q_heu * p + ((1.0 - q_heu) / width if inside else 0.0)


def density_heu(scene, q_v: float, path) -> float:
    d = float(scene.source.density_x(path.vertices[0].position[0]))
    for e in _transmissions(scene, path, "scattering"):
        d *= e
    for r, vert, v_in, v_out in _steps(path):
        if vert.kind == "volume":
            d *= float(scene.field.sigma(r, "scattering")) * heuristic_kernel(scene, q_v, r, v_in, v_out)
        else:
            d *= _lambert(scene, vert, v_out)
    return d


def sai_kernel(scene, adjoint, segment: int, r, v) -> float:
    """SAI direction density at boundary point r (on ``segment``) toward v."""
    mesh = scene.mesh
    n = mesh.inward[segment]
    kap = float(n @ v)
    if kap <= 0:
        return 0.0
    targets, pmf = adjoint.rows.row(segment)
    total = 0.0
    for j, pj in zip(targets, pmf):
        if not _crosses(r, v, mesh.a[j], mesh.b[j]):
            continue
        lo, hi, ok = window_sines(r, n, mesh.tangent[segment], mesh.a[j][None], mesh.b[j][None])
        if ok[0]:
            total += pj * 0.5 * kap / (0.5 * (hi[0] - lo[0]))
    return total


def density_sai(scene, adjoint, path) -> float:
    if any(v.kind == "volume" for v in path.vertices):
        return 0.0
    x0 = float(path.vertices[0].position[0])
    d = float(scene.source.density_x(x0)) * adjoint.source.ratio(x0)
    for r, vert, v_in, v_out in _steps(path):
        d *= sai_kernel(scene, adjoint, vert.segment, r, v_out)
    return d


def mixture_weight(scene, adjoint, q_s: float, q_v: float, path) -> float:
    """Analog density over the regularized mixture density."""
    da = density_analog(scene, path)
    ds = density_sai(scene, adjoint, path) if q_s < 1.0 else 0.0
    dh = density_heu(scene, q_v, path)
    return da / ((1.0 - q_s) * ds + q_s * dh)
