"""Boundary geometry of the 2D scene: arcs, polyline mesh, ray casting, visibility.

The polyline mesh is the simulated geometry. Both the Monte Carlo chains and the
adjoint solver see the same segments, so there is no mismatch between where a
photon lands and which segment carries its importance.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np

T_MIN = 1e-10
GRAZE_EPS = 1e-12
S_TOL = 1e-12

TOP = 4.0
FLAT_FLOOR = 2.0


class SurfaceClass(IntEnum):
    MOUNTAIN = 0
    SIDE = 1
    SKY = 2
    DETECTOR = 3


class NoIntersection(RuntimeError):
    """A ray left the closed domain without hitting the boundary."""


def cos3_profile(x):
    return 1.0 - np.cos(x) ** 3


def flat_profile(x):
    return np.full_like(np.asarray(x, dtype=float), FLAT_FLOOR)


@dataclass(frozen=True)
class Arc:
    """One piece of the closed boundary, traversed counter-clockwise.

    A ``line`` arc runs straight from ``p0`` to ``p1``. A ``graph`` arc follows
    ``y = func(x)`` from ``p0[0]`` to ``p1[0]``. ``breaks`` are interior
    parameters in (0, 1) where the mesh must place a node.
    """

    kind: str
    p0: tuple
    p1: tuple
    tag: SurfaceClass
    func: Optional[Callable] = None
    breaks: tuple = ()

    def point(self, s):
        s = np.asarray(s, dtype=float)
        x0, y0 = self.p0
        x1, y1 = self.p1
        if self.kind == "graph":
            x = x0 + s * (x1 - x0)
            return np.stack([x, self.func(x)], axis=-1)
        return np.stack([x0 + s * (x1 - x0), y0 + s * (y1 - y0)], axis=-1)

    def param_of_x(self, x: float) -> float:
        return (x - self.p0[0]) / (self.p1[0] - self.p0[0])

    def param_of_y(self, y: float) -> float:
        return (y - self.p0[1]) / (self.p1[1] - self.p0[1])


@dataclass(frozen=True)
class BoundaryCurve:
    arcs: tuple
    profile: str

    def __post_init__(self):
        for a, b in zip(self.arcs, self.arcs[1:] + self.arcs[:1]):
            if not np.allclose(a.point(1.0), b.point(0.0), atol=1e-12):
                raise ValueError("boundary arcs do not connect end-to-end")


@dataclass(frozen=True)
class DetectorPlacement:
    """Where the detector sits: ``wall='right'`` (center is a y value) or
    ``wall='floor'`` (center is an x value on the surface profile)."""

    wall: str = "right"
    center: float = 3.1
    half_width: float = 0.1


def _split_breaks(lo: float, hi: float, values, to_param) -> tuple:
    out = sorted(to_param(v) for v in values if lo < v < hi)
    return tuple(s for s in out if 1e-12 < s < 1.0 - 1e-12)


def build_boundary(
    profile: str = "cos3",
    box: tuple = (-math.pi, math.pi, TOP),
    detector: Optional[DetectorPlacement] = DetectorPlacement(),
    x_breaks: Sequence[float] = (),
) -> BoundaryCurve:
    """Closed boundary for the ``flat`` or ``cos3`` mountain scene.

    ``box`` is ``(x_min, x_max, y_top)``. The side walls run from the surface
    profile at ``x_min``/``x_max`` up to the sky at ``y_top``. ``x_breaks`` are
    x positions where surface and sky arcs must carry mesh nodes (albedo branch
    changes, source support edges).
    """
    x_lo, x_hi, top = box
    if not (x_hi > x_lo):
        raise ValueError("degenerate domain box")
    if profile == "cos3":
        func = cos3_profile
    elif profile == "flat":
        func = flat_profile
    else:
        raise ValueError(f"unknown profile {profile!r}")
    y_left = float(func(np.array(x_lo)))
    y_right = float(func(np.array(x_hi)))
    if not (top > max(y_left, y_right)):
        raise ValueError("degenerate domain box")

    det = detector
    surf_breaks = list(x_breaks)
    arcs = []

    def surface_arc(xa, xb, tag):
        ya = float(func(np.array(xa)))
        yb = float(func(np.array(xb)))
        p0, p1 = (xa, ya), (xb, yb)
        kind = "line" if profile == "flat" else "graph"
        arc = Arc(kind, p0, p1, tag, func=func if kind == "graph" else None)
        breaks = _split_breaks(xa, xb, surf_breaks, lambda v: (v - xa) / (xb - xa))
        return Arc(arc.kind, p0, p1, tag, func=arc.func, breaks=breaks)

    if det is not None and det.wall == "floor":
        d0, d1 = det.center - det.half_width, det.center + det.half_width
        if not (x_lo < d0 < d1 < x_hi):
            raise ValueError("floor detector outside the surface")
        arcs.append(surface_arc(x_lo, d0, SurfaceClass.MOUNTAIN))
        arcs.append(surface_arc(d0, d1, SurfaceClass.DETECTOR))
        arcs.append(surface_arc(d1, x_hi, SurfaceClass.MOUNTAIN))
    else:
        arcs.append(surface_arc(x_lo, x_hi, SurfaceClass.MOUNTAIN))

    if det is not None and det.wall == "right":
        d0, d1 = det.center - det.half_width, det.center + det.half_width
        if not (y_right < d0 < d1 < top):
            raise ValueError("wall detector outside the right wall")
        arcs.append(Arc("line", (x_hi, y_right), (x_hi, d0), SurfaceClass.SIDE))
        arcs.append(Arc("line", (x_hi, d0), (x_hi, d1), SurfaceClass.DETECTOR))
        arcs.append(Arc("line", (x_hi, d1), (x_hi, top), SurfaceClass.SIDE))
    elif det is not None and det.wall not in ("right", "floor"):
        raise ValueError(f"unknown detector wall {det.wall!r}")
    else:
        arcs.append(Arc("line", (x_hi, y_right), (x_hi, top), SurfaceClass.SIDE))

    sky_breaks = _split_breaks(x_lo, x_hi, surf_breaks, lambda v: (x_hi - v) / (x_hi - x_lo))
    arcs.append(Arc("line", (x_hi, top), (x_lo, top), SurfaceClass.SKY, breaks=sky_breaks))
    arcs.append(Arc("line", (x_lo, top), (x_lo, y_left), SurfaceClass.SIDE))
    return BoundaryCurve(tuple(arcs), profile)


def polygon_boundary(vertices, tags, breaks=None) -> BoundaryCurve:
    """Closed polygon boundary, vertices counter-clockwise; edge k runs from
    vertex k to vertex k+1 and carries ``tags[k]``."""
    verts = [tuple(map(float, v)) for v in vertices]
    n = len(verts)
    if len(tags) != n:
        raise ValueError("one tag per edge required")
    area = 0.5 * sum(verts[k][0] * verts[(k + 1) % n][1] - verts[(k + 1) % n][0] * verts[k][1] for k in range(n))
    if area <= 0:
        raise ValueError("polygon must be counter-clockwise")
    arcs = []
    for k in range(n):
        b = tuple(sorted(breaks[k])) if breaks and breaks.get(k) else ()
        arcs.append(Arc("line", verts[k], verts[(k + 1) % n], SurfaceClass(tags[k]), breaks=b))
    return BoundaryCurve(tuple(arcs), "polygon")


def _arc_nodes(arc: Arc, h: float) -> np.ndarray:
    """Node parameters for one arc: every break is a node, chords are <= h."""
    cuts = (0.0,) + tuple(arc.breaks) + (1.0,)
    params = [0.0]
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        if arc.kind == "line":
            length = float(np.hypot(*(np.subtract(arc.p1, arc.p0)))) * (s1 - s0)
            n = max(1, math.ceil(length / h - 1e-12))
            params.extend(np.linspace(s0, s1, n + 1)[1:])
            continue
        dense = np.linspace(s0, s1, 4097)
        pts = arc.point(dense)
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
        n = max(1, math.ceil(cum[-1] / h - 1e-12))
        while True:
            targets = np.linspace(0.0, cum[-1], n + 1)
            sp = np.interp(targets, cum, dense)
            sp[0], sp[-1] = s0, s1
            chords = np.hypot(*np.diff(arc.point(sp), axis=0).T)
            if chords.max() <= h:
                break
            n += 1
        params.extend(sp[1:])
    return np.asarray(params)


@dataclass(frozen=True, eq=False)
class BoundaryMesh:
    """Polyline discretization of the boundary, segments in CCW order."""

    a: np.ndarray
    b: np.ndarray
    tags: np.ndarray
    arc_index: np.ndarray
    h: float
    center: np.ndarray = field(init=False)
    length: np.ndarray = field(init=False)
    tangent: np.ndarray = field(init=False)
    normal: np.ndarray = field(init=False)

    def __post_init__(self):
        e = self.b - self.a
        length = np.hypot(e[:, 0], e[:, 1])
        tangent = e / length[:, None]
        object.__setattr__(self, "center", 0.5 * (self.a + self.b))
        object.__setattr__(self, "length", length)
        object.__setattr__(self, "tangent", tangent)
        # outward normal of a CCW polygon edge
        object.__setattr__(self, "normal", np.stack([tangent[:, 1], -tangent[:, 0]], axis=1))
        for arr in (self.a, self.b, self.tags, self.arc_index, self.center, self.length, self.tangent, self.normal):
            arr.setflags(write=False)

    @property
    def inward(self) -> np.ndarray:
        return -self.normal

    @property
    def n_segments(self) -> int:
        return len(self.length)

    @property
    def total_length(self) -> float:
        return math.fsum(self.length)

    @property
    def vertices(self) -> np.ndarray:
        return self.a

    def diameter(self) -> float:
        """Maximal distance between two boundary points (hull diameter)."""
        from scipy.spatial import ConvexHull

        hull = self.a[ConvexHull(self.a).vertices]
        d = hull[:, None, :] - hull[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def segments_of(self, tag: SurfaceClass) -> np.ndarray:
        return np.flatnonzero(self.tags == int(tag))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "center_x", "center_y", "length", "normal_x", "normal_y", "class"])
            for j in range(self.n_segments):
                w.writerow([
                    j, repr(float(self.center[j, 0])), repr(float(self.center[j, 1])),
                    repr(float(self.length[j])), repr(float(self.normal[j, 0])),
                    repr(float(self.normal[j, 1])), SurfaceClass(int(self.tags[j])).name.lower(),
                ])


def build_mesh(curve: BoundaryCurve, h: float) -> BoundaryMesh:
    if not h > 0:
        raise ValueError("h must be positive")
    a, b, tags, arcs = [], [], [], []
    for k, arc in enumerate(curve.arcs):
        pts = arc.point(_arc_nodes(arc, h))
        pts[0] = arc.point(0.0)
        pts[-1] = arc.point(1.0)
        a.append(pts[:-1])
        b.append(pts[1:])
        tags.append(np.full(len(pts) - 1, int(arc.tag), dtype=np.int32))
        arcs.append(np.full(len(pts) - 1, k, dtype=np.int32))
    a = np.concatenate(a)
    b = np.concatenate(b)
    # close exactly: each segment starts where the previous ended
    b[:-1] = a[1:]
    b[-1] = a[0]
    return BoundaryMesh(a, b, np.concatenate(tags), np.concatenate(arcs), float(h))


@dataclass(frozen=True)
class RayHit:
    point: np.ndarray
    segment: int
    t: float
    tag: SurfaceClass


def _ray_segment_params(mesh: BoundaryMesh, origin, direction):
    o = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    e = mesh.b - mesh.a
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    w = mesh.a - o
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = (w[:, 0] * e[:, 1] - w[:, 1] * e[:, 0]) / denom
        s = (w[:, 0] * d[1] - w[:, 1] * d[0]) / denom
    ok = np.abs(denom) > GRAZE_EPS * mesh.length
    ok &= (s >= -S_TOL) & (s <= 1.0 + S_TOL)
    return t, ok


def ray_cast(mesh: BoundaryMesh, origin, direction, skip: Optional[int] = None) -> RayHit:
    """Nearest boundary hit along ``origin + t*direction`` with ``t > T_MIN``.

    Brute force over all segments; the compiled core uses a uniform grid for
    the same query.
    """
    t, ok = _ray_segment_params(mesh, origin, direction)
    ok &= t > T_MIN
    if skip is not None:
        ok[skip] = False
    if not ok.any():
        raise NoIntersection(f"ray from {tuple(origin)} along {tuple(direction)} left the domain")
    tt = np.where(ok, t, np.inf)
    j = int(np.argmin(tt))
    p = np.asarray(origin, dtype=float) + tt[j] * np.asarray(direction, dtype=float)
    return RayHit(p, j, float(tt[j]), SurfaceClass(int(mesh.tags[j])))


def double_layer_kernel(r, normal, r_prime) -> float:
    """``max(0, n.(r'-r)) / |r'-r|^2`` in two dimensions.

    ``normal`` must face into the domain, so chords to visible points give a
    positive value and back-facing chords are clamped to zero. Evaluated at a
    point ``r'`` with ``r``'s normal, this is the Jacobian ``dv = p dmu`` that
    turns an angle integral seen from ``r'`` into a boundary integral over ``r``.
    """
    d = np.asarray(r_prime, dtype=float) - np.asarray(r, dtype=float)
    d2 = float(d @ d)
    if d2 == 0.0:
        raise ValueError("double-layer kernel is undefined for coincident points")
    return max(0.0, float(np.asarray(normal, dtype=float) @ d)) / d2


def _front_facing(mesh: BoundaryMesh, i: int, j: int) -> bool:
    d = mesh.center[j] - mesh.center[i]
    return bool(mesh.inward[i] @ d > 0.0 and mesh.inward[j] @ (-d) > 0.0)


def visible(mesh: BoundaryMesh, i: int, j: int) -> bool:
    """True iff the open chord between midpoints of ``i`` and ``j`` stays in
    the domain: it leaves neither midpoint backwards and crosses no other
    segment."""
    if i == j:
        raise ValueError("visibility needs two distinct segments")
    if not _front_facing(mesh, i, j):
        return False
    ci, cj = mesh.center[i], mesh.center[j]
    t, ok = _ray_segment_params(mesh, ci, cj - ci)
    ok[[i, j]] = False
    ok &= (t > 1e-9) & (t < 1.0 - 1e-9)
    return not bool(ok.any())


def visibility_matrix_numpy(mesh: BoundaryMesh) -> np.ndarray:
    """All-pairs midpoint visibility, vectorized row by row."""
    n = mesh.n_segments
    c, nin = mesh.center, mesh.inward
    a, e = mesh.a, mesh.b - mesh.a
    vis = np.zeros((n, n), dtype=bool)
    for i in range(n):
        d = c - c[i]
        front = (d @ nin[i] > 0.0) & (np.einsum("ij,ij->i", -d, nin) > 0.0)
        front[i] = False
        js = np.flatnonzero(front[i + 1:]) + i + 1
        if js.size == 0:
            continue
        dj = d[js]
        denom = dj[:, 0, None] * e[None, :, 1] - dj[:, 1, None] * e[None, :, 0]
        w = a[None, :, :] - c[i][None, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[..., 0] * e[None, :, 1] - w[..., 1] * e[None, :, 0]) / denom
            s = (w[..., 0] * dj[:, 1, None] - w[..., 1] * dj[:, 0, None]) / denom
        hit = (np.abs(denom) > GRAZE_EPS * mesh.length[None, :]) & (s >= -S_TOL) & (s <= 1.0 + S_TOL)
        hit &= (t > 1e-9) & (t < 1.0 - 1e-9)
        hit[:, i] = False
        hit[np.arange(js.size), js] = False
        ok = ~hit.any(axis=1)
        vis[i, js[ok]] = True
    return vis | vis.T


@dataclass(frozen=True, eq=False)
class SegmentGrid:
    """Uniform-grid index over the mesh segments (cell -> segment list)."""

    x0: float
    y0: float
    cell: float
    nx: int
    ny: int
    start: np.ndarray
    items: np.ndarray

    @classmethod
    def build(cls, mesh: BoundaryMesh, target_cells_per_segment: float = 2.0) -> "SegmentGrid":
        lo = np.minimum(mesh.a, mesh.b).min(axis=0)
        hi = np.maximum(mesh.a, mesh.b).max(axis=0)
        span = hi - lo
        pad = 1e-6 * max(span.max(), 1.0)
        lo = lo - pad
        span = span + 2 * pad
        area = span[0] * span[1]
        cell = math.sqrt(area / (target_cells_per_segment * mesh.n_segments))
        cell = max(cell, 2.0 * float(mesh.length.max()))
        nx = max(1, math.ceil(span[0] / cell))
        ny = max(1, math.ceil(span[1] / cell))
        smin = np.minimum(mesh.a, mesh.b)
        smax = np.maximum(mesh.a, mesh.b)
        ix0 = np.clip(np.floor((smin[:, 0] - lo[0]) / cell - 1e-9).astype(int), 0, nx - 1)
        ix1 = np.clip(np.floor((smax[:, 0] - lo[0]) / cell + 1e-9).astype(int), 0, nx - 1)
        iy0 = np.clip(np.floor((smin[:, 1] - lo[1]) / cell - 1e-9).astype(int), 0, ny - 1)
        iy1 = np.clip(np.floor((smax[:, 1] - lo[1]) / cell + 1e-9).astype(int), 0, ny - 1)
        buckets = [[] for _ in range(nx * ny)]
        for k in range(mesh.n_segments):
            for iy in range(iy0[k], iy1[k] + 1):
                for ix in range(ix0[k], ix1[k] + 1):
                    buckets[iy * nx + ix].append(k)
        counts = np.array([len(bk) for bk in buckets], dtype=np.int32)
        start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)
        items = np.array([k for bk in buckets for k in bk], dtype=np.int32)
        return cls(float(lo[0]), float(lo[1]), float(cell), int(nx), int(ny), start, items)
