"""Optical coefficients, transmittance, phase functions, albedo, source and detector."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .geometry import BoundaryMesh, RayHit, SurfaceClass, ray_cast

TWO_PI = 2.0 * math.pi
RAYLEIGH_NORM = 3.0 * math.pi
RAYLEIGH_MAX = 2.0 / RAYLEIGH_NORM


# ---------------------------------------------------------------- coefficients

@dataclass(frozen=True)
class CoefficientField:
    """sigma_a(r) = absorption * m(r), sigma_s(r) = scattering * m(r) with
    m(r) = 1 + amplitude * sin(2 pi r[axis] / period). ``amplitude = 0`` gives
    constant coefficients."""

    absorption: float = 0.0
    scattering: float = 0.0
    amplitude: float = 0.0
    period: float = 1.0
    axis: int = 0

    def __post_init__(self):
        if self.absorption < 0 or self.scattering < 0:
            raise ValueError("coefficients must be nonnegative")
        if abs(self.amplitude) > 1.0:
            raise ValueError("modulation amplitude must lie in [-1, 1]")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.axis not in (0, 1):
            raise ValueError("axis is 0 (x) or 1 (y)")

    @classmethod
    def from_mfp(cls, mfp: float, scatter_fraction: float = 2.0 / 3.0) -> "CoefficientField":
        """Constant field with total extinction 1/mfp (``inf`` means vacuum)."""
        if not mfp > 0:
            raise ValueError("mean free path must be positive")
        sigma = 0.0 if math.isinf(mfp) else 1.0 / mfp
        return cls(absorption=sigma * (1.0 - scatter_fraction), scattering=sigma * scatter_fraction)

    @property
    def total(self) -> float:
        return self.absorption + self.scattering

    @property
    def is_constant(self) -> bool:
        return self.amplitude == 0.0

    def base(self, which: str) -> float:
        if which == "total":
            return self.total
        if which == "scattering":
            return self.scattering
        if which == "absorption":
            return self.absorption
        raise ValueError(f"unknown coefficient {which!r}")

    def modulation(self, r) -> float:
        r = np.asarray(r, dtype=float)
        return 1.0 + self.amplitude * np.sin(TWO_PI * r[..., self.axis] / self.period)

    def sigma(self, r, which: str = "total"):
        return self.base(which) * self.modulation(r)

    def modulation_integral(self, r, direction, t: float) -> float:
        """Integral of m along ``r + s*direction`` for s in [0, t]."""
        if self.amplitude == 0.0:
            return t
        c0 = float(r[self.axis])
        dc = float(direction[self.axis])
        k = TWO_PI / self.period
        if abs(dc) * t * k < 1e-9:
            # the coordinate barely moves; expand to second order
            return t * (1.0 + self.amplitude * (math.sin(k * c0) + 0.5 * k * dc * t * math.cos(k * c0)))
        return t + self.amplitude * (math.cos(k * c0) - math.cos(k * (c0 + dc * t))) / (k * dc)


def optical_depth(field: CoefficientField, r, r_prime, which: str = "total") -> float:
    """Line integral of sigma_which from ``r`` to ``r_prime`` (closed form)."""
    r = np.asarray(r, dtype=float)
    d = np.asarray(r_prime, dtype=float) - r
    length = float(math.hypot(d[0], d[1]))
    base = field.base(which)
    if length == 0.0 or base == 0.0:
        return 0.0
    return base * field.modulation_integral(r, d / length, length)


def transmittance(field: CoefficientField, r, r_prime, which: str = "total") -> float:
    return math.exp(-optical_depth(field, r, r_prime, which))


@dataclass(frozen=True)
class Collision:
    point: np.ndarray
    t: float


@dataclass(frozen=True)
class BoundaryHit:
    hit: RayHit


def invert_depth(field: CoefficientField, r, direction, target: float, t_max: float, which: str) -> float:
    """Distance t in [0, t_max] at which the optical depth reaches ``target``."""
    base = field.base(which)
    if field.amplitude == 0.0:
        return target / base
    lo, hi = 0.0, t_max
    t = min(target / base, t_max)
    for _ in range(200):
        f = base * field.modulation_integral(r, direction, t) - target
        if f > 0:
            hi = t
        else:
            lo = t
        slope = base * float(field.modulation(np.asarray(r) + t * np.asarray(direction)))
        step = t - f / slope if slope > 0 else 0.5 * (lo + hi)
        if not (lo < step < hi):
            step = 0.5 * (lo + hi)
        if abs(step - t) <= 1e-15 * max(1.0, t):
            return step
        t = step
    return t


def sample_free_path(
    field: CoefficientField, mesh: BoundaryMesh, r, v, u: float, which: str = "total",
    skip: Optional[int] = None,
) -> Union[Collision, BoundaryHit]:
    """First point along the ray where transmittance drops below ``u``, or the
    boundary hit if it never does. ``u`` must lie in the open interval (0, 1)."""
    if not 0.0 < u < 1.0:
        raise ValueError("free-path variate must lie in (0, 1)")
    hit = ray_cast(mesh, r, v, skip=skip)
    target = -math.log(u)
    base = field.base(which)
    if base == 0.0:
        return BoundaryHit(hit)
    depth = base * field.modulation_integral(np.asarray(r, float), np.asarray(v, float), hit.t)
    if target >= depth:
        return BoundaryHit(hit)
    t = invert_depth(field, np.asarray(r, float), np.asarray(v, float), target, hit.t, which)
    return Collision(np.asarray(r, float) + t * np.asarray(v, float), t)


# -------------------------------------------------------------------- phases

def rotate(v, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


@dataclass(frozen=True)
class RayleighPhase:
    """p(v -> v') = (1 + (v.v')^2) / (3 pi) on the unit circle."""

    @property
    def max_value(self) -> float:
        return RAYLEIGH_MAX

    def eval(self, v, v_prime) -> float:
        c = float(np.dot(v, v_prime))
        return (1.0 + c * c) / RAYLEIGH_NORM

    def sample(self, v, rng: np.random.Generator) -> np.ndarray:
        while True:
            theta = TWO_PI * rng.random()
            c = math.cos(theta)
            if rng.random() <= 0.5 * (1.0 + c * c):
                return rotate(v, theta)


@dataclass(frozen=True)
class LambertianPhase:
    """Outgoing density cos(phi)/2 in the angle phi measured from the inward normal."""

    def eval(self, inward_normal, v_prime) -> float:
        c = float(np.dot(inward_normal, v_prime))
        return 0.5 * c if c > 0.0 else 0.0

    def sample(self, inward_normal, rng: np.random.Generator) -> np.ndarray:
        n = np.asarray(inward_normal, dtype=float)
        t = np.array([n[1], -n[0]])
        phi = math.asin(2.0 * rng.random() - 1.0)
        return math.cos(phi) * n + math.sin(phi) * t


# -------------------------------------------------------------------- albedo

@dataclass(frozen=True)
class AlbedoPiece:
    x_lo: float
    x_hi: float
    base: float
    amplitude: float = 0.0


@dataclass(frozen=True)
class Albedo:
    """Albedo on reflective (mountain) boundary: a piecewise rule in x,
    alpha = base + amplitude * sin(2 pi x / period) on each piece, 0 elsewhere.
    ``per_arc`` overrides the rule with constants for individual boundary arcs
    (used by small test cavities)."""

    pieces: tuple = ()
    period: float = 0.05
    per_arc: Optional[dict] = None

    @classmethod
    def oscillating(cls) -> "Albedo":
        return cls((AlbedoPiece(-2.5, 1.0, 0.35, 0.25), AlbedoPiece(1.0, 2.5, 0.75, 0.25)), 0.05)

    @classmethod
    def constant(cls, value: float = 1.0, half_width: float = 2.5) -> "Albedo":
        return cls((AlbedoPiece(-half_width, half_width, value, 0.0),), 1.0)

    @classmethod
    def arcs(cls, values: dict) -> "Albedo":
        return cls((), 1.0, dict(values))

    @property
    def breakpoints(self) -> tuple:
        return tuple(sorted({p.x_lo for p in self.pieces} | {p.x_hi for p in self.pieces}))

    def _piece_coeffs(self, x: float):
        for p in self.pieces:
            if p.x_lo < x < p.x_hi:
                return p.base, p.amplitude
        return 0.0, 0.0

    def at(self, x: float, tag: SurfaceClass = SurfaceClass.MOUNTAIN, arc: Optional[int] = None) -> float:
        if self.per_arc is not None:
            return float(self.per_arc.get(arc, 0.0)) if tag == SurfaceClass.MOUNTAIN else 0.0
        if tag != SurfaceClass.MOUNTAIN:
            return 0.0
        base, amp = self._piece_coeffs(x)
        return base + amp * math.sin(TWO_PI * x / self.period)

    def segment_coeffs(self, mesh: BoundaryMesh):
        """Per-segment (base, amplitude) so alpha(x) = base + amp sin(2 pi x/period)
        anywhere on that segment. Piece boundaries must be mesh nodes."""
        n = mesh.n_segments
        base = np.zeros(n)
        amp = np.zeros(n)
        for j in range(n):
            if mesh.tags[j] != SurfaceClass.MOUNTAIN:
                continue
            if self.per_arc is not None:
                base[j] = float(self.per_arc.get(int(mesh.arc_index[j]), 0.0))
            else:
                base[j], amp[j] = self._piece_coeffs(float(mesh.center[j, 0]))
        return base, amp

    def segment_values(self, mesh: BoundaryMesh, points=None) -> np.ndarray:
        base, amp = self.segment_coeffs(mesh)
        x = mesh.center[:, 0] if points is None else np.asarray(points)[:, 0]
        return base + amp * np.sin(TWO_PI * x / self.period)


# -------------------------------------------------------------------- source

@dataclass(frozen=True)
class BoundarySource:
    """Mono-directional downward source on the sky line y = ``y``:
    Q(x) = (1 + amplitude sin(2 pi x / period)) / Z on (x_lo, x_hi)."""

    x_lo: float = -2.5
    x_hi: float = 2.5
    amplitude: float = 0.25
    period: float = 0.07
    y: float = 4.0

    def __post_init__(self):
        if not self.x_hi > self.x_lo:
            raise ValueError("empty source support")
        if abs(self.amplitude) > 1.0:
            raise ValueError("source amplitude must lie in [-1, 1]")

    @classmethod
    def oscillating(cls) -> "BoundarySource":
        return cls(-2.5, 2.5, 0.25, 0.07)

    @classmethod
    def flat(cls, x_lo: float = -2.5, x_hi: float = 2.5, y: float = 4.0) -> "BoundarySource":
        return cls(x_lo, x_hi, 0.0, 1.0, y)

    @property
    def direction(self) -> np.ndarray:
        return np.array([0.0, -1.0])

    def unnormalized_mass(self, a: float, b: float) -> float:
        a = max(a, self.x_lo)
        b = min(b, self.x_hi)
        if b <= a:
            return 0.0
        k = TWO_PI / self.period
        return (b - a) + self.amplitude * (math.cos(k * a) - math.cos(k * b)) / k

    @property
    def normalization(self) -> float:
        return self.unnormalized_mass(self.x_lo, self.x_hi)

    def mass(self, a: float, b: float) -> float:
        """Source probability carried by x in (a, b)."""
        return self.unnormalized_mass(a, b) / self.normalization

    def density_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = (x > self.x_lo) & (x < self.x_hi)
        q = (1.0 + self.amplitude * np.sin(TWO_PI * x / self.period)) / self.normalization
        return np.where(inside, q, 0.0)

    def density(self, r, v) -> float:
        """Q(r, v); the direction part is a point mass on straight down."""
        if abs(float(r[1]) - self.y) > 1e-12 or not np.allclose(v, self.direction, atol=1e-12):
            return 0.0
        return float(self.density_x(float(r[0])))

    def sample_x(self, rng: np.random.Generator, a: Optional[float] = None, b: Optional[float] = None) -> float:
        a = self.x_lo if a is None else max(a, self.x_lo)
        b = self.x_hi if b is None else min(b, self.x_hi)
        env = 1.0 + abs(self.amplitude)
        while True:
            x = a + (b - a) * rng.random()
            if rng.random() * env <= 1.0 + self.amplitude * math.sin(TWO_PI * x / self.period):
                return x

    def sample(self, rng: np.random.Generator):
        return np.array([self.sample_x(rng), self.y]), self.direction


# ------------------------------------------------------------------ detector

@dataclass(frozen=True)
class Detector:
    """Straight detector interval from ``a`` to ``b`` on the boundary. The
    response is g0 = 1/(|interval| pi) for every arriving direction."""

    a: tuple
    b: tuple

    @property
    def length(self) -> float:
        return float(math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1]))

    @property
    def g0(self) -> float:
        return 1.0 / (self.length * math.pi)

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.a, float) + np.asarray(self.b, float))

    @classmethod
    def from_mesh(cls, mesh: BoundaryMesh) -> "Detector":
        idx = mesh.segments_of(SurfaceClass.DETECTOR)
        if idx.size == 0:
            raise ValueError("mesh has no detector segment")
        pts = np.concatenate([mesh.a[idx], mesh.b[idx]])
        d = pts[:, None, :] - pts[None, :, :]
        i, j = np.unravel_index(np.argmax((d**2).sum(-1)), (len(pts), len(pts)))
        return cls(tuple(pts[i]), tuple(pts[j]))


def detector_hit(detector: Detector, hit: RayHit, v=None) -> bool:
    """A photon arriving on a detector-class segment registers."""
    return hit.tag == SurfaceClass.DETECTOR
