"""Scene assembly: boundary mesh plus every optical ingredient."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fields import (
    Albedo,
    BoundarySource,
    CoefficientField,
    Detector,
    LambertianPhase,
    RayleighPhase,
)
from .geometry import (
    BoundaryCurve,
    BoundaryMesh,
    DetectorPlacement,
    SegmentGrid,
    SurfaceClass,
    build_boundary,
    build_mesh,
    polygon_boundary,
)


@dataclass(frozen=True, eq=False)
class Scene:
    curve: BoundaryCurve
    mesh: BoundaryMesh
    field: CoefficientField
    albedo: Albedo
    source: BoundarySource
    detector: Detector
    phase: RayleighPhase = RayleighPhase()
    reflection: LambertianPhase = LambertianPhase()
    diameter: float = 0.0
    grid: Optional[SegmentGrid] = None
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return self.mesh.h

    def with_field(self, new_field: CoefficientField) -> "Scene":
        """Same boundary and mesh, new atmosphere (the adjoint stays valid)."""
        return Scene(self.curve, self.mesh, new_field, self.albedo, self.source, self.detector,
                     self.phase, self.reflection, self.diameter, self.grid, dict(self.meta))

    def segment_albedo(self) -> np.ndarray:
        return self.albedo.segment_values(self.mesh)


def _finish(curve, h, fld, albedo, source, meta) -> Scene:
    mesh = build_mesh(curve, h)
    det = Detector.from_mesh(mesh)
    diam = mesh.diameter()
    return Scene(curve, mesh, fld, albedo, source, det, diameter=diam,
                 grid=SegmentGrid.build(mesh), meta=meta)


def build_scene(
    profile: str = "cos3",
    h: float = 0.02,
    mfp: float = 4.0,
    albedo_variant: str = "oscillating",
    source_variant: str = "oscillating",
    detector: DetectorPlacement = DetectorPlacement(),
) -> Scene:
    """Mountain scene. ``mfp`` is the mean free path in units of the domain
    diameter (``math.inf`` for vacuum); sigma_s = 2 sigma_a."""
    if albedo_variant == "oscillating":
        albedo = Albedo.oscillating()
    elif albedo_variant == "constant":
        albedo = Albedo.constant()
    else:
        raise ValueError(f"unknown albedo variant {albedo_variant!r}")
    if source_variant == "oscillating":
        source = BoundarySource.oscillating()
    elif source_variant == "flat":
        source = BoundarySource.flat()
    else:
        raise ValueError(f"unknown source variant {source_variant!r}")
    breaks = set(albedo.breakpoints) | {source.x_lo, source.x_hi}
    curve = build_boundary(profile, detector=detector, x_breaks=sorted(breaks))
    mesh = build_mesh(curve, h)
    diam = mesh.diameter()
    fld = CoefficientField.from_mfp(mfp * diam) if not math.isinf(mfp) else CoefficientField()
    meta = dict(profile=profile, mfp_over_diam=mfp, albedo_variant=albedo_variant,
                source_variant=source_variant, detector=detector)
    return Scene(curve, mesh, fld, albedo, source, Detector.from_mesh(mesh), diameter=diam,
                 grid=SegmentGrid.build(mesh), meta=meta)


def toy_direct_scene(h: float = 10.0) -> Scene:
    """Rectangle [0,2]x[0,1] whose floor is an absorbing strip, a detector on
    [0.5,1.5] and another absorbing strip. The flat source covers (0.25, 1.75)
    on the ceiling, so P[D] = 2/3 with no reflections at all."""
    verts = [(0, 0), (0.5, 0), (1.5, 0), (2, 0), (2, 1), (0, 1)]
    tags = [SurfaceClass.MOUNTAIN, SurfaceClass.DETECTOR, SurfaceClass.MOUNTAIN,
            SurfaceClass.SIDE, SurfaceClass.SKY, SurfaceClass.SIDE]
    sky_breaks = {4: [(2.0 - x) / 2.0 for x in (1.75, 1.5, 0.5, 0.25)]}
    curve = polygon_boundary(verts, tags, sky_breaks)
    return _finish(curve, h, CoefficientField(), Albedo.arcs({}),
                   BoundarySource.flat(0.25, 1.75, 1.0), dict(profile="toy_direct"))


def toy_plates_scene(
    h: float = 0.05,
    length: float = 2.0,
    height: float = 0.5,
    floor_albedo: float = 0.8,
    ceiling_albedo: float = 0.6,
    window: tuple = (0.8, 1.2),
    field: CoefficientField = CoefficientField(),
) -> Scene:
    """Two reflecting plates: a floor and a ceiling with a source window in the
    ceiling, an absorbing left wall and a detector covering the right wall."""
    L, H = length, height
    w0, w1 = window
    verts = [(0, 0), (L, 0), (L, H), (w1, H), (w0, H), (0, H)]
    tags = [SurfaceClass.MOUNTAIN, SurfaceClass.DETECTOR, SurfaceClass.MOUNTAIN,
            SurfaceClass.SKY, SurfaceClass.MOUNTAIN, SurfaceClass.SIDE]
    curve = polygon_boundary(verts, tags)
    albedo = Albedo.arcs({0: floor_albedo, 2: ceiling_albedo, 4: ceiling_albedo})
    return _finish(curve, h, field, albedo, BoundarySource.flat(w0, w1, H),
                   dict(profile="toy_plates", floor_albedo=floor_albedo,
                        ceiling_albedo=ceiling_albedo, length=L, height=H, window=window))
