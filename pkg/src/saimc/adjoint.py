"""Surface-only adjoint: discrete radiosity solve and the SAI sampling tables.

The importance phi solves phi = A phi + Rg on the mesh. ``Rg`` is g0 on
detector segments, so phi carries g0 units; divide by g0 to read it as a
detection probability.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _backend
from .geometry import BoundaryMesh, SurfaceClass, ray_cast, visibility_matrix_numpy


class NonConvergence(RuntimeError):
    pass


class AdjointMismatch(ValueError):
    """The adjoint table was solved on a different mesh than the scene's."""


class AllZeroSource(RuntimeError):
    """No source ray lands where the importance is positive."""


def visibility(scene, backend: Optional[str] = None) -> np.ndarray:
    """Midpoint visibility matrix, by the compiled grid caster when present."""
    from .transport import kernel_data

    name = backend or _backend.BACKEND
    if name == "numpy":
        return visibility_matrix_numpy(scene.mesh)
    kern = _backend.kernel_class(name)(kernel_data(scene))
    return kern.visibility().astype(bool)


def pair_geometry(mesh: BoundaryMesh):
    """kappa[i, j] (Lambertian density at i toward j) and jac[i, j] (change of
    variables dv = jac dmu at the target), both clamped at zero."""
    c = mesh.center
    nin = mesh.inward
    d = c[None, :, :] - c[:, None, :]
    dist2 = (d**2).sum(-1)
    np.fill_diagonal(dist2, 1.0)
    dist = np.sqrt(dist2)
    cos_i = np.einsum("ik,ijk->ij", nin, d) / dist
    cos_j = -np.einsum("jk,ijk->ij", nin, d) / dist
    kappa = 0.5 * np.maximum(cos_i, 0.0)
    jac = np.maximum(cos_j, 0.0) / dist
    np.fill_diagonal(kappa, 0.0)
    np.fill_diagonal(jac, 0.0)
    return kappa, jac


def assemble(mesh: BoundaryMesh, alpha: np.ndarray, g0: float, vis: np.ndarray):
    """A_ij = alpha_i |s_j| kappa(r_i -> r_j) jac(r_j; r_i) vis_ij, A_ii = 0;
    Rg_j = g0 on detector segments."""
    kappa, jac = pair_geometry(mesh)
    A = alpha[:, None] * mesh.length[None, :] * kappa * jac * vis
    np.fill_diagonal(A, 0.0)
    rg = np.where(mesh.tags == SurfaceClass.DETECTOR, g0, 0.0)
    return A, rg


def solve(A: np.ndarray, rg: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000):
    """Fixed-point iteration phi <- A phi + Rg from phi = Rg.

    Returns ``(phi, iterations, residual)``; raises NonConvergence.
    """
    phi = rg.astype(float).copy()
    for it in range(1, max_iter + 1):
        nxt = A @ phi + rg
        delta = float(np.max(np.abs(nxt - phi))) if phi.size else 0.0
        phi = nxt
        if delta < tol:
            resid = float(np.max(np.abs(phi - A @ phi - rg))) if phi.size else 0.0
            return phi, it, resid
    raise NonConvergence(f"no convergence after {max_iter} iterations (last step {delta:.3e})")


def spectral_radius_estimate(A: np.ndarray, iters: int = 200) -> float:
    x = np.ones(A.shape[0])
    lam = 0.0
    for _ in range(iters):
        y = A @ x
        nrm = float(np.max(np.abs(y)))
        if nrm == 0.0:
            return 0.0
        lam = nrm / float(np.max(np.abs(x)))
        x = y / nrm
    return lam


def window_sines(p, n, t, a, b):
    """Sines (lo, hi) of the direction window from point ``p`` (inward normal
    ``n``, tangent ``t``) onto segments a->b, clipped to the front half-plane.
    Angles are measured from ``n`` toward ``t``. ``ok`` flags nonempty windows."""
    A = np.asarray(a, float) - p
    B = np.asarray(b, float) - p
    an, at = A @ n, A @ t
    bn, bt = B @ n, B @ t
    ok = (an > 0.0) | (bn > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.where(an < 0.0, an / (an - bn), 0.0)
        fb = np.where((an >= 0.0) & (bn < 0.0), bn / (bn - an), 0.0)
    at = np.where(an < 0.0, at + (bt - at) * fa, at)
    bt = np.where((an >= 0.0) & (bn < 0.0), bt + (at - bt) * fb, bt)
    an = np.where(an < 0.0, 0.0, an)
    bn = np.where(bn < 0.0, 0.0, bn)
    ra = np.hypot(an, at)
    rb = np.hypot(bn, bt)
    ok &= (ra > 0.0) & (rb > 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sa = np.where(ok, at / np.where(ra > 0, ra, 1.0), 0.0)
        sb = np.where(ok, bt / np.where(rb > 0, rb, 1.0), 0.0)
    lo = np.minimum(sa, sb)
    hi = np.maximum(sa, sb)
    ok &= hi > lo
    return lo, hi, ok


def form_factor_rows(mesh: BoundaryMesh, vis: np.ndarray) -> np.ndarray:
    """W[i, j]: exact Lambertian form factor from the midpoint of i onto the
    whole of segment j (ignoring occlusion), times midpoint visibility."""
    n = mesh.n_segments
    W = np.zeros((n, n))
    for i in range(n):
        js = np.flatnonzero(vis[i])
        if js.size == 0:
            continue
        lo, hi, ok = window_sines(mesh.center[i], mesh.inward[i], mesh.tangent[i], mesh.a[js], mesh.b[js])
        W[i, js] = np.where(ok, 0.5 * (hi - lo), 0.0)
    return W


@dataclass(frozen=True, eq=False)
class SourceTable:
    """Sky intervals carrying source mass, sorted by x."""

    x0: np.ndarray
    x1: np.ndarray
    mass: np.ndarray
    weight: np.ndarray
    pmf: np.ndarray
    cdf: np.ndarray
    segment: np.ndarray
    landing: np.ndarray

    def ratio(self, x: float) -> float:
        """Q_sai(x) / Q(x)."""
        k = int(np.searchsorted(self.x0, x, side="right")) - 1
        if k < 0 or x > self.x1[k] or self.mass[k] <= 0:
            return 0.0
        return float(self.pmf[k] / self.mass[k])


@dataclass(frozen=True, eq=False)
class DirectionRows:
    """CSR rows: for segment i, targets j with probabilities pmf."""

    start: np.ndarray
    target: np.ndarray
    pmf: np.ndarray
    cdf: np.ndarray

    def row(self, i: int):
        s, e = self.start[i], self.start[i + 1]
        return self.target[s:e], self.pmf[s:e]


@dataclass(frozen=True, eq=False)
class AdjointTable:
    mesh: BoundaryMesh
    phi: np.ndarray
    A: np.ndarray
    rg: np.ndarray
    vis: np.ndarray
    alpha: np.ndarray
    g0: float
    c_sai: np.ndarray
    rows: DirectionRows
    source: SourceTable
    iterations: int
    residual: float
    t0_sec: float
    meta: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return self.mesh.h

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["segment", "center_x", "center_y", "phi", "c_sai", "alpha"])
            for j in range(self.mesh.n_segments):
                w.writerow([j, repr(float(self.mesh.center[j, 0])), repr(float(self.mesh.center[j, 1])),
                            repr(float(self.phi[j])), repr(float(self.c_sai[j])), repr(float(self.alpha[j]))])


def build_sai_source(mesh: BoundaryMesh, phi: np.ndarray, source) -> SourceTable:
    """Discrete SAI source: each sky interval i gets weight mass_i * phi(landing_i),
    where landing_i is hit by the downward ray from the interval midpoint."""
    sky = mesh.segments_of(SurfaceClass.SKY)
    rows = []
    for j in sky:
        lo = max(min(mesh.a[j, 0], mesh.b[j, 0]), source.x_lo)
        hi = min(max(mesh.a[j, 0], mesh.b[j, 0]), source.x_hi)
        if hi <= lo:
            continue
        mass = source.mass(lo, hi)
        hit = ray_cast(mesh, (0.5 * (lo + hi), source.y), source.direction)
        rows.append((lo, hi, mass, mass * phi[hit.segment], j, hit.segment))
    rows.sort()
    if not rows:
        raise AllZeroSource("source support does not overlap the sky")
    x0, x1, mass, weight, seg, land = (np.array(c) for c in zip(*rows))
    total = weight.sum()
    if not total > 0:
        raise AllZeroSource("every source ray lands on zero importance")
    pmf = weight / total
    cdf = np.cumsum(pmf)
    cdf[-1] = 1.0
    return SourceTable(x0.astype(float), x1.astype(float), mass.astype(float), weight.astype(float),
                       pmf, cdf, seg.astype(np.int32), land.astype(np.int32))


def build_sai_directions(mesh: BoundaryMesh, phi: np.ndarray, alpha: np.ndarray, vis: np.ndarray):
    """Row i picks a target j with probability proportional to W_ij phi_j
    (W: exact form factor from the midpoint of i). Returns (rows, c_sai) with
    c_sai_i = phi_i / sum_j W_ij phi_j. Rows of segments that never reflect
    (alpha = 0 or phi = 0) are empty."""
    n = mesh.n_segments
    W = form_factor_rows(mesh, vis)
    weights = W * phi[None, :]
    totals = weights.sum(axis=1)
    usable = (alpha > 0) & (phi > 0) & (totals > 0)
    c_sai = np.zeros(n)
    c_sai[usable] = phi[usable] / totals[usable]
    start = [0]
    target, pmf, cdf = [], [], []
    for i in range(n):
        if usable[i]:
            js = np.flatnonzero(weights[i] > 0)
            p = weights[i, js] / totals[i]
            c = np.cumsum(p)
            c[-1] = 1.0
            target.append(js)
            pmf.append(p)
            cdf.append(c)
        start.append(start[-1] + (len(target[-1]) if usable[i] else 0))
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    rows = DirectionRows(np.array(start, dtype=np.int32), cat(target, np.int32),
                         cat(pmf, float), cat(cdf, float))
    return rows, c_sai


def solve_adjoint(scene, tol: float = 1e-12, max_iter: int = 100_000, vis: Optional[np.ndarray] = None,
                  backend: Optional[str] = None) -> AdjointTable:
    """Assemble, solve and tabulate. ``t0_sec`` times assembly + solve."""
    mesh = scene.mesh
    t_start = time.perf_counter()
    if vis is None:
        vis = visibility(scene, backend)
    alpha = scene.segment_albedo()
    A, rg = assemble(mesh, alpha, scene.detector.g0, vis)
    try:
        phi, iters, resid = solve(A, rg, tol, max_iter)
    except NonConvergence as exc:
        rho = spectral_radius_estimate(A)
        raise NonConvergence(f"{exc}; spectral radius estimate {rho:.6f}") from None
    t0 = time.perf_counter() - t_start
    return tables_from_phi(scene, phi, A, rg, vis, alpha, iters, resid, t0)


def tables_from_phi(scene, phi, A, rg, vis, alpha, iterations=0, residual=float("nan"), t0=0.0):
    mesh = scene.mesh
    rows, c_sai = build_sai_directions(mesh, phi, alpha, vis)
    src = build_sai_source(mesh, phi, scene.source)
    return AdjointTable(mesh, phi, A, rg, vis, alpha, scene.detector.g0, c_sai, rows, src,
                        iterations, residual, t0)


def load_adjoint_csv(scene, path, backend: Optional[str] = None) -> AdjointTable:
    """Rebuild the SAI tables from an adjoint dump. Refuses dumps whose
    segment centers differ from the scene mesh (e.g. solved at another h)."""
    mesh = scene.mesh
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    centers = np.array([[float(r["center_x"]), float(r["center_y"])] for r in rows]).reshape(-1, 2)
    if centers.shape[0] != mesh.n_segments or not np.allclose(centers, mesh.center, rtol=0, atol=1e-12):
        raise AdjointMismatch(
            f"adjoint dump has {centers.shape[0]} segments that do not match the scene mesh "
            f"({mesh.n_segments} segments, h = {mesh.h})")
    phi = np.array([float(r["phi"]) for r in rows])
    vis = visibility(scene, backend)
    alpha = scene.segment_albedo()
    A, rg = assemble(mesh, alpha, scene.detector.g0, vis)
    resid = float(np.max(np.abs(phi - A @ phi - rg)))
    return tables_from_phi(scene, phi, A, rg, vis, alpha, 0, resid, 0.0)


def ballistic_signal(table: AdjointTable) -> float:
    """Deterministic no-atmosphere prediction of P[D]: sum over source
    intervals of mass times importance where the source ray lands, in
    probability units."""
    return float(table.source.weight.sum() / table.g0)
