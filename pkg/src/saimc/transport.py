"""Monte Carlo chains: analog, survival-biased, pure SAI, heuristic, regularized SAI.

The path loop lives in the kernel (compiled or pure Python, see ``_backend``).
This module packs scenes into flat kernel data, runs seeded blocks of paths
and turns kernel traces into ``Path`` objects.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import IntEnum
from types import SimpleNamespace
from typing import Optional

import numpy as np

from . import _backend
from .adjoint import AdjointMismatch
from .estimators import Tally

BLOCK_SIZE = 8192
WEIGHT_CUTOFF = 1e-12
MAX_PATH_LENGTH = 10_000
TRACE_CAP = 512


class Chain(IntEnum):
    ANALOG = 0
    SURVIVAL = 1
    SAI = 2
    HEURISTIC = 3
    REGULARIZED = 4

    @classmethod
    def parse(cls, name) -> "Chain":
        if isinstance(name, (Chain, int)):
            return cls(name)
        aliases = {"analog": cls.ANALOG, "sb": cls.SURVIVAL, "survival": cls.SURVIVAL,
                   "sai": cls.SAI, "heuristic": cls.HEURISTIC, "heu": cls.HEURISTIC,
                   "regularized": cls.REGULARIZED}
        try:
            return aliases[str(name).lower()]
        except KeyError:
            raise ValueError(f"unknown chain {name!r}") from None

    @property
    def label(self) -> str:
        return {0: "analog", 1: "sb", 2: "sai", 3: "heuristic", 4: "regularized"}[int(self)]

    @property
    def needs_adjoint(self) -> bool:
        return self in (Chain.SAI, Chain.REGULARIZED)


class Status(IntEnum):
    DETECTOR = 0
    ABSORBED = 1
    ESCAPED = 2
    CUTOFF = 3
    LENGTH_CAP = 4
    DEAD = 5
    LOST = 6


@dataclass(frozen=True)
class ChainParams:
    q_s: float = 1.0
    q_v: float = 1.0
    weight_cutoff: float = WEIGHT_CUTOFF
    max_length: int = MAX_PATH_LENGTH

    def __post_init__(self):
        if not (0.0 <= self.q_s <= 1.0 and 0.0 <= self.q_v <= 1.0):
            raise ValueError("q_s and q_v must lie in [0, 1]")
        if not self.weight_cutoff > 0:
            raise ValueError("weight cutoff must be positive")
        if self.max_length < 1:
            raise ValueError("max path length must be positive")


@dataclass(frozen=True)
class PathVertex:
    position: np.ndarray
    kind: str  # "source", "volume" or "boundary"
    segment: int = -1


@dataclass(frozen=True)
class Path:
    vertices: list
    weight: float
    status: Status
    chain: Chain
    branch: Chain
    generating_density: float = float("nan")
    truncated: bool = False

    @property
    def directions(self):
        out = []
        for a, b in zip(self.vertices[:-1], self.vertices[1:]):
            d = b.position - a.position
            out.append(d / math.hypot(d[0], d[1]))
        return out

    @property
    def n_volume(self) -> int:
        return sum(v.kind == "volume" for v in self.vertices)


def kernel_data(scene, adjoint=None, params: ChainParams = ChainParams()) -> SimpleNamespace:
    """Flatten a scene (and optionally its adjoint tables) into plain arrays."""
    mesh = scene.mesh
    if adjoint is not None and adjoint.mesh is not mesh:
        if adjoint.mesh.n_segments != mesh.n_segments or not np.array_equal(adjoint.mesh.a, mesh.a):
            raise AdjointMismatch("adjoint was solved on a different mesh")
    grid = scene.grid
    base, amp = scene.albedo.segment_coeffs(mesh)
    det = scene.detector
    fld = scene.field
    src = scene.source
    kd = SimpleNamespace(
        n_seg=mesh.n_segments,
        ax=mesh.a[:, 0], ay=mesh.a[:, 1], bx=mesh.b[:, 0], by=mesh.b[:, 1],
        nx=mesh.inward[:, 0], ny=mesh.inward[:, 1], tx=mesh.tangent[:, 0], ty=mesh.tangent[:, 1],
        seglen=mesh.length, tag=mesh.tags.astype(np.int32),
        g_x0=grid.x0, g_y0=grid.y0, g_cell=grid.cell, g_nx=grid.nx, g_ny=grid.ny,
        g_start=grid.start, g_items=grid.items,
        alb_base=base, alb_amp=amp, alb_period=float(scene.albedo.period),
        sig_a=float(fld.absorption), sig_s=float(fld.scattering), f_amp=float(fld.amplitude),
        f_period=float(fld.period), f_axis=int(fld.axis),
        src_x0=float(src.x_lo), src_x1=float(src.x_hi), src_amp=float(src.amplitude),
        src_period=float(src.period), src_norm=float(src.normalization), src_y=float(src.y),
        det_ax=float(det.a[0]), det_ay=float(det.a[1]), det_bx=float(det.b[0]), det_by=float(det.b[1]),
        det_mx=float(det.midpoint[0]), det_my=float(det.midpoint[1]),
        cutoff=float(params.weight_cutoff), max_len=int(params.max_length),
    )
    if adjoint is None:
        empty = np.zeros(0)
        kd.ss_x0 = kd.ss_x1 = kd.ss_mass = kd.ss_pmf = kd.ss_cdf = empty
        kd.row_start = np.zeros(mesh.n_segments + 1, dtype=np.int32)
        kd.row_target = np.zeros(0, dtype=np.int32)
        kd.row_pmf = kd.row_cdf = empty
    else:
        s = adjoint.source
        kd.ss_x0, kd.ss_x1, kd.ss_mass, kd.ss_pmf, kd.ss_cdf = s.x0, s.x1, s.mass, s.pmf, s.cdf
        r = adjoint.rows
        kd.row_start, kd.row_target, kd.row_pmf, kd.row_cdf = r.start, r.target, r.pmf, r.cdf
    return kd


def make_kernel(scene, adjoint=None, params: ChainParams = ChainParams(), backend: Optional[str] = None):
    return _backend.kernel_class(backend)(kernel_data(scene, adjoint, params))


def block_generator(master_seed: int, block: int) -> np.random.PCG64:
    """Independent stream for one block of paths."""
    return np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=(int(block),)))


@dataclass
class BlockResult:
    weights: np.ndarray
    status: np.ndarray
    branch: np.ndarray


def run_block(kernel, chain: Chain, params: ChainParams, master_seed: int, block: int, n: int) -> BlockResult:
    w = np.zeros(n)
    st = np.zeros(n, dtype=np.int8)
    br = np.zeros(n, dtype=np.int8)
    kernel.run(int(chain), float(params.q_s), float(params.q_v), block_generator(master_seed, block),
               n, w, st, br)
    return BlockResult(w, st, br)


def _check_chain(chain: Chain, adjoint, params: ChainParams):
    if chain.needs_adjoint and adjoint is None:
        raise ValueError(f"chain {chain.label!r} needs an adjoint table")


def simulate(scene, chain, n: int, master_seed: int = 0, adjoint=None,
             params: ChainParams = ChainParams(), threads: int = 1, batches: Optional[int] = None,
             backend: Optional[str] = None, kernel=None) -> Tally:
    """Run ``n`` paths. Paths are cut into fixed blocks of BLOCK_SIZE, each
    with its own stream derived from (master_seed, block index); ``threads``
    and ``batches`` only decide how blocks are scheduled, so the tally is
    bit-identical for any choice of them."""
    chain = Chain.parse(chain)
    _check_chain(chain, adjoint, params)
    if n < 1:
        raise ValueError("need at least one path")
    kern = kernel if kernel is not None else make_kernel(scene, adjoint, params, backend)
    n_blocks = (n + BLOCK_SIZE - 1) // BLOCK_SIZE
    sizes = [min(BLOCK_SIZE, n - b * BLOCK_SIZE) for b in range(n_blocks)]
    n_groups = max(1, min(batches or threads, n_blocks))
    groups = [list(range(g, n_blocks, n_groups)) for g in range(n_groups)]

    def work(blocks):
        return [(b, Tally.from_weights(run_block(kern, chain, params, master_seed, b, sizes[b])))
                for b in blocks]

    if threads > 1 and n_groups > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = [p for res in pool.map(work, groups) for p in res]
    else:
        parts = [p for g in groups for p in work(g)]
    total = Tally()
    for _, t in sorted(parts, key=lambda p: p[0]):
        total = total.merge(t)
    return total


def simulate_weights(scene, chain, n: int, master_seed: int = 0, adjoint=None,
                     params: ChainParams = ChainParams(), backend: Optional[str] = None,
                     kernel=None) -> BlockResult:
    """Per-path weights, statuses and branches (block order)."""
    chain = Chain.parse(chain)
    _check_chain(chain, adjoint, params)
    kern = kernel if kernel is not None else make_kernel(scene, adjoint, params, backend)
    out = []
    for b in range((n + BLOCK_SIZE - 1) // BLOCK_SIZE):
        out.append(run_block(kern, chain, params, master_seed, b, min(BLOCK_SIZE, n - b * BLOCK_SIZE)))
    return BlockResult(*(np.concatenate([getattr(r, f) for r in out]) for f in ("weights", "status", "branch")))


def trace_paths(scene, chain, rng, count: int = 1, adjoint=None, params: ChainParams = ChainParams(),
                backend: Optional[str] = None, kernel=None, cap: int = TRACE_CAP) -> list:
    """Generate ``count`` paths with full vertex lists from ``rng`` (a numpy
    Generator or BitGenerator)."""
    chain = Chain.parse(chain)
    _check_chain(chain, adjoint, params)
    kern = kernel if kernel is not None else make_kernel(scene, adjoint, params, backend)
    bitgen = rng.bit_generator if isinstance(rng, np.random.Generator) else rng
    w = np.zeros(count)
    st = np.zeros(count, dtype=np.int8)
    br = np.zeros(count, dtype=np.int8)
    trace = np.zeros((count, cap, 3))
    tlen = np.zeros(count, dtype=np.int64)
    tdg = np.zeros(count)
    kern.run(int(chain), float(params.q_s), float(params.q_v), bitgen, count, w, st, br, trace, tlen, tdg)
    paths = []
    for i in range(count):
        verts = []
        for x, y, s in trace[i, : min(int(tlen[i]), cap)]:
            kind = "source" if s == -2 else ("volume" if s == -1 else "boundary")
            verts.append(PathVertex(np.array([x, y]), kind, int(s) if s >= 0 else -1))
        paths.append(Path(verts, float(w[i]), Status(int(st[i])), chain, Chain(int(br[i])),
                          float(tdg[i]), truncated=bool(tlen[i] >= cap)))
    return paths


def run_analog(scene, rng, **kw) -> Path:
    return trace_paths(scene, Chain.ANALOG, rng, **kw)[0]


def run_survival_biased(scene, rng, **kw) -> Path:
    return trace_paths(scene, Chain.SURVIVAL, rng, **kw)[0]


def run_pure_sai(scene, adjoint, rng, **kw) -> Path:
    return trace_paths(scene, Chain.SAI, rng, adjoint=adjoint, **kw)[0]


def run_heuristic(scene, q_v: float, rng, **kw) -> Path:
    return trace_paths(scene, Chain.HEURISTIC, rng, params=ChainParams(q_v=q_v), **kw)[0]


def run_regularized_sai(scene, adjoint, params: ChainParams, rng, **kw) -> Path:
    return trace_paths(scene, Chain.REGULARIZED, rng, adjoint=adjoint, params=params, **kw)[0]
