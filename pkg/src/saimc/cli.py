"""Command-line front end: solve-adjoint, run, sweep, calibrate."""

from __future__ import annotations

import argparse
import csv
import itertools
import math
import os
import sys
import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import _backend
from .adjoint import AdjointMismatch, AllZeroSource, NonConvergence, ballistic_signal, load_adjoint_csv, solve_adjoint
from .config import ConfigError, RunConfig, load_config
from .estimators import FomReport, deterministic_error, fit_solve_constant, loglog_slope, speedup, write_reports
from .scene import build_scene
from .transport import BLOCK_SIZE, Chain, ChainParams, block_generator, make_kernel, simulate, trace_paths

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3


def _fmt(x) -> str:
    return f"{x:g}" if isinstance(x, float) else str(x)


def _scene(cfg: RunConfig, h: Optional[float] = None, mfp: Optional[float] = None):
    s = cfg.scene
    return build_scene(s.profile, s.h if h is None else h, s.mfp if mfp is None else mfp,
                       s.albedo_variant, s.source_variant, s.detector)


def _write_config(cfg: RunConfig, path: str) -> None:
    """Record the resolved configuration next to the results."""
    with open(path, "w") as fh:
        for name, block in (("scene", cfg.scene), ("chain", cfg.chain), ("sweep", cfg.sweep),
                            ("output", cfg.output)):
            fh.write(f"[{name}]\n")
            for k, v in asdict(block).items():
                if name == "scene" and k == "detector_wall":
                    k = "detector"
                if v is None:
                    continue
                if isinstance(v, tuple):
                    v = ", ".join(_fmt(x) for x in v)
                fh.write(f"{k} = {_fmt(v)}\n")
            fh.write("\n")


def calibrate_constant(cfg: RunConfig) -> tuple:
    """Fit T0 = C h^-2 from adjoint solves at the calibration step sizes."""
    hs = cfg.sweep.calibration_h
    t0s = [solve_adjoint(_scene(cfg, h=h)).t0_sec for h in hs]
    return fit_solve_constant(hs, t0s), hs, t0s


# -- commands ---------------------------------------------------------------

def cmd_solve_adjoint(cfg: RunConfig) -> int:
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    scene = _scene(cfg)
    table = solve_adjoint(scene)
    scene.mesh.to_csv(os.path.join(out, "mesh.csv"))
    table.to_csv(os.path.join(out, "adjoint.csv"))
    with open(os.path.join(out, "adjoint_timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "n_segments", "iterations", "residual", "T0_sec", "ballistic"])
        t0 = table.t0_sec if cfg.output.timing else 0.0
        w.writerow([repr(scene.h), scene.mesh.n_segments, table.iterations, repr(table.residual),
                    repr(t0), repr(ballistic_signal(table))])
    _write_config(cfg, os.path.join(out, "config_used.ini"))
    print(f"adjoint: {scene.mesh.n_segments} segments, {table.iterations} iterations, "
          f"residual {table.residual:.3e}, T0 {table.t0_sec:.3f} s")
    return EXIT_OK


@dataclass
class _Point:
    report: FomReport
    needs_adjoint: bool


class _Runner:
    """Runs chains at (h, mfp) points, reusing scenes, adjoints and results."""

    def __init__(self, cfg: RunConfig, adjoint_path: Optional[str] = None):
        self.cfg = cfg
        self.adjoint_path = adjoint_path
        self._scenes = {}
        self._adjoints = {}
        self._results = {}

    def scene(self, h, mfp):
        key = (h, mfp)
        if key not in self._scenes:
            self._scenes[key] = _scene(self.cfg, h, mfp)
        return self._scenes[key]

    def adjoint(self, h, mfp):
        # the adjoint only depends on the boundary, so one solve serves every mfp
        if h not in self._adjoints:
            scene = self.scene(h, mfp)
            if self.adjoint_path:
                self._adjoints[h] = load_adjoint_csv(scene, self.adjoint_path)
            else:
                self._adjoints[h] = solve_adjoint(scene)
        return self._adjoints[h]

    def result(self, chain: Chain, h, mfp, q_s, q_v) -> _Point:
        q_s = q_s if chain == Chain.REGULARIZED else 1.0
        q_v = q_v if chain in (Chain.HEURISTIC, Chain.REGULARIZED) else 1.0
        key = (chain, h, mfp, q_s, q_v)
        if key in self._results:
            return self._results[key]
        c = self.cfg.chain
        scene = self.scene(h, mfp)
        adj = self.adjoint(h, mfp) if chain.needs_adjoint else None
        params = ChainParams(q_s=q_s, q_v=q_v)
        kern = make_kernel(scene, adj, params)
        start = time.perf_counter()
        tally = simulate(scene, chain, c.n, c.master_seed, adj, params, threads=c.threads,
                         batches=c.batches, kernel=kern)
        wall = time.perf_counter() - start
        t0 = adj.t0_sec if adj is not None else 0.0
        if not self.cfg.output.timing:
            wall, t0 = 0.0, 0.0
        rep = FomReport.from_tally(chain.label, tally, wall, h, mfp, q_s, q_v, t0)
        point = _Point(rep, chain.needs_adjoint)
        self._results[key] = point
        return point

    def traces(self, chain: Chain, h, mfp, q_s, q_v, path: str) -> None:
        """Dump the first ``trace_cap`` paths of the run (same streams)."""
        cap = self.cfg.output.trace_cap
        scene = self.scene(h, mfp)
        adj = self.adjoint(h, mfp) if chain.needs_adjoint else None
        params = ChainParams(q_s=q_s, q_v=q_v)
        kern = make_kernel(scene, adj, params)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "vertex", "x", "y", "kind", "segment", "weight", "status"])
            done = 0
            block = 0
            while done < min(cap, self.cfg.chain.n):
                count = min(BLOCK_SIZE, cap - done, self.cfg.chain.n - done)
                paths = trace_paths(scene, chain, block_generator(self.cfg.chain.master_seed, block),
                                    count, adj, params, kernel=kern)
                for k, p in enumerate(paths):
                    for v_i, v in enumerate(p.vertices):
                        w.writerow([done + k, v_i, repr(float(v.position[0])), repr(float(v.position[1])),
                                    v.kind, v.segment, repr(p.weight), p.status.name.lower()])
                done += count
                block += 1

    def finish(self, point: _Point, m: float, eps_rel: float, c_const: Optional[float]) -> FomReport:
        """Copy of the report with m and the speedup against survival biasing."""
        rep = point.report
        out = FomReport(**{**rep.__dict__, "m": m})
        if not self.cfg.output.timing:
            out.speedup = math.nan
            return out
        sb = self.result(Chain.SURVIVAL, rep.h, rep.mfp_over_diam, 1.0, 1.0).report
        eps = eps_rel * abs(sb.mean)
        c = (c_const or 0.0) if point.needs_adjoint else 0.0
        if not math.isinf(m) and eps == 0.0:
            out.speedup = math.nan
        else:
            out.speedup = speedup(sb, rep, eps, m, c)
        return out


def _constant_if_needed(cfg: RunConfig, ms, chains) -> Optional[float]:
    if not cfg.output.timing:
        return None
    if all(math.isinf(m) for m in ms) or not any(ch.needs_adjoint for ch in chains):
        return None
    if cfg.sweep.calibration_c is not None:
        return cfg.sweep.calibration_c
    c, _, _ = calibrate_constant(cfg)
    return c


def cmd_run(cfg: RunConfig, adjoint_path: Optional[str] = None) -> int:
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    chain = Chain.parse(cfg.chain.chain)
    if adjoint_path and not chain.needs_adjoint:
        raise ConfigError(f"chain {chain.label!r} does not use an adjoint table")
    s, c = cfg.scene, cfg.chain
    m = cfg.sweep.m[0] if cfg.sweep.m else math.inf
    runner = _Runner(cfg, adjoint_path)
    point = runner.result(chain, s.h, s.mfp, c.q_s, c.q_v)
    rep = runner.finish(point, m, cfg.sweep.eps_relative, _constant_if_needed(cfg, (m,), (chain,)))
    write_reports(os.path.join(out, "run.csv"), [rep])
    if cfg.output.trace_cap > 0:
        runner.traces(chain, s.h, s.mfp, c.q_s, c.q_v, os.path.join(out, "traces.csv"))
    _write_config(cfg, os.path.join(out, "config_used.ini"))
    print(f"{rep.chain}: mean {rep.mean:.6e} variance {rep.variance:.4e} rms {rep.rms:.3e}")
    return EXIT_OK


def _nan_report(chain, h, mfp, q_s, q_v, n, m) -> FomReport:
    nan = math.nan
    return FomReport(chain, h, mfp, q_s, q_v, n, nan, nan, nan, nan, nan, m, nan)


def _write_xy(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for x, y in rows:
            fh.write(f"{x!r} {y!r}\n")


def cmd_sweep(cfg: RunConfig) -> int:
    out = cfg.output.directory
    plots = os.path.join(out, "plots")
    os.makedirs(plots, exist_ok=True)
    s, c, w = cfg.scene, cfg.chain, cfg.sweep
    hs = w.h or (s.h,)
    mfps = w.mfp or (s.mfp,)
    qss = w.q_s or (c.q_s,)
    qvs = w.q_v or (c.q_v,)
    ms = w.m or (math.inf,)
    chains = [Chain.parse(x) for x in (w.chains or (c.chain,))]
    runner = _Runner(cfg)
    failures = []
    try:
        c_const = _constant_if_needed(cfg, ms, chains)
    except (NonConvergence, AllZeroSource) as exc:
        failures.append(f"calibration: {exc}")
        c_const = None

    reports = []
    for chain, h, mfp, q_s, q_v, m in itertools.product(chains, hs, mfps, qss, qvs, ms):
        try:
            point = runner.result(chain, h, mfp, q_s, q_v)
            rep = runner.finish(point, m, w.eps_relative, c_const)
            rep = FomReport(**{**rep.__dict__, "q_s": q_s, "q_v": q_v})
        except (NonConvergence, AllZeroSource, ValueError, FloatingPointError) as exc:
            failures.append(f"{chain.label} h={h} mfp={mfp} q_s={q_s} q_v={q_v} m={m}: {exc}")
            rep = _nan_report(chain.label, h, mfp, q_s, q_v, c.n, m)
        reports.append(rep)
    write_reports(os.path.join(out, "sweep.csv"), reports)
    _write_config(cfg, os.path.join(out, "config_used.ini"))
    _plot_data(runner, reports, plots, chains, hs, mfps, qss, qvs, ms)
    if failures:
        with open(os.path.join(out, "failures.txt"), "w") as fh:
            fh.write("\n".join(failures) + "\n")
        for f in failures:
            print(f"failed: {f}", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"sweep: {len(reports)} rows written to {os.path.join(out, 'sweep.csv')}")
    return EXIT_OK


def _plot_data(runner, reports, plots, chains, hs, mfps, qss, qvs, ms) -> None:
    first_m = ms[0]
    rows = [r for r in reports if r.m == first_m]
    slopes = []
    # variance against h, one curve per (chain, mfp, q_s, q_v)
    for chain, mfp, q_s, q_v in itertools.product(chains, mfps, qss, qvs):
        pts = sorted((r.h, r.variance) for r in rows
                     if r.chain == chain.label and r.mfp_over_diam == mfp and r.q_s == q_s and r.q_v == q_v
                     and np.isfinite(r.variance))
        name = f"var_vs_h_{chain.label}_mfp{_fmt(mfp)}_qs{_fmt(q_s)}_qv{_fmt(q_v)}.dat"
        _write_xy(os.path.join(plots, name), "h variance", pts)
        good = [(x, y) for x, y in pts if y > 0]
        if len(good) >= 2:
            slopes.append((chain.label, mfp, q_s, q_v, loglog_slope(*zip(*good))))
    with open(os.path.join(plots, "var_vs_h_slopes.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["chain", "mfp_over_diam", "q_s", "q_v", "slope"])
        for row in slopes:
            wr.writerow([row[0]] + [repr(float(x)) for x in row[1:]])

    # deterministic error against h: ballistic prediction vs the lowest-error unbiased estimate
    for mfp in mfps:
        pts = []
        for h in hs:
            if h not in runner._adjoints:
                continue
            cands = [r for r in rows if r.h == h and r.mfp_over_diam == mfp and r.chain != "sai"
                     and np.isfinite(r.rms) and r.mean > 0]
            if not cands:
                continue
            best = min(cands, key=lambda r: r.rms)
            pts.append((h, deterministic_error(best.mean, ballistic_signal(runner._adjoints[h]))))
        _write_xy(os.path.join(plots, f"deterr_vs_h_mfp{_fmt(mfp)}.dat"), "h deterministic_error", sorted(pts))

    # speedup against q_s, one curve per (chain, mfp, h, m, q_v)
    for chain, mfp, h, m, q_v in itertools.product(chains, mfps, hs, ms, qvs):
        if chain == Chain.SURVIVAL:
            continue
        pts = sorted((r.q_s, r.speedup) for r in reports
                     if r.chain == chain.label and r.mfp_over_diam == mfp and r.h == h and r.m == m
                     and r.q_v == q_v)
        name = f"speedup_{chain.label}_mfp{_fmt(mfp)}_h{_fmt(h)}_m{_fmt(m)}_qv{_fmt(q_v)}.dat"
        _write_xy(os.path.join(plots, name), "q_s speedup", pts)


def cmd_calibrate(cfg: RunConfig) -> int:
    out = cfg.output.directory
    os.makedirs(out, exist_ok=True)
    c, hs, t0s = calibrate_constant(cfg)
    with open(os.path.join(out, "calibration.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h", "T0_sec"])
        for h, t in zip(hs, t0s):
            w.writerow([repr(h), repr(t)])
        w.writerow(["C", repr(c)])
    print(f"C = {c:.6g} s (T0 = C h^-2 over h = {', '.join(_fmt(h) for h in hs)})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saimc", description="Surface-adjoint importance sampling Monte Carlo.")
    p.add_argument("--backend-info", action="store_true", help="print the active transport kernel and exit")
    sub = p.add_subparsers(dest="command")
    for name, help_ in (("solve-adjoint", "solve the surface adjoint and dump it"),
                        ("run", "run one chain at one parameter point"),
                        ("sweep", "Cartesian sweep over the configured lists"),
                        ("calibrate", "measure C in T0 = C h^-2")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--threads", type=int, help="worker threads")
        if name == "run":
            sp.add_argument("--adjoint", help="reuse an adjoint dump instead of solving")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.backend_info:
        print(f"backend: {_backend.BACKEND} (available: {', '.join(sorted(_backend.available))})")
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config).with_overrides(args.seed, args.threads, args.out)
        if args.command == "solve-adjoint":
            return cmd_solve_adjoint(cfg)
        if args.command == "run":
            return cmd_run(cfg, args.adjoint)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        return cmd_calibrate(cfg)
    except (ConfigError, AdjointMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence, AllZeroSource, AssertionError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
