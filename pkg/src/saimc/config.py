"""Run configuration: INI file with [scene], [chain], [sweep] and [output] sections."""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, replace
from typing import Optional

from .geometry import DetectorPlacement
from .transport import Chain


class ConfigError(ValueError):
    pass


def _float(text: str) -> float:
    t = text.strip().lower()
    if t in ("inf", "infinity"):
        return math.inf
    try:
        return float(t)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def _int(text: str) -> int:
    try:
        v = float(text.strip())
    except ValueError:
        raise ConfigError(f"not an integer: {text!r}") from None
    if v != int(v):
        raise ConfigError(f"not an integer: {text!r}")
    return int(v)


def _list(text: Optional[str], conv) -> tuple:
    if text is None or not text.strip():
        return ()
    return tuple(conv(t) for t in text.replace(";", ",").split(",") if t.strip())


@dataclass(frozen=True)
class SceneConfig:
    profile: str = "cos3"
    h: float = 0.02
    mfp: float = 4.0
    albedo_variant: str = "oscillating"
    source_variant: str = "oscillating"
    detector_wall: str = "right"
    detector_center: float = 3.1
    detector_half_width: float = 0.1

    @property
    def detector(self) -> DetectorPlacement:
        return DetectorPlacement(self.detector_wall, self.detector_center, self.detector_half_width)


@dataclass(frozen=True)
class ChainConfig:
    chain: str = "regularized"
    q_s: float = 0.9
    q_v: float = 0.25
    n: int = 1_000_000
    master_seed: int = 0
    batches: int = 1
    threads: int = 1


@dataclass(frozen=True)
class SweepConfig:
    h: tuple = ()
    mfp: tuple = ()
    q_s: tuple = ()
    q_v: tuple = ()
    chains: tuple = ()
    m: tuple = ()
    eps_relative: float = 0.01
    calibration_c: Optional[float] = None
    calibration_h: tuple = (0.1, 0.05)


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    trace_cap: int = 0
    timing: bool = True


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def with_overrides(self, seed=None, threads=None, out=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, chain=replace(cfg.chain, master_seed=int(seed)))
        if threads is not None:
            cfg = replace(cfg, chain=replace(cfg.chain, threads=int(threads)))
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, directory=str(out)))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        s, c, w, o = self.scene, self.chain, self.sweep, self.output
        if s.profile not in ("flat", "cos3"):
            raise ConfigError(f"profile must be flat or cos3, got {s.profile!r}")
        if s.albedo_variant not in ("oscillating", "constant"):
            raise ConfigError(f"unknown albedo_variant {s.albedo_variant!r}")
        if s.source_variant not in ("oscillating", "flat"):
            raise ConfigError(f"unknown source_variant {s.source_variant!r}")
        if s.detector_wall not in ("right", "floor"):
            raise ConfigError(f"detector must be right or floor, got {s.detector_wall!r}")
        if not s.detector_half_width > 0:
            raise ConfigError("detector_half_width must be positive")
        for h in (s.h,) + w.h + w.calibration_h:
            if not 0 < h <= 1:
                raise ConfigError(f"h must lie in (0, 1], got {h}")
        for m in (s.mfp,) + w.mfp:
            if not m > 0:
                raise ConfigError(f"mfp must be positive, got {m}")
        try:
            Chain.parse(c.chain)
            for name in w.chains:
                Chain.parse(name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for q in (c.q_s, c.q_v) + w.q_s + w.q_v:
            if not 0 <= q <= 1:
                raise ConfigError(f"q_s and q_v must lie in [0, 1], got {q}")
        if Chain.parse(c.chain) == Chain.REGULARIZED and c.q_s == 0 and not math.isinf(s.mfp):
            raise ConfigError("q_s = 0 with an atmosphere is biased; use q_s > 0")
        if c.n < 2:
            raise ConfigError("n must be at least 2")
        if c.master_seed < 0 or c.master_seed >= 2**64:
            raise ConfigError("master_seed must be an unsigned 64-bit integer")
        if c.batches < 1 or c.threads < 1:
            raise ConfigError("batches and threads must be positive")
        for m in w.m:
            if not (m >= 1 or math.isinf(m)):
                raise ConfigError(f"m must be >= 1 or inf, got {m}")
        if not w.eps_relative > 0:
            raise ConfigError("eps_relative must be positive")
        if w.calibration_c is not None and w.calibration_c < 0:
            raise ConfigError("calibration_c must be nonnegative")
        if o.trace_cap < 0:
            raise ConfigError("trace_cap must be nonnegative")


_KNOWN = {
    "scene": {"profile", "h", "mfp", "albedo_variant", "source_variant", "detector",
              "detector_center", "detector_half_width"},
    "chain": {"chain", "q_s", "q_v", "n", "master_seed", "batches", "threads"},
    "sweep": {"h", "mfp", "q_s", "q_v", "chains", "m", "eps_relative", "calibration_c", "calibration_h"},
    "output": {"directory", "trace_cap", "timing"},
}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    for sec in cp.sections():
        if sec not in _KNOWN:
            raise ConfigError(f"unknown section [{sec}]")
        extra = set(cp[sec]) - _KNOWN[sec]
        if extra:
            raise ConfigError(f"unknown keys in [{sec}]: {sorted(extra)}")

    def get(sec, key, conv, default):
        if cp.has_option(sec, key):
            return conv(cp.get(sec, key))
        return default

    d = SceneConfig()
    scene = SceneConfig(
        profile=get("scene", "profile", str.strip, d.profile),
        h=get("scene", "h", _float, d.h),
        mfp=get("scene", "mfp", _float, d.mfp),
        albedo_variant=get("scene", "albedo_variant", str.strip, d.albedo_variant),
        source_variant=get("scene", "source_variant", str.strip, d.source_variant),
        detector_wall=get("scene", "detector", str.strip, d.detector_wall),
        detector_center=get("scene", "detector_center", _float, d.detector_center),
        detector_half_width=get("scene", "detector_half_width", _float, d.detector_half_width),
    )
    dc = ChainConfig()
    chain = ChainConfig(
        chain=get("chain", "chain", str.strip, dc.chain),
        q_s=get("chain", "q_s", _float, dc.q_s),
        q_v=get("chain", "q_v", _float, dc.q_v),
        n=get("chain", "n", _int, dc.n),
        master_seed=get("chain", "master_seed", _int, dc.master_seed),
        batches=get("chain", "batches", _int, dc.batches),
        threads=get("chain", "threads", _int, dc.threads),
    )
    ds = SweepConfig()
    sweep = SweepConfig(
        h=get("sweep", "h", lambda t: _list(t, _float), ds.h),
        mfp=get("sweep", "mfp", lambda t: _list(t, _float), ds.mfp),
        q_s=get("sweep", "q_s", lambda t: _list(t, _float), ds.q_s),
        q_v=get("sweep", "q_v", lambda t: _list(t, _float), ds.q_v),
        chains=get("sweep", "chains", lambda t: _list(t, str.strip), ds.chains),
        m=get("sweep", "m", lambda t: _list(t, _float), ds.m),
        eps_relative=get("sweep", "eps_relative", _float, ds.eps_relative),
        calibration_c=get("sweep", "calibration_c", _float, ds.calibration_c),
        calibration_h=get("sweep", "calibration_h", lambda t: _list(t, _float), ds.calibration_h),
    )
    do = OutputConfig()

    def boolean(t):
        t = t.strip().lower()
        if t in ("1", "true", "yes", "on"):
            return True
        if t in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {t!r}")

    output = OutputConfig(
        directory=get("output", "directory", str.strip, do.directory),
        trace_cap=get("output", "trace_cap", _int, do.trace_cap),
        timing=get("output", "timing", boolean, do.timing),
    )
    cfg = RunConfig(scene, chain, sweep, output)
    cfg.validate()
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
