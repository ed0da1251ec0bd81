"""Tallies, variance statistics and the speedup figure of merit.

Sums of weights are kept as exact integers (every double is an integer
multiple of 2**-1074), so merging tallies is associative and commutative
bit-for-bit and the result never depends on how paths were batched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Optional

import numpy as np

SCALE_BITS = 1074 + 64
_DETECTED, _CUTOFF, _LENGTHCAP, _DEAD, _LOST = 0, 3, 4, 5, 6


def exact_sum(values: np.ndarray) -> int:
    """Exact sum of doubles as an integer in units of 2**-SCALE_BITS."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite weight")
    mant, expo = np.frexp(v)
    m = np.ldexp(mant, 53).astype(np.int64)  # exact: |m| < 2**53
    hi = m >> 26
    lo = m - (hi << 26)
    total = 0
    for e in np.unique(expo[m != 0]):
        sel = expo == e
        # partial sums stay below 2**53 for fewer than 2**26 terms per exponent
        s_hi = int(hi[sel].sum())
        s_lo = int(lo[sel].sum())
        shift = int(e) - 53 + SCALE_BITS
        total += ((s_hi << 26) + s_lo) << shift
    return total


def exact_square_sum(values: np.ndarray) -> int:
    """Exact sum of squares: each w*w is split into its rounded product and
    the rounding error (Dekker), both summed exactly. Exact for
    2**-480 < |w| < 2**480."""
    v = np.asarray(values, dtype=np.float64).ravel()
    p = v * v
    c = 134217729.0 * v  # 2**27 + 1
    hi = c - (c - v)
    lo = v - hi
    err = ((hi * hi - p) + 2.0 * hi * lo) + lo * lo
    return exact_sum(p) + exact_sum(err)


def _to_fraction(fixed: int) -> Fraction:
    return Fraction(fixed, 1 << SCALE_BITS)


@dataclass(frozen=True)
class Tally:
    n: int = 0
    sum_w: int = 0
    sum_w2: int = 0
    hits: int = 0
    cutoff: int = 0
    length_cap: int = 0
    dead: int = 0
    lost: int = 0
    lost_weight: int = 0

    @classmethod
    def from_weights(cls, block) -> "Tally":
        """Tally of one block of kernel output (weights, status arrays)."""
        w = np.asarray(block.weights, dtype=np.float64)
        st = np.asarray(block.status)
        hit = st == _DETECTED
        counted = np.where(hit, w, 0.0)
        truncated = (st == _CUTOFF) | (st == _LENGTHCAP)
        return cls(
            n=int(w.size),
            sum_w=exact_sum(counted),
            sum_w2=exact_square_sum(counted),
            hits=int(hit.sum()),
            cutoff=int((st == _CUTOFF).sum()),
            length_cap=int((st == _LENGTHCAP).sum()),
            dead=int((st == _DEAD).sum()),
            lost=int((st == _LOST).sum()),
            lost_weight=exact_sum(np.where(truncated, w, 0.0)),
        )

    @classmethod
    def from_array(cls, weights) -> "Tally":
        w = np.asarray(weights, dtype=np.float64)
        return cls(n=int(w.size), sum_w=exact_sum(w), sum_w2=exact_square_sum(w), hits=int((w != 0).sum()))

    def merge(self, other: "Tally") -> "Tally":
        return Tally(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(Tally)))

    @property
    def total_weight(self) -> float:
        return float(_to_fraction(self.sum_w))

    @property
    def truncated_weight(self) -> float:
        return float(_to_fraction(self.lost_weight))

    def key(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(Tally))


def tally_merge(a: Tally, b: Tally) -> Tally:
    return a.merge(b)


@dataclass(frozen=True)
class Estimate:
    mean: float
    variance: float
    rms: float
    n: int


def estimate(tally: Tally) -> Estimate:
    """Mean, unbiased sample variance and RMS error of the mean."""
    if tally.n < 2:
        raise ValueError("variance needs at least two draws")
    n = tally.n
    s1 = _to_fraction(tally.sum_w)
    s2 = _to_fraction(tally.sum_w2)
    mean = s1 / n
    var = (s2 - s1 * s1 / n) / (n - 1)
    if var < 0:
        var = Fraction(0)
    v = float(var)
    return Estimate(float(mean), v, math.sqrt(v / n), n)


def combined_se(a: Estimate, b: Estimate) -> float:
    return math.sqrt(a.rms**2 + b.rms**2)


def required_draws(variance: float, eps: float) -> float:
    """Draws needed for RMS error eps."""
    return variance / (eps * eps)


FOM_COLUMNS = ["chain", "h", "mfp_over_diam", "q_s", "q_v", "N", "mean", "variance", "rms",
               "tau_sec", "T0_sec", "m", "speedup"]


@dataclass
class FomReport:
    chain: str
    h: float
    mfp_over_diam: float
    q_s: float
    q_v: float
    n: int
    mean: float
    variance: float
    rms: float
    tau_sec: float
    t0_sec: float = 0.0
    m: float = math.inf
    speedup: float = math.nan

    @classmethod
    def from_tally(cls, chain: str, tally: Tally, wall_sec: float, h: float, mfp_over_diam: float,
                   q_s: float = 1.0, q_v: float = 1.0, t0_sec: float = 0.0) -> "FomReport":
        est = estimate(tally)
        return cls(chain, h, mfp_over_diam, q_s, q_v, tally.n, est.mean, est.variance, est.rms,
                   wall_sec / tally.n, t0_sec)

    def row(self) -> list:
        def fmt(x):
            if isinstance(x, str):
                return x
            if isinstance(x, (int, np.integer)):
                return str(int(x))
            return repr(float(x))

        return [fmt(v) for v in (self.chain, self.h, self.mfp_over_diam, self.q_s, self.q_v, self.n,
                                 self.mean, self.variance, self.rms, self.tau_sec, self.t0_sec,
                                 self.m, self.speedup)]


def write_reports(path, reports, extra_columns: Optional[dict] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FOM_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def speedup(report_sb: FomReport, report_q: FomReport, eps: float, m: float, c: float = 0.0,
            h: Optional[float] = None) -> float:
    """m tau_sb Var_sb / ((eps/h)^2 C + m tau_q Var_q); m = inf drops the
    deterministic-solve term. Returns +inf when the denominator vanishes."""
    h = report_q.h if h is None else h
    num_rate = report_sb.tau_sec * report_sb.variance
    den_rate = report_q.tau_sec * report_q.variance
    if math.isinf(m):
        if den_rate == 0.0:
            return math.inf
        return num_rate / den_rate
    den = (eps / h) ** 2 * c + m * den_rate
    if den == 0.0:
        return math.inf
    return m * num_rate / den


def fit_solve_constant(h_values, t0_values) -> float:
    """C in T0 = C h^-2, least squares over the calibration points."""
    h = np.asarray(h_values, float)
    t = np.asarray(t0_values, float)
    x = h**-2.0
    return float((x * t).sum() / (x * x).sum())


def deterministic_error(mc_estimate: float, ballistic: float) -> float:
    if mc_estimate == 0:
        raise ValueError("relative error undefined for a zero estimate")
    return abs(mc_estimate - ballistic) / abs(mc_estimate)


def loglog_slope(x, y) -> float:
    lx = np.log(np.asarray(x, float))
    ly = np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])
