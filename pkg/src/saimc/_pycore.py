"""Pure-Python transport kernel.

Line-for-line mirror of ``_core.pyx``: same grid traversal, same expression
order and the same sequence of uniform draws, so both backends produce
bit-identical weights for a given bit generator. Only ``math`` is used (it
wraps the same libm the compiled core links against).
"""

from __future__ import annotations

import math

import numpy as np

ANALOG, SURVIVAL, SAI, HEURISTIC, REGULARIZED = 0, 1, 2, 3, 4
DETECTED, ABSORBED, ESCAPED, CUTOFF, LENGTHCAP, DEAD, LOST = 0, 1, 2, 3, 4, 5, 6
TAG_MOUNTAIN, TAG_SIDE, TAG_SKY, TAG_DETECTOR = 0, 1, 2, 3

T_MIN = 1e-10
GRAZE_EPS = 1e-12
S_TOL = 1e-12
TWO_PI = 2.0 * math.pi
INV_RAYLEIGH_NORM = 1.0 / (3.0 * math.pi)
VERTEX_SOURCE = -2.0
VERTEX_VOLUME = -1.0


class Kernel:
    """Holds the flattened scene and adjoint tables; runs batches of paths."""

    def __init__(self, kd):
        self.n_seg = int(kd.n_seg)
        for name in ("ax", "ay", "bx", "by", "nx", "ny", "tx", "ty", "seglen",
                     "alb_base", "alb_amp", "ss_x0", "ss_x1", "ss_mass", "ss_pmf", "ss_cdf",
                     "row_pmf", "row_cdf"):
            setattr(self, name, [float(v) for v in getattr(kd, name)])
        for name in ("tag", "g_start", "g_items", "row_start", "row_target"):
            setattr(self, name, [int(v) for v in getattr(kd, name)])
        for name in ("g_x0", "g_y0", "g_cell", "alb_period", "sig_a", "sig_s", "f_amp", "f_period",
                     "src_x0", "src_x1", "src_amp", "src_period", "src_norm", "src_y",
                     "det_ax", "det_ay", "det_bx", "det_by", "det_mx", "det_my", "cutoff"):
            setattr(self, name, float(getattr(kd, name)))
        for name in ("g_nx", "g_ny", "f_axis", "max_len"):
            setattr(self, name, int(getattr(kd, name)))
        self.sig_t = self.sig_a + self.sig_s
        self.n_ss = len(self.ss_x0)

    # ------------------------------------------------------------ geometry

    def cast(self, ox, oy, dx, dy, skip):
        """Nearest segment hit along the ray: returns (t, segment) or (inf, -1)."""
        x0 = self.g_x0
        y0 = self.g_y0
        cell = self.g_cell
        gnx = self.g_nx
        gny = self.g_ny
        ix = int(math.floor((ox - x0) / cell))
        iy = int(math.floor((oy - y0) / cell))
        if ix < 0:
            ix = 0
        if ix > gnx - 1:
            ix = gnx - 1
        if iy < 0:
            iy = 0
        if iy > gny - 1:
            iy = gny - 1
        if dx > 0.0:
            stepx = 1
            tmaxx = (x0 + (ix + 1) * cell - ox) / dx
            tdx = cell / dx
        elif dx < 0.0:
            stepx = -1
            tmaxx = (x0 + ix * cell - ox) / dx
            tdx = -cell / dx
        else:
            stepx = 0
            tmaxx = math.inf
            tdx = math.inf
        if dy > 0.0:
            stepy = 1
            tmaxy = (y0 + (iy + 1) * cell - oy) / dy
            tdy = cell / dy
        elif dy < 0.0:
            stepy = -1
            tmaxy = (y0 + iy * cell - oy) / dy
            tdy = -cell / dy
        else:
            stepy = 0
            tmaxy = math.inf
            tdy = math.inf
        ax, ay, bx, by, seglen = self.ax, self.ay, self.bx, self.by, self.seglen
        start, items = self.g_start, self.g_items
        best_t = math.inf
        best = -1
        while True:
            c = iy * gnx + ix
            for m in range(start[c], start[c + 1]):
                k = items[m]
                if k == skip:
                    continue
                ex = bx[k] - ax[k]
                ey = by[k] - ay[k]
                den = dx * ey - dy * ex
                if math.fabs(den) <= GRAZE_EPS * seglen[k]:
                    continue
                wx = ax[k] - ox
                wy = ay[k] - oy
                t = (wx * ey - wy * ex) / den
                if t <= T_MIN or t >= best_t:
                    continue
                s = (wx * dy - wy * dx) / den
                if s < -S_TOL or s > 1.0 + S_TOL:
                    continue
                best_t = t
                best = k
            if tmaxx < tmaxy:
                t_exit = tmaxx
            else:
                t_exit = tmaxy
            if best >= 0 and best_t <= t_exit:
                break
            if tmaxx < tmaxy:
                ix += stepx
                if ix < 0 or ix >= gnx:
                    break
                tmaxx += tdx
            else:
                iy += stepy
                if iy < 0 or iy >= gny:
                    break
                tmaxy += tdy
        return best_t, best

    def visibility(self):
        """Midpoint-to-midpoint visibility for all segment pairs."""
        n = self.n_seg
        vis = np.zeros((n, n), dtype=np.uint8)
        ax, ay, bx, by, nx, ny = self.ax, self.ay, self.bx, self.by, self.nx, self.ny
        for i in range(n):
            cix = 0.5 * (ax[i] + bx[i])
            ciy = 0.5 * (ay[i] + by[i])
            for j in range(i + 1, n):
                cjx = 0.5 * (ax[j] + bx[j])
                cjy = 0.5 * (ay[j] + by[j])
                ddx = cjx - cix
                ddy = cjy - ciy
                if nx[i] * ddx + ny[i] * ddy <= 0.0 or nx[j] * ddx + ny[j] * ddy >= 0.0:
                    continue
                dist = math.sqrt(ddx * ddx + ddy * ddy)
                t, k = self.cast(cix, ciy, ddx / dist, ddy / dist, i)
                if k == j or t >= dist * (1.0 - 1e-9):
                    vis[i, j] = 1
                    vis[j, i] = 1
        return vis

    # ------------------------------------------------------------- fields

    def modulation_integral(self, ox, oy, dx, dy, t):
        amp = self.f_amp
        if amp == 0.0:
            return t
        k = TWO_PI / self.f_period
        if self.f_axis == 0:
            c0 = ox
            dc = dx
        else:
            c0 = oy
            dc = dy
        if math.fabs(dc) * t * k < 1e-9:
            return t * (1.0 + amp * (math.sin(k * c0) + 0.5 * k * dc * t * math.cos(k * c0)))
        return t + amp * (math.cos(k * c0) - math.cos(k * (c0 + dc * t))) / (k * dc)

    def modulation(self, x, y):
        if self.f_amp == 0.0:
            return 1.0
        if self.f_axis == 0:
            c = x
        else:
            c = y
        return 1.0 + self.f_amp * math.sin(TWO_PI * c / self.f_period)

    def invert_depth(self, ox, oy, dx, dy, target, t_max):
        """Distance at which the modulation integral reaches ``target``."""
        if self.f_amp == 0.0:
            return target
        lo = 0.0
        hi = t_max
        t = target
        if t > t_max:
            t = t_max
        for _ in range(200):
            f = self.modulation_integral(ox, oy, dx, dy, t) - target
            if f > 0.0:
                hi = t
            else:
                lo = t
            slope = self.modulation(ox + t * dx, oy + t * dy)
            if slope > 0.0:
                step = t - f / slope
            else:
                step = 0.5 * (lo + hi)
            if not (lo < step < hi):
                step = 0.5 * (lo + hi)
            if math.fabs(step - t) <= 1e-15 * max(1.0, t):
                return step
            t = step
        return t

    def albedo(self, k, x):
        return self.alb_base[k] + self.alb_amp[k] * math.sin(TWO_PI * x / self.alb_period)

    def source_q(self, x):
        return (1.0 + self.src_amp * math.sin(TWO_PI * x / self.src_period)) / self.src_norm

    def sample_source_x(self, rnd, a, b):
        env = 1.0 + math.fabs(self.src_amp)
        while True:
            x = a + (b - a) * rnd()
            if rnd() * env <= 1.0 + self.src_amp * math.sin(TWO_PI * x / self.src_period):
                return x

    def source_ratio(self, x):
        """Q_sai(x)/Q(x) from the SAI source table."""
        lo = 0
        hi = self.n_ss - 1
        if hi < 0 or x < self.ss_x0[0]:
            return 0.0
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.ss_x0[mid] <= x:
                lo = mid
            else:
                hi = mid - 1
        if x > self.ss_x1[lo] or self.ss_mass[lo] <= 0.0:
            return 0.0
        return self.ss_pmf[lo] / self.ss_mass[lo]

    # ------------------------------------------------------------ sampling

    @staticmethod
    def search_cdf(cdf, lo, hi, u):
        """Smallest index m in [lo, hi) with cdf[m] > u (hi - 1 if none)."""
        hi = hi - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if cdf[mid] > u:
                hi = mid
            else:
                lo = mid + 1
        return lo

    def sai_window(self, k, px, py, j):
        """Sines of the window of directions from (px, py) on segment k that
        cross segment j, clipped to the front half-plane: (lo, hi, ok)."""
        nx = self.nx[k]
        ny = self.ny[k]
        tx = self.tx[k]
        ty = self.ty[k]
        an = (self.ax[j] - px) * nx + (self.ay[j] - py) * ny
        at = (self.ax[j] - px) * tx + (self.ay[j] - py) * ty
        bn = (self.bx[j] - px) * nx + (self.by[j] - py) * ny
        bt = (self.bx[j] - px) * tx + (self.by[j] - py) * ty
        if an <= 0.0 and bn <= 0.0:
            return 0.0, 0.0, False
        if an < 0.0:
            at = at + (bt - at) * (an / (an - bn))
            an = 0.0
        elif bn < 0.0:
            bt = bt + (at - bt) * (bn / (bn - an))
            bn = 0.0
        ra = math.sqrt(an * an + at * at)
        rb = math.sqrt(bn * bn + bt * bt)
        if ra == 0.0 or rb == 0.0:
            return 0.0, 0.0, False
        sa = at / ra
        sb = bt / rb
        if sa < sb:
            return sa, sb, True
        if sb < sa:
            return sb, sa, True
        return 0.0, 0.0, False

    def sai_density(self, k, px, py, vx, vy):
        """SAI direction density (per unit angle) at (px, py) on segment k."""
        nx = self.nx[k]
        ny = self.ny[k]
        tx = self.tx[k]
        ty = self.ty[k]
        vn = vx * nx + vy * ny
        vt = vx * tx + vy * ty
        if vn <= 0.0:
            return 0.0
        total = 0.0
        for m in range(self.row_start[k], self.row_start[k + 1]):
            j = self.row_target[m]
            an = (self.ax[j] - px) * nx + (self.ay[j] - py) * ny
            at = (self.ax[j] - px) * tx + (self.ay[j] - py) * ty
            bn = (self.bx[j] - px) * nx + (self.by[j] - py) * ny
            bt = (self.bx[j] - px) * tx + (self.by[j] - py) * ty
            s = an * bt - at * bn
            if s == 0.0:
                continue
            c1 = an * vt - at * vn
            c2 = vn * bt - vt * bn
            if s > 0.0:
                if c1 < 0.0 or c2 < 0.0:
                    continue
            elif c1 > 0.0 or c2 > 0.0:
                continue
            lo, hi, ok = self.sai_window(k, px, py, j)
            if not ok:
                continue
            total += self.row_pmf[m] * (0.5 * vn) / (0.5 * (hi - lo))
        return total

    def rayleigh(self, rnd, vx, vy):
        while True:
            theta = TWO_PI * rnd()
            c = math.cos(theta)
            if rnd() <= 0.5 * (1.0 + c * c):
                s = math.sin(theta)
                return c * vx - s * vy, s * vx + c * vy

    def source_point(self, rnd, sai):
        """Source abscissa and (for the SAI source) its table interval."""
        if sai:
            m = self.search_cdf(self.ss_cdf, 0, self.n_ss, rnd())
            return self.sample_source_x(rnd, self.ss_x0[m], self.ss_x1[m]), m
        return self.sample_source_x(rnd, self.src_x0, self.src_x1), -1

    @staticmethod
    def exp_depth(rnd):
        u = rnd()
        while u == 0.0:
            u = rnd()
        return -math.log(u)

    def lambert_direction(self, rnd, k):
        s = 2.0 * rnd() - 1.0
        c = math.sqrt(1.0 - s * s)
        return c * self.nx[k] + s * self.tx[k], c * self.ny[k] + s * self.ty[k]

    def sai_direction(self, rnd, k, px, py):
        """Direction from the SAI row of segment k at (px, py); None if the row is empty."""
        r0 = self.row_start[k]
        r1 = self.row_start[k + 1]
        if r1 == r0:
            return None
        m = self.search_cdf(self.row_cdf, r0, r1, rnd())
        lo, hi, ok = self.sai_window(k, px, py, self.row_target[m])
        if not ok:
            return None
        s = lo + (hi - lo) * rnd()
        c = math.sqrt(1.0 - s * s)
        return c * self.nx[k] + s * self.tx[k], c * self.ny[k] + s * self.ty[k]

    # ----------------------------------------------------- sampler probes

    def draw_rayleigh(self, bitgen, vx, vy, n):
        rnd = np.random.Generator(bitgen).random
        return np.array([self.rayleigh(rnd, vx, vy) for _ in range(n)]).reshape(n, 2)

    def draw_lambert(self, bitgen, k, n):
        rnd = np.random.Generator(bitgen).random
        return np.array([self.lambert_direction(rnd, k) for _ in range(n)]).reshape(n, 2)

    def draw_sai_direction(self, bitgen, k, px, py, n):
        rnd = np.random.Generator(bitgen).random
        out = np.full((n, 2), np.nan)
        for i in range(n):
            d = self.sai_direction(rnd, k, px, py)
            if d is not None:
                out[i] = d
        return out

    def draw_source(self, bitgen, sai, n):
        rnd = np.random.Generator(bitgen).random
        if sai and self.n_ss == 0:
            return np.full(n, np.nan)
        return np.array([self.source_point(rnd, sai)[0] for _ in range(n)])

    def draw_free_path(self, bitgen, ox, oy, dx, dy, which, n):
        """Collision distances along one ray (inf when the boundary comes first);
        ``which`` 0 uses sigma_t, 1 uses sigma_s."""
        rnd = np.random.Generator(bitgen).random
        sig = self.sig_t if which == 0 else self.sig_s
        tb, k = self.cast(ox, oy, dx, dy, -1)
        mb = self.modulation_integral(ox, oy, dx, dy, tb)
        out = np.full(n, np.inf)
        for i in range(n):
            tau = self.exp_depth(rnd)
            if tau < sig * mb:
                out[i] = self.invert_depth(ox, oy, dx, dy, tau / sig, tb)
        return out

    # --------------------------------------------------------------- paths

    def run(self, chain, q_s, q_v, bitgen, n, w_out, status_out, branch_out,
            trace=None, trace_len=None, trace_dgen=None):
        gen = np.random.Generator(bitgen)
        rnd = gen.random
        n_trace = 0 if trace is None else trace.shape[0]
        for i in range(n):
            rec = trace[i] if i < n_trace else None
            w, st, br, nrec, dgen = self.one_path(chain, q_s, q_v, rnd, rec)
            w_out[i] = w
            status_out[i] = st
            branch_out[i] = br
            if rec is not None:
                trace_len[i] = nrec
                trace_dgen[i] = dgen

    def one_path(self, chain, q_s, q_v, rnd, rec):
        tracing = rec is not None
        cap = 0 if rec is None else rec.shape[0]
        nrec = 0
        dgen = 1.0
        sig_a = self.sig_a
        sig_s = self.sig_s
        sig_t = self.sig_t
        mixture = chain == REGULARIZED

        branch = chain
        if chain == SURVIVAL:
            branch = HEURISTIC
        if mixture:
            if q_s >= 1.0:
                branch = HEURISTIC
            elif q_s <= 0.0:
                branch = SAI
            elif rnd() >= q_s:
                branch = SAI
            else:
                branch = HEURISTIC
        qv = q_v
        if chain == SURVIVAL:
            qv = 1.0

        rs = 0.0
        rh = 1.0
        if branch == SAI:
            if self.n_ss == 0:
                return 0.0, DEAD, branch, nrec, 0.0
            px, m = self.source_point(rnd, True)
            w = self.ss_mass[m] / self.ss_pmf[m]
            rs = self.ss_pmf[m] / self.ss_mass[m]
            if tracing:
                dgen = self.source_q(px) * rs
        else:
            px, m = self.source_point(rnd, False)
            w = 1.0
            if mixture:
                rs = self.source_ratio(px)
            if tracing:
                dgen = self.source_q(px)
        py = self.src_y
        dx = 0.0
        dy = -1.0
        cur = -1
        if tracing and nrec < cap:
            rec[nrec, 0] = px
            rec[nrec, 1] = py
            rec[nrec, 2] = VERTEX_SOURCE
            nrec += 1

        nv = 0
        while True:
            tb, k = self.cast(px, py, dx, dy, cur)
            if k < 0:
                return 0.0, LOST, branch, nrec, dgen
            collide = False
            mx = 0.0
            if sig_t > 0.0:
                mb = self.modulation_integral(px, py, dx, dy, tb)
                mx = mb
                if branch == ANALOG:
                    tau = self.exp_depth(rnd)
                    if tau < sig_t * mb:
                        collide = True
                        mx = tau / sig_t
                elif branch == HEURISTIC and sig_s > 0.0:
                    tau = self.exp_depth(rnd)
                    if tau < sig_s * mb:
                        collide = True
                        mx = tau / sig_s
            if collide:
                tc = self.invert_depth(px, py, dx, dy, mx, tb)
                qx = px + tc * dx
                qy = py + tc * dy
            else:
                qx = px + tb * dx
                qy = py + tb * dy

            if sig_t > 0.0:
                ea = math.exp(-sig_a * mx)
                if branch == HEURISTIC:
                    w *= ea
                elif branch == SAI:
                    w *= math.exp(-sig_t * mx)
                if mixture:
                    rh /= ea
                    if collide:
                        rs = 0.0
                    elif rs > 0.0:
                        rs /= math.exp(-sig_t * mx)
                if tracing:
                    if branch == ANALOG:
                        dgen *= math.exp(-sig_t * mx)
                    elif branch == HEURISTIC:
                        dgen *= math.exp(-sig_s * mx)

            nv += 1
            if tracing and nrec < cap:
                rec[nrec, 0] = qx
                rec[nrec, 1] = qy
                rec[nrec, 2] = VERTEX_VOLUME if collide else float(k)
                nrec += 1
            if nv > self.max_len:
                return w, LENGTHCAP, branch, nrec, dgen

            if collide:
                ox = dx
                oy = dy
                if branch == ANALOG:
                    if rnd() * sig_t >= sig_s:
                        return 0.0, ABSORBED, branch, nrec, dgen
                    dx, dy = self.rayleigh(rnd, ox, oy)
                    if tracing:
                        c = ox * dx + oy * dy
                        dgen *= sig_s * self.modulation(qx, qy) * ((1.0 + c * c) * INV_RAYLEIGH_NORM)
                else:
                    cone = False
                    qh = 1.0
                    lo = 0.0
                    width = 0.0
                    ux = 0.0
                    uy = 0.0
                    if qv < 1.0:
                        mdx = self.det_mx - qx
                        mdy = self.det_my - qy
                        dist = math.sqrt(mdx * mdx + mdy * mdy)
                        ux = mdx / dist
                        uy = mdy / dist
                        th, kh = self.cast(qx, qy, ux, uy, -1)
                        if kh >= 0 and self.tag[kh] == TAG_DETECTOR:
                            ex = self.det_ax - qx
                            ey = self.det_ay - qy
                            ta = math.atan2(ux * ey - uy * ex, ux * ex + uy * ey)
                            ex = self.det_bx - qx
                            ey = self.det_by - qy
                            tb2 = math.atan2(ux * ey - uy * ex, ux * ex + uy * ey)
                            if ta < tb2:
                                lo = ta
                                width = tb2 - ta
                            else:
                                lo = tb2
                                width = ta - tb2
                            if width > 0.0:
                                cone = True
                                c = ox * ux + oy * uy
                                qh = 1.0 - (1.0 - qv) * (0.5 * (1.0 + c * c))
                    if cone:
                        if rnd() < 1.0 - qh:
                            theta = lo + width * rnd()
                            c = math.cos(theta)
                            s = math.sin(theta)
                            dx = c * ux - s * uy
                            dy = s * ux + c * uy
                        else:
                            dx, dy = self.rayleigh(rnd, ox, oy)
                        c = ox * dx + oy * dy
                        p = (1.0 + c * c) * INV_RAYLEIGH_NORM
                        phi = math.atan2(ux * dy - uy * dx, ux * dx + uy * dy)
                        if lo <= phi <= lo + width:
                            kh_dens = qh * p + (1.0 - qh) / width
                        else:
                            kh_dens = qh * p
                    else:
                        dx, dy = self.rayleigh(rnd, ox, oy)
                        c = ox * dx + oy * dy
                        p = (1.0 + c * c) * INV_RAYLEIGH_NORM
                        kh_dens = p
                    w *= p / kh_dens
                    if mixture:
                        rh *= kh_dens / p
                    if tracing:
                        dgen *= sig_s * self.modulation(qx, qy) * kh_dens
                px = qx
                py = qy
                cur = -1
            else:
                tag = self.tag[k]
                if tag == TAG_DETECTOR:
                    if branch == ANALOG:
                        return 1.0, DETECTED, branch, nrec, dgen
                    if mixture:
                        return 1.0 / ((1.0 - q_s) * rs + q_s * rh), DETECTED, branch, nrec, dgen
                    return w, DETECTED, branch, nrec, dgen
                if tag != TAG_MOUNTAIN:
                    return 0.0, ESCAPED, branch, nrec, dgen
                alpha = self.albedo(k, qx)
                if alpha <= 0.0:
                    return 0.0, ABSORBED, branch, nrec, dgen
                nx = self.nx[k]
                ny = self.ny[k]
                if branch == SAI:
                    d = self.sai_direction(rnd, k, qx, qy)
                    if d is None:
                        return 0.0, DEAD, branch, nrec, dgen
                    dx, dy = d
                    ksai = self.sai_density(k, qx, qy, dx, dy)
                    if ksai <= 0.0:
                        return 0.0, LOST, branch, nrec, dgen
                    kap = 0.5 * (dx * nx + dy * ny)
                    w *= alpha * kap / ksai
                    if mixture:
                        rh /= alpha
                        rs *= ksai / (alpha * kap)
                    if tracing:
                        dgen *= ksai
                else:
                    if branch == ANALOG:
                        if rnd() >= alpha:
                            return 0.0, ABSORBED, branch, nrec, dgen
                    dx, dy = self.lambert_direction(rnd, k)
                    kap = 0.5 * (dx * nx + dy * ny)
                    if branch == HEURISTIC:
                        w *= alpha
                        if mixture:
                            rh /= alpha
                            if rs > 0.0:
                                rs *= self.sai_density(k, qx, qy, dx, dy) / (alpha * kap)
                        if tracing:
                            dgen *= kap
                    elif tracing:
                        dgen *= alpha * kap
                px = qx
                py = qy
                cur = k
            if branch != ANALOG and w < self.cutoff:
                return w, CUTOFF, branch, nrec, dgen
