# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled transport kernel; mirrors ``_pycore.py`` expression for expression."""

import numpy as np
cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport sqrt, sin, cos, exp, log, atan2, floor, fabs, fmax, INFINITY, M_PI
from numpy.random cimport bitgen_t

cnp.import_array()

cdef enum:
    ANALOG = 0
    SURVIVAL = 1
    SAI = 2
    HEURISTIC = 3
    REGULARIZED = 4
    DETECTED = 0
    ABSORBED = 1
    ESCAPED = 2
    CUTOFF = 3
    LENGTHCAP = 4
    DEAD = 5
    LOST = 6
    TAG_MOUNTAIN = 0
    TAG_DETECTOR = 3

cdef double T_MIN = 1e-10
cdef double GRAZE_EPS = 1e-12
cdef double S_TOL = 1e-12
cdef double TWO_PI = 2.0 * M_PI
cdef double INV_RAYLEIGH_NORM = 1.0 / (3.0 * M_PI)
cdef double VERTEX_SOURCE = -2.0
cdef double VERTEX_VOLUME = -1.0


cdef inline double rnd(bitgen_t* g) noexcept nogil:
    return g.next_double(g.state)


cdef inline double exp_depth(bitgen_t* g) noexcept nogil:
    cdef double u = rnd(g)
    while u == 0.0:
        u = rnd(g)
    return -log(u)


cdef struct PathOut:
    double w
    int status
    int branch
    long nrec
    double dgen


cdef class Kernel:
    cdef public int n_seg
    cdef double[::1] ax, ay, bx, by, nx, ny, tx, ty, seglen, alb_base, alb_amp
    cdef double[::1] ss_x0, ss_x1, ss_mass, ss_pmf, ss_cdf, row_pmf, row_cdf
    cdef int[::1] tag, g_start, g_items, row_start, row_target
    cdef double g_x0, g_y0, g_cell, alb_period, sig_a, sig_s, sig_t, f_amp, f_period
    cdef double src_x0, src_x1, src_amp, src_period, src_norm, src_y
    cdef double det_ax, det_ay, det_bx, det_by, det_mx, det_my, cutoff
    cdef int g_nx, g_ny, f_axis, n_ss
    cdef long max_len

    def __init__(self, kd):
        def f64(a):
            return np.array(a, dtype=np.float64, order="C", copy=True)

        def i32(a):
            return np.array(a, dtype=np.int32, order="C", copy=True)

        self.n_seg = int(kd.n_seg)
        self.ax = f64(kd.ax); self.ay = f64(kd.ay); self.bx = f64(kd.bx); self.by = f64(kd.by)
        self.nx = f64(kd.nx); self.ny = f64(kd.ny); self.tx = f64(kd.tx); self.ty = f64(kd.ty)
        self.seglen = f64(kd.seglen)
        self.alb_base = f64(kd.alb_base); self.alb_amp = f64(kd.alb_amp)
        self.ss_x0 = f64(kd.ss_x0); self.ss_x1 = f64(kd.ss_x1); self.ss_mass = f64(kd.ss_mass)
        self.ss_pmf = f64(kd.ss_pmf); self.ss_cdf = f64(kd.ss_cdf)
        self.row_pmf = f64(kd.row_pmf); self.row_cdf = f64(kd.row_cdf)
        self.tag = i32(kd.tag); self.g_start = i32(kd.g_start); self.g_items = i32(kd.g_items)
        self.row_start = i32(kd.row_start); self.row_target = i32(kd.row_target)
        self.g_x0 = kd.g_x0; self.g_y0 = kd.g_y0; self.g_cell = kd.g_cell
        self.g_nx = kd.g_nx; self.g_ny = kd.g_ny
        self.alb_period = kd.alb_period
        self.sig_a = kd.sig_a; self.sig_s = kd.sig_s; self.sig_t = self.sig_a + self.sig_s
        self.f_amp = kd.f_amp; self.f_period = kd.f_period; self.f_axis = kd.f_axis
        self.src_x0 = kd.src_x0; self.src_x1 = kd.src_x1; self.src_amp = kd.src_amp
        self.src_period = kd.src_period; self.src_norm = kd.src_norm; self.src_y = kd.src_y
        self.det_ax = kd.det_ax; self.det_ay = kd.det_ay; self.det_bx = kd.det_bx
        self.det_by = kd.det_by; self.det_mx = kd.det_mx; self.det_my = kd.det_my
        self.cutoff = kd.cutoff; self.max_len = kd.max_len
        self.n_ss = self.ss_x0.shape[0]

    # ------------------------------------------------------------ geometry

    cdef double _cast(self, double ox, double oy, double dx, double dy, int skip, int* hit) noexcept nogil:
        cdef double x0 = self.g_x0, y0 = self.g_y0, cell = self.g_cell
        cdef int gnx = self.g_nx, gny = self.g_ny
        cdef int ix = <int>floor((ox - x0) / cell)
        cdef int iy = <int>floor((oy - y0) / cell)
        cdef int stepx, stepy, c, m, k, best
        cdef double tmaxx, tmaxy, tdx, tdy, best_t, ex, ey, den, wx, wy, t, s, t_exit
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
            tmaxx = INFINITY
            tdx = INFINITY
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
            tmaxy = INFINITY
            tdy = INFINITY
        best_t = INFINITY
        best = -1
        while True:
            c = iy * gnx + ix
            for m in range(self.g_start[c], self.g_start[c + 1]):
                k = self.g_items[m]
                if k == skip:
                    continue
                ex = self.bx[k] - self.ax[k]
                ey = self.by[k] - self.ay[k]
                den = dx * ey - dy * ex
                if fabs(den) <= GRAZE_EPS * self.seglen[k]:
                    continue
                wx = self.ax[k] - ox
                wy = self.ay[k] - oy
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
        hit[0] = best
        return best_t

    def cast(self, double ox, double oy, double dx, double dy, int skip):
        cdef int k
        cdef double t = self._cast(ox, oy, dx, dy, skip, &k)
        return t, k

    def visibility(self):
        cdef int n = self.n_seg
        cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((n, n), dtype=np.uint8)
        cdef unsigned char[:, ::1] vis = out
        cdef int i, j, k
        cdef double cix, ciy, cjx, cjy, ddx, ddy, dist, t
        with nogil:
            for i in range(n):
                cix = 0.5 * (self.ax[i] + self.bx[i])
                ciy = 0.5 * (self.ay[i] + self.by[i])
                for j in range(i + 1, n):
                    cjx = 0.5 * (self.ax[j] + self.bx[j])
                    cjy = 0.5 * (self.ay[j] + self.by[j])
                    ddx = cjx - cix
                    ddy = cjy - ciy
                    if self.nx[i] * ddx + self.ny[i] * ddy <= 0.0 or self.nx[j] * ddx + self.ny[j] * ddy >= 0.0:
                        continue
                    dist = sqrt(ddx * ddx + ddy * ddy)
                    t = self._cast(cix, ciy, ddx / dist, ddy / dist, i, &k)
                    if k == j or t >= dist * (1.0 - 1e-9):
                        vis[i, j] = 1
                        vis[j, i] = 1
        return out

    # ------------------------------------------------------------- fields

    cdef double modulation_integral(self, double ox, double oy, double dx, double dy, double t) noexcept nogil:
        cdef double amp = self.f_amp, k, c0, dc
        if amp == 0.0:
            return t
        k = TWO_PI / self.f_period
        if self.f_axis == 0:
            c0 = ox
            dc = dx
        else:
            c0 = oy
            dc = dy
        if fabs(dc) * t * k < 1e-9:
            return t * (1.0 + amp * (sin(k * c0) + 0.5 * k * dc * t * cos(k * c0)))
        return t + amp * (cos(k * c0) - cos(k * (c0 + dc * t))) / (k * dc)

    cdef double modulation(self, double x, double y) noexcept nogil:
        cdef double c
        if self.f_amp == 0.0:
            return 1.0
        if self.f_axis == 0:
            c = x
        else:
            c = y
        return 1.0 + self.f_amp * sin(TWO_PI * c / self.f_period)

    cdef double invert_depth(self, double ox, double oy, double dx, double dy, double target, double t_max) noexcept nogil:
        cdef double lo, hi, t, f, slope, step
        cdef int it
        if self.f_amp == 0.0:
            return target
        lo = 0.0
        hi = t_max
        t = target
        if t > t_max:
            t = t_max
        for it in range(200):
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
            if not (lo < step and step < hi):
                step = 0.5 * (lo + hi)
            if fabs(step - t) <= 1e-15 * fmax(1.0, t):
                return step
            t = step
        return t

    cdef double albedo(self, int k, double x) noexcept nogil:
        return self.alb_base[k] + self.alb_amp[k] * sin(TWO_PI * x / self.alb_period)

    cdef double source_q(self, double x) noexcept nogil:
        return (1.0 + self.src_amp * sin(TWO_PI * x / self.src_period)) / self.src_norm

    cdef double sample_source_x(self, bitgen_t* g, double a, double b) noexcept nogil:
        cdef double env = 1.0 + fabs(self.src_amp), x
        while True:
            x = a + (b - a) * rnd(g)
            if rnd(g) * env <= 1.0 + self.src_amp * sin(TWO_PI * x / self.src_period):
                return x

    cdef double source_ratio(self, double x) noexcept nogil:
        cdef int lo = 0, hi = self.n_ss - 1, mid
        if hi < 0 or x < self.ss_x0[0]:
            return 0.0
        while lo < hi:
            mid = (lo + hi + 1) / 2
            if self.ss_x0[mid] <= x:
                lo = mid
            else:
                hi = mid - 1
        if x > self.ss_x1[lo] or self.ss_mass[lo] <= 0.0:
            return 0.0
        return self.ss_pmf[lo] / self.ss_mass[lo]

    # ------------------------------------------------------------ sampling

    cdef int search_cdf(self, double[::1] cdf, int lo, int hi, double u) noexcept nogil:
        cdef int mid
        hi = hi - 1
        while lo < hi:
            mid = (lo + hi) / 2
            if cdf[mid] > u:
                hi = mid
            else:
                lo = mid + 1
        return lo

    cdef bint sai_window(self, int k, double px, double py, int j, double* lo, double* hi) noexcept nogil:
        cdef double nx = self.nx[k], ny = self.ny[k], tx = self.tx[k], ty = self.ty[k]
        cdef double an = (self.ax[j] - px) * nx + (self.ay[j] - py) * ny
        cdef double at = (self.ax[j] - px) * tx + (self.ay[j] - py) * ty
        cdef double bn = (self.bx[j] - px) * nx + (self.by[j] - py) * ny
        cdef double bt = (self.bx[j] - px) * tx + (self.by[j] - py) * ty
        cdef double ra, rb, sa, sb
        if an <= 0.0 and bn <= 0.0:
            return False
        if an < 0.0:
            at = at + (bt - at) * (an / (an - bn))
            an = 0.0
        elif bn < 0.0:
            bt = bt + (at - bt) * (bn / (bn - an))
            bn = 0.0
        ra = sqrt(an * an + at * at)
        rb = sqrt(bn * bn + bt * bt)
        if ra == 0.0 or rb == 0.0:
            return False
        sa = at / ra
        sb = bt / rb
        if sa < sb:
            lo[0] = sa
            hi[0] = sb
            return True
        if sb < sa:
            lo[0] = sb
            hi[0] = sa
            return True
        return False

    cdef double sai_density_c(self, int k, double px, double py, double vx, double vy) noexcept nogil:
        cdef double nx = self.nx[k], ny = self.ny[k], tx = self.tx[k], ty = self.ty[k]
        cdef double vn = vx * nx + vy * ny
        cdef double vt = vx * tx + vy * ty
        cdef double total = 0.0, an, at, bn, bt, s, c1, c2, lo = 0.0, hi = 0.0
        cdef int m, j
        if vn <= 0.0:
            return 0.0
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
            if not self.sai_window(k, px, py, j, &lo, &hi):
                continue
            total += self.row_pmf[m] * (0.5 * vn) / (0.5 * (hi - lo))
        return total

    def sai_density(self, int k, double px, double py, double vx, double vy):
        return self.sai_density_c(k, px, py, vx, vy)

    cdef void rayleigh(self, bitgen_t* g, double vx, double vy, double* ox, double* oy) noexcept nogil:
        cdef double theta, c, s
        while True:
            theta = TWO_PI * rnd(g)
            c = cos(theta)
            if rnd(g) <= 0.5 * (1.0 + c * c):
                s = sin(theta)
                ox[0] = c * vx - s * vy
                oy[0] = s * vx + c * vy
                return

    cdef double source_point(self, bitgen_t* g, bint sai, int* m) noexcept nogil:
        if sai:
            m[0] = self.search_cdf(self.ss_cdf, 0, self.n_ss, rnd(g))
            return self.sample_source_x(g, self.ss_x0[m[0]], self.ss_x1[m[0]])
        m[0] = -1
        return self.sample_source_x(g, self.src_x0, self.src_x1)

    cdef void lambert_direction(self, bitgen_t* g, int k, double* dx, double* dy) noexcept nogil:
        cdef double s = 2.0 * rnd(g) - 1.0
        cdef double c = sqrt(1.0 - s * s)
        dx[0] = c * self.nx[k] + s * self.tx[k]
        dy[0] = c * self.ny[k] + s * self.ty[k]

    cdef bint sai_direction(self, bitgen_t* g, int k, double px, double py, double* dx, double* dy) noexcept nogil:
        cdef int r0 = self.row_start[k]
        cdef int r1 = self.row_start[k + 1]
        cdef int m
        cdef double lo, hi, s, c
        if r1 == r0:
            return False
        m = self.search_cdf(self.row_cdf, r0, r1, rnd(g))
        if not self.sai_window(k, px, py, self.row_target[m], &lo, &hi):
            return False
        s = lo + (hi - lo) * rnd(g)
        c = sqrt(1.0 - s * s)
        dx[0] = c * self.nx[k] + s * self.tx[k]
        dy[0] = c * self.ny[k] + s * self.ty[k]
        return True

    # ----------------------------------------------------- sampler probes

    def draw_rayleigh(self, bitgen, double vx, double vy, long n):
        cdef bitgen_t* g = <bitgen_t*> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        out = np.empty((n, 2))
        cdef double[:, ::1] o = out
        cdef long i
        with bitgen.lock, nogil:
            for i in range(n):
                self.rayleigh(g, vx, vy, &o[i, 0], &o[i, 1])
        return out

    def draw_lambert(self, bitgen, int k, long n):
        cdef bitgen_t* g = <bitgen_t*> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        out = np.empty((n, 2))
        cdef double[:, ::1] o = out
        cdef long i
        with bitgen.lock, nogil:
            for i in range(n):
                self.lambert_direction(g, k, &o[i, 0], &o[i, 1])
        return out

    def draw_sai_direction(self, bitgen, int k, double px, double py, long n):
        cdef bitgen_t* g = <bitgen_t*> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        out = np.full((n, 2), np.nan)
        cdef double[:, ::1] o = out
        cdef long i
        cdef double dx, dy
        with bitgen.lock, nogil:
            for i in range(n):
                if self.sai_direction(g, k, px, py, &dx, &dy):
                    o[i, 0] = dx
                    o[i, 1] = dy
        return out

    def draw_source(self, bitgen, bint sai, long n):
        cdef bitgen_t* g = <bitgen_t*> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        if sai and self.n_ss == 0:
            return np.full(n, np.nan)
        out = np.empty(n)
        cdef double[::1] o = out
        cdef long i
        cdef int m
        with bitgen.lock, nogil:
            for i in range(n):
                o[i] = self.source_point(g, sai, &m)
        return out

    def draw_free_path(self, bitgen, double ox, double oy, double dx, double dy, int which, long n):
        """Collision distances along one ray (inf when the boundary comes first);
        ``which`` 0 uses sigma_t, 1 uses sigma_s."""
        cdef bitgen_t* g = <bitgen_t*> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        cdef double sig = self.sig_t if which == 0 else self.sig_s
        cdef int k
        cdef double tb = self._cast(ox, oy, dx, dy, -1, &k)
        cdef double mb = self.modulation_integral(ox, oy, dx, dy, tb)
        cdef double tau
        out = np.full(n, np.inf)
        cdef double[::1] o = out
        cdef long i
        with bitgen.lock, nogil:
            for i in range(n):
                tau = exp_depth(g)
                if tau < sig * mb:
                    o[i] = self.invert_depth(ox, oy, dx, dy, tau / sig, tb)
        return out

    # --------------------------------------------------------------- paths

    def run(self, int chain, double q_s, double q_v, bitgen, long n, double[::1] w_out,
            signed char[::1] status_out, signed char[::1] branch_out,
            trace=None, trace_len=None, trace_dgen=None):
        cdef bitgen_t* g = <bitgen_t*> PyCapsule_GetPointer(bitgen.capsule, "BitGenerator")
        cdef double[:, :, ::1] tr
        cdef long[::1] tl
        cdef double[::1] td
        cdef long n_trace = 0, i
        cdef PathOut out
        cdef double[:, ::1] rec
        if trace is not None:
            tr = trace
            tl = trace_len
            td = trace_dgen
            n_trace = tr.shape[0]
        with bitgen.lock:
            for i in range(n_trace if n_trace < n else n):
                rec = tr[i]
                self.one_path(chain, q_s, q_v, g, &rec[0, 0], rec.shape[0], &out)
                w_out[i] = out.w
                status_out[i] = out.status
                branch_out[i] = out.branch
                tl[i] = out.nrec
                td[i] = out.dgen
            with nogil:
                for i in range(n_trace, n):
                    self.one_path(chain, q_s, q_v, g, NULL, 0, &out)
                    w_out[i] = out.w
                    status_out[i] = out.status
                    branch_out[i] = out.branch

    cdef void one_path(self, int chain, double q_s, double q_v, bitgen_t* g,
                       double* rec, long cap, PathOut* out) noexcept nogil:
        cdef bint tracing = rec != NULL
        cdef bint mixture = chain == REGULARIZED
        cdef bint collide, cone, ok
        cdef long nrec = 0, nv = 0
        cdef double dgen = 1.0
        cdef double sig_a = self.sig_a, sig_s = self.sig_s, sig_t = self.sig_t
        cdef int branch = chain, m, k, kh, tag, r0, r1
        cdef double qv = q_v, rs = 0.0, rh = 1.0, w, px, py, dx, dy, tb, mx, mb, u, tau
        cdef double tc, qx, qy, ea, ox, oy, qh, lo, hi, width, ux, uy, mdx, mdy, dist, th
        cdef double ex, ey, ta, tb2, c, s, theta, p, phi, kh_dens, alpha, nx, ny
        cdef double ksai, kap
        cdef int cur = -1

        out.w = 0.0
        out.branch = chain
        out.nrec = 0
        out.dgen = 0.0
        if chain == SURVIVAL:
            branch = HEURISTIC
        if mixture:
            if q_s >= 1.0:
                branch = HEURISTIC
            elif q_s <= 0.0:
                branch = SAI
            elif rnd(g) >= q_s:
                branch = SAI
            else:
                branch = HEURISTIC
        if chain == SURVIVAL:
            qv = 1.0
        out.branch = branch

        if branch == SAI:
            if self.n_ss == 0:
                out.status = DEAD
                return
            px = self.source_point(g, True, &m)
            w = self.ss_mass[m] / self.ss_pmf[m]
            rs = self.ss_pmf[m] / self.ss_mass[m]
            if tracing:
                dgen = self.source_q(px) * rs
        else:
            px = self.source_point(g, False, &m)
            w = 1.0
            if mixture:
                rs = self.source_ratio(px)
            if tracing:
                dgen = self.source_q(px)
        py = self.src_y
        dx = 0.0
        dy = -1.0
        if tracing and nrec < cap:
            rec[3 * nrec] = px
            rec[3 * nrec + 1] = py
            rec[3 * nrec + 2] = VERTEX_SOURCE
            nrec += 1

        while True:
            tb = self._cast(px, py, dx, dy, cur, &k)
            if k < 0:
                self._finish(out, 0.0, LOST, nrec, dgen)
                return
            collide = False
            mx = 0.0
            if sig_t > 0.0:
                mb = self.modulation_integral(px, py, dx, dy, tb)
                mx = mb
                if branch == ANALOG:
                    tau = exp_depth(g)
                    if tau < sig_t * mb:
                        collide = True
                        mx = tau / sig_t
                elif branch == HEURISTIC and sig_s > 0.0:
                    tau = exp_depth(g)
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
                ea = exp(-sig_a * mx)
                if branch == HEURISTIC:
                    w *= ea
                elif branch == SAI:
                    w *= exp(-sig_t * mx)
                if mixture:
                    rh /= ea
                    if collide:
                        rs = 0.0
                    elif rs > 0.0:
                        rs /= exp(-sig_t * mx)
                if tracing:
                    if branch == ANALOG:
                        dgen *= exp(-sig_t * mx)
                    elif branch == HEURISTIC:
                        dgen *= exp(-sig_s * mx)

            nv += 1
            if tracing and nrec < cap:
                rec[3 * nrec] = qx
                rec[3 * nrec + 1] = qy
                rec[3 * nrec + 2] = VERTEX_VOLUME if collide else <double>k
                nrec += 1
            if nv > self.max_len:
                self._finish(out, w, LENGTHCAP, nrec, dgen)
                return

            if collide:
                ox = dx
                oy = dy
                if branch == ANALOG:
                    if rnd(g) * sig_t >= sig_s:
                        self._finish(out, 0.0, ABSORBED, nrec, dgen)
                        return
                    self.rayleigh(g, ox, oy, &dx, &dy)
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
                        dist = sqrt(mdx * mdx + mdy * mdy)
                        ux = mdx / dist
                        uy = mdy / dist
                        th = self._cast(qx, qy, ux, uy, -1, &kh)
                        if kh >= 0 and self.tag[kh] == TAG_DETECTOR:
                            ex = self.det_ax - qx
                            ey = self.det_ay - qy
                            ta = atan2(ux * ey - uy * ex, ux * ex + uy * ey)
                            ex = self.det_bx - qx
                            ey = self.det_by - qy
                            tb2 = atan2(ux * ey - uy * ex, ux * ex + uy * ey)
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
                        if rnd(g) < 1.0 - qh:
                            theta = lo + width * rnd(g)
                            c = cos(theta)
                            s = sin(theta)
                            dx = c * ux - s * uy
                            dy = s * ux + c * uy
                        else:
                            self.rayleigh(g, ox, oy, &dx, &dy)
                        c = ox * dx + oy * dy
                        p = (1.0 + c * c) * INV_RAYLEIGH_NORM
                        phi = atan2(ux * dy - uy * dx, ux * dx + uy * dy)
                        if lo <= phi and phi <= lo + width:
                            kh_dens = qh * p + (1.0 - qh) / width
                        else:
                            kh_dens = qh * p
                    else:
                        self.rayleigh(g, ox, oy, &dx, &dy)
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
                        self._finish(out, 1.0, DETECTED, nrec, dgen)
                    elif mixture:
                        self._finish(out, 1.0 / ((1.0 - q_s) * rs + q_s * rh), DETECTED, nrec, dgen)
                    else:
                        self._finish(out, w, DETECTED, nrec, dgen)
                    return
                if tag != TAG_MOUNTAIN:
                    self._finish(out, 0.0, ESCAPED, nrec, dgen)
                    return
                alpha = self.albedo(k, qx)
                if alpha <= 0.0:
                    self._finish(out, 0.0, ABSORBED, nrec, dgen)
                    return
                nx = self.nx[k]
                ny = self.ny[k]
                if branch == SAI:
                    if not self.sai_direction(g, k, qx, qy, &dx, &dy):
                        self._finish(out, 0.0, DEAD, nrec, dgen)
                        return
                    ksai = self.sai_density_c(k, qx, qy, dx, dy)
                    if ksai <= 0.0:
                        self._finish(out, 0.0, LOST, nrec, dgen)
                        return
                    kap = 0.5 * (dx * nx + dy * ny)
                    w *= alpha * kap / ksai
                    if mixture:
                        rh /= alpha
                        rs *= ksai / (alpha * kap)
                    if tracing:
                        dgen *= ksai
                else:
                    if branch == ANALOG:
                        if rnd(g) >= alpha:
                            self._finish(out, 0.0, ABSORBED, nrec, dgen)
                            return
                    self.lambert_direction(g, k, &dx, &dy)
                    kap = 0.5 * (dx * nx + dy * ny)
                    if branch == HEURISTIC:
                        w *= alpha
                        if mixture:
                            rh /= alpha
                            if rs > 0.0:
                                rs *= self.sai_density_c(k, qx, qy, dx, dy) / (alpha * kap)
                        if tracing:
                            dgen *= kap
                    elif tracing:
                        dgen *= alpha * kap
                px = qx
                py = qy
                cur = k
            if branch != ANALOG and w < self.cutoff:
                self._finish(out, w, CUTOFF, nrec, dgen)
                return

    cdef inline void _finish(self, PathOut* out, double w, int status, long nrec, double dgen) noexcept nogil:
        out.w = w
        out.status = status
        out.nrec = nrec
        out.dgen = dgen
