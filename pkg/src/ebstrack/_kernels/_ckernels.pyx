# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels.  Semantics mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, fabs, sin, cos, INFINITY

cnp.import_array()

cdef double TWO_PI = 6.283185307179586


def lowpass_response(itilde_half, double dt, double a, double b, v0):
    cdef double[:, ::1] I = np.ascontiguousarray(itilde_half, dtype=np.float64)
    cdef Py_ssize_t rows = I.shape[0]
    cdef Py_ssize_t K = (I.shape[1] - 1) // 2
    V_arr = np.empty((rows, K + 1))
    E_arr = np.empty((rows, K + 1))
    cdef double[:, ::1] V = V_arr
    cdef double[:, ::1] E = E_arr
    cdef double[::1] v0v = np.ascontiguousarray(np.asarray(v0, dtype=np.float64).reshape(rows))
    cdef Py_ssize_t r, n
    cdef double v, i0, im, i1, gm, k1, k2, k3, k4, h = 0.5 * dt
    for r in range(rows):
        v = v0v[r]
        for n in range(K + 1):
            i0 = I[r, 2 * n]
            k1 = TWO_PI * (b + a * i0) * (i0 - v)
            V[r, n] = v
            E[r, n] = k1
            if n == K:
                break
            im = I[r, 2 * n + 1]
            i1 = I[r, 2 * n + 2]
            gm = TWO_PI * (b + a * im)
            k2 = gm * (im - (v + h * k1))
            k3 = gm * (im - (v + h * k2))
            k4 = TWO_PI * (b + a * i1) * (i1 - (v + dt * k3))
            v = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return V_arr, E_arr


def emit_block(px_in, py_in, ptr_in, star_idx_in, star_pos_in, star_peak_in, double sigma,
               double I0, double a, double b, double T0, double dt, Py_ssize_t nsteps,
               double theta_p, double theta_n, double refractory, V_in, Vref_in, last_in):
    cdef double[::1] px = np.ascontiguousarray(px_in, dtype=np.float64)
    cdef double[::1] py = np.ascontiguousarray(py_in, dtype=np.float64)
    cdef long long[::1] ptr = np.ascontiguousarray(ptr_in, dtype=np.int64)
    cdef int[::1] sidx = np.ascontiguousarray(star_idx_in, dtype=np.int32)
    cdef double[:, :, ::1] spos = np.ascontiguousarray(star_pos_in, dtype=np.float64)
    cdef double[::1] speak = np.ascontiguousarray(star_peak_in, dtype=np.float64)
    cdef double[::1] V = V_in
    cdef double[::1] Vref = Vref_in
    cdef double[::1] last = last_in
    cdef Py_ssize_t n = px.shape[0]
    cdef Py_ssize_t m = 2 * nsteps + 1
    cdef Py_ssize_t cap = 1024
    cdef Py_ssize_t count = 0
    out_i = np.empty(cap, np.int64)
    out_p = np.empty(cap, np.int8)
    out_t = np.empty(cap, np.float64)
    cdef long long[::1] oi = out_i
    cdef signed char[::1] op = out_p
    cdef double[::1] ot = out_t
    buf = np.empty(m, np.float64)
    cdef double[::1] It = buf
    cdef Py_ssize_t k, j, s, step
    cdef double inv2s2 = 1.0 / (2.0 * sigma * sigma)
    cdef double I, dx, dy, v, vn, ref, lst, i0, im, i1, gm, k1, k2, k3, k4, level, tc, ts
    cdef double h = 0.5 * dt
    for k in range(n):
        for j in range(m):
            I = 0.0
            for s in range(ptr[k], ptr[k + 1]):
                dx = px[k] - spos[sidx[s], j, 0]
                dy = py[k] - spos[sidx[s], j, 1]
                I += speak[sidx[s]] * exp(-(dx * dx + dy * dy) * inv2s2)
            It[j] = log(I / I0 + 1.0)
        v = V[k]
        ref = Vref[k]
        lst = last[k]
        for step in range(nsteps):
            i0 = It[2 * step]
            im = It[2 * step + 1]
            i1 = It[2 * step + 2]
            gm = TWO_PI * (b + a * im)
            k1 = TWO_PI * (b + a * i0) * (i0 - v)
            k2 = gm * (im - (v + h * k1))
            k3 = gm * (im - (v + h * k2))
            k4 = TWO_PI * (b + a * i1) * (i1 - (v + dt * k3))
            vn = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            ts = T0 + step * dt
            while vn - ref >= theta_p:
                level = ref + theta_p
                tc = ts + dt * ((level - v) / (vn - v))
                ref = level
                if tc - lst >= refractory:
                    lst = tc
                    if count == cap:
                        cap *= 2
                        out_i = np.resize(out_i, cap)
                        out_p = np.resize(out_p, cap)
                        out_t = np.resize(out_t, cap)
                        oi = out_i
                        op = out_p
                        ot = out_t
                    oi[count] = k
                    op[count] = 1
                    ot[count] = tc
                    count += 1
            while ref - vn >= theta_n:
                level = ref - theta_n
                tc = ts + dt * ((level - v) / (vn - v))
                ref = level
                if tc - lst >= refractory:
                    lst = tc
                    if count == cap:
                        cap *= 2
                        out_i = np.resize(out_i, cap)
                        out_p = np.resize(out_p, cap)
                        out_t = np.resize(out_t, cap)
                        oi = out_i
                        op = out_p
                        ot = out_t
                    oi[count] = k
                    op[count] = -1
                    ot[count] = tc
                    count += 1
            v = vn
        V[k] = v
        Vref[k] = ref
        last[k] = lst
    out_i = out_i[:count]
    out_p = out_p[:count]
    out_t = out_t[:count]
    order = np.lexsort((out_p, out_i, out_t))
    return out_i[order], out_p[order], out_t[order]


def emit_tails(V_in, Vref_in, last_in, t_exit_in, t_stop_in, double b, double theta_n,
               double refractory):
    cdef double[::1] V = V_in
    cdef double[::1] Vref = Vref_in
    cdef double[::1] last = last_in
    cdef double[::1] te = np.ascontiguousarray(t_exit_in, dtype=np.float64)
    cdef double[::1] tstop = np.ascontiguousarray(t_stop_in, dtype=np.float64)
    cdef Py_ssize_t n = V.shape[0], k
    cdef double rate = TWO_PI * b, v0, ref, lst, level, tc
    out_i = []
    out_t = []
    for k in range(n):
        v0 = V[k]
        ref = Vref[k]
        lst = last[k]
        while True:
            level = ref - theta_n
            if level >= v0:
                ref = level
                continue
            if level <= 0.0:
                break
            tc = te[k] + log(v0 / level) / rate
            if tc > tstop[k]:
                break
            ref = level
            if tc - lst >= refractory:
                lst = tc
                out_i.append(k)
                out_t.append(tc)
        V[k] = v0 * exp(-rate * (tstop[k] - te[k]))
        Vref[k] = ref
        last[k] = lst
    return np.asarray(out_i, dtype=np.int64), np.asarray(out_t, dtype=np.float64)


# ---------------------------------------------------------------------------
# tracker event loop

cdef double MIN_DEPTH = 1e-9
cdef double SMALL_ANGLE = 1e-8
cdef double MAX_COND = 1e12


cdef inline void quat_to_mat(double* q, double* R) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    R[0] = 1 - 2 * (y * y + z * z)
    R[1] = 2 * (x * y - w * z)
    R[2] = 2 * (x * z + w * y)
    R[3] = 2 * (x * y + w * z)
    R[4] = 1 - 2 * (x * x + z * z)
    R[5] = 2 * (y * z - w * x)
    R[6] = 2 * (x * z - w * y)
    R[7] = 2 * (y * z + w * x)
    R[8] = 1 - 2 * (x * x + y * y)


cdef inline void left_exp_apply(double* q, double tx, double ty, double tz) noexcept nogil:
    """q <- normalize(exp(t) * q)."""
    cdef double n = sqrt(tx * tx + ty * ty + tz * tz)
    cdef double ew, s
    if n < SMALL_ANGLE:
        ew = 1.0 - n * n / 8.0
        s = 0.5 * (1.0 - n * n / 24.0)
    else:
        ew = cos(0.5 * n)
        s = sin(0.5 * n) / n
    cdef double ex = s * tx, ey = s * ty, ez = s * tz
    cdef double qw = q[0], qx = q[1], qy = q[2], qz = q[3]
    cdef double rw = ew * qw - ex * qx - ey * qy - ez * qz
    cdef double rx = ew * qx + ex * qw + ey * qz - ez * qy
    cdef double ry = ew * qy - ex * qz + ey * qw + ez * qx
    cdef double rz = ew * qz + ex * qy - ey * qx + ez * qw
    cdef double nn = sqrt(rw * rw + rx * rx + ry * ry + rz * rz)
    q[0] = rw / nn
    q[1] = rx / nn
    q[2] = ry / nn
    q[3] = rz / nn


cdef void ekf_predict_c(double* q, double* w, double* P, double dt, double phi) noexcept nogil:
    cdef double F[36]
    cdef double FP[36]
    cdef int i, j, k
    cdef double acc
    left_exp_apply(q, dt * w[0], dt * w[1], dt * w[2])
    for i in range(36):
        F[i] = 0.0
    for i in range(6):
        F[i * 6 + i] = 1.0
    # upper-left I + [dt w]x
    F[0 * 6 + 1] = -dt * w[2]
    F[0 * 6 + 2] = dt * w[1]
    F[1 * 6 + 0] = dt * w[2]
    F[1 * 6 + 2] = -dt * w[0]
    F[2 * 6 + 0] = -dt * w[1]
    F[2 * 6 + 1] = dt * w[0]
    # upper-right dt I + dt^2/2 [w]x
    cdef double h2 = 0.5 * dt * dt
    F[0 * 6 + 3] = dt
    F[1 * 6 + 4] = dt
    F[2 * 6 + 5] = dt
    F[0 * 6 + 4] = -h2 * w[2]
    F[0 * 6 + 5] = h2 * w[1]
    F[1 * 6 + 3] = h2 * w[2]
    F[1 * 6 + 5] = -h2 * w[0]
    F[2 * 6 + 3] = -h2 * w[1]
    F[2 * 6 + 4] = h2 * w[0]
    for i in range(6):
        for j in range(6):
            acc = 0.0
            for k in range(6):
                acc = acc + F[i * 6 + k] * P[k * 6 + j]
            FP[i * 6 + j] = acc
    for i in range(6):
        for j in range(6):
            acc = 0.0
            for k in range(6):
                acc = acc + FP[i * 6 + k] * F[j * 6 + k]
            P[i * 6 + j] = acc
    cdef double q3 = phi * dt * dt * dt / 3.0, q2 = phi * h2, q1 = phi * dt
    for i in range(3):
        P[i * 6 + i] += q3
        P[i * 6 + i + 3] += q2
        P[(i + 3) * 6 + i] += q2
        P[(i + 3) * 6 + i + 3] += q1


cdef int ekf_update_c(double* q, double* w, double* P, double* s, double zx, double zy,
                      double f, double r00, double r01, double r11) noexcept nogil:
    """Returns 0 on success, 1 if the star is behind the camera, 2 if S is singular."""
    cdef double R[9]
    cdef double Hm[6]
    cdef double PHt[12]
    cdef double HP[12]
    cdef double Kg[12]
    cdef int i, j
    quat_to_mat(q, R)
    cdef double X = R[0] * s[0] + R[1] * s[1] + R[2] * s[2]
    cdef double Y = R[3] * s[0] + R[4] * s[1] + R[5] * s[2]
    cdef double Z = R[6] * s[0] + R[7] * s[1] + R[8] * s[2]
    if Z <= MIN_DEPTH:
        return 1
    cdef double fz = f / Z
    cdef double hx = fz * X, hy = fz * Y
    Hm[0] = fz * (-X * Y / Z)
    Hm[1] = fz * (Z + X * X / Z)
    Hm[2] = fz * (-Y)
    Hm[3] = fz * (-Z - Y * Y / Z)
    Hm[4] = fz * (X * Y / Z)
    Hm[5] = fz * X
    for i in range(6):
        PHt[i * 2 + 0] = P[i * 6 + 0] * Hm[0] + P[i * 6 + 1] * Hm[1] + P[i * 6 + 2] * Hm[2]
        PHt[i * 2 + 1] = P[i * 6 + 0] * Hm[3] + P[i * 6 + 1] * Hm[4] + P[i * 6 + 2] * Hm[5]
    for j in range(6):
        HP[0 * 6 + j] = Hm[0] * P[0 * 6 + j] + Hm[1] * P[1 * 6 + j] + Hm[2] * P[2 * 6 + j]
        HP[1 * 6 + j] = Hm[3] * P[0 * 6 + j] + Hm[4] * P[1 * 6 + j] + Hm[5] * P[2 * 6 + j]
    cdef double s00 = Hm[0] * PHt[0] + Hm[1] * PHt[2] + Hm[2] * PHt[4] + r00
    cdef double s01 = Hm[0] * PHt[1] + Hm[1] * PHt[3] + Hm[2] * PHt[5] + r01
    cdef double s10 = Hm[3] * PHt[0] + Hm[4] * PHt[2] + Hm[5] * PHt[4] + r01
    cdef double s11 = Hm[3] * PHt[1] + Hm[4] * PHt[3] + Hm[5] * PHt[5] + r11
    cdef double sm = 0.5 * (s01 + s10)
    cdef double half_tr = 0.5 * (s00 + s11)
    cdef double rad = sqrt(0.25 * (s00 - s11) * (s00 - s11) + sm * sm)
    cdef double lmin = half_tr - rad, lmax = half_tr + rad
    if lmin <= 0.0 or lmax / lmin > MAX_COND:
        return 2
    cdef double det = s00 * s11 - s01 * s10
    cdef double i00 = s11 / det, i01 = -s01 / det, i10 = -s10 / det, i11 = s00 / det
    for i in range(6):
        Kg[i * 2 + 0] = PHt[i * 2 + 0] * i00 + PHt[i * 2 + 1] * i10
        Kg[i * 2 + 1] = PHt[i * 2 + 0] * i01 + PHt[i * 2 + 1] * i11
    cdef double yx = zx - hx, yy = zy - hy
    cdef double d[6]
    for i in range(6):
        d[i] = Kg[i * 2 + 0] * yx + Kg[i * 2 + 1] * yy
    left_exp_apply(q, d[0], d[1], d[2])
    w[0] += d[3]
    w[1] += d[4]
    w[2] += d[5]
    for i in range(6):
        for j in range(6):
            P[i * 6 + j] = P[i * 6 + j] - (Kg[i * 2 + 0] * HP[j] + Kg[i * 2 + 1] * HP[6 + j])
    cdef double a
    for i in range(6):
        for j in range(i + 1, 6):
            a = 0.5 * (P[i * 6 + j] + P[j * 6 + i])
            P[i * 6 + j] = a
            P[j * 6 + i] = a
    return 0


cdef inline double interp_row(double* z, double* sp, Py_ssize_t S, double s) noexcept nogil:
    """np.interp(s, sp, z) for increasing sp, clamped."""
    cdef Py_ssize_t j
    if s <= sp[0]:
        return z[0]
    if s >= sp[S - 1]:
        return z[S - 1]
    j = 1
    while sp[j] < s:
        j += 1
    return z[j - 1] + (z[j] - z[j - 1]) * (s - sp[j - 1]) / (sp[j] - sp[j - 1])


def track_chunk(ex_in, ey_in, et_in, hb_in, dirs_in, ztab_in, speeds_in, q_io, w_io, P_io, t_io,
                count_io, rq_io, rt_io, double f, double cx, double cy, double W, double H,
                double margin, double phi, double r00, double r01, double r11,
                double radius, double refresh_px, long long refresh_us):
    """Compiled event loop; mirrors ``tracker._py_track_chunk``.

    Returns (heartbeat states (n, 7), absorbed counts (n,), error code).
    """
    cdef double[::1] ex = np.ascontiguousarray(ex_in, dtype=np.float64)
    cdef double[::1] ey = np.ascontiguousarray(ey_in, dtype=np.float64)
    cdef long long[::1] et = np.ascontiguousarray(et_in, dtype=np.int64)
    cdef long long[::1] hb = np.ascontiguousarray(hb_in, dtype=np.int64)
    cdef double[:, ::1] dirs = np.ascontiguousarray(dirs_in, dtype=np.float64).reshape(-1, 3)
    cdef double[::1] sp = np.ascontiguousarray(speeds_in, dtype=np.float64)
    cdef Py_ssize_t S = sp.shape[0]
    cdef double[:, ::1] ztab = np.ascontiguousarray(ztab_in, dtype=np.float64).reshape(-1, S)
    cdef double[::1] q = q_io
    cdef double[::1] w = w_io
    cdef double[::1] P = P_io
    cdef long long[::1] tt = t_io
    cdef long long[::1] cnt = count_io
    cdef double[::1] rq = rq_io
    cdef long long[::1] rt = rt_io
    cdef Py_ssize_t n = et.shape[0], nhb = hb.shape[0], K = dirs.shape[0]
    hb_out_arr = np.zeros((nhb, 7))
    hb_n_arr = np.zeros(nhb, np.int64)
    cdef double[:, ::1] hb_out = hb_out_arr
    cdef long long[::1] hb_n = hb_n_arr
    proj_arr = np.zeros((max(K, 1), 2))
    valid_arr = np.zeros(max(K, 1), np.uint8)
    cdef double[:, ::1] proj = proj_arr
    cdef unsigned char[::1] valid = valid_arr
    cdef double Rm[9]
    cdef double Rr[9]
    cdef double s[3]
    cdef Py_ssize_t i, j = 0, k, best
    cdef long long t
    cdef double speed, zs
    cdef double X, Y, Z, u, v, x, y, d2, bd, cxv, cyv, czv, moved, hx, hy, vx, vy
    cdef double r2 = radius * radius
    cdef int err = 0, rc

    with nogil:
        quat_to_mat(&rq[0], Rr)
        for k in range(K):
            X = Rr[0] * dirs[k, 0] + Rr[1] * dirs[k, 1] + Rr[2] * dirs[k, 2]
            Y = Rr[3] * dirs[k, 0] + Rr[4] * dirs[k, 1] + Rr[5] * dirs[k, 2]
            Z = Rr[6] * dirs[k, 0] + Rr[7] * dirs[k, 1] + Rr[8] * dirs[k, 2]
            valid[k] = 0
            proj[k, 0] = 0.0
            proj[k, 1] = 0.0
            if Z > MIN_DEPTH:
                proj[k, 0] = f * X / Z
                proj[k, 1] = f * Y / Z
                u = proj[k, 0] + cx
                v = proj[k, 1] + cy
                if u >= -0.5 - margin and u < W - 0.5 + margin and v >= -0.5 - margin and v < H - 0.5 + margin:
                    valid[k] = 1
        for i in range(n):
            t = et[i]
            if t < tt[0]:
                err = 1
                break
            while j < nhb and hb[j] <= t:
                ekf_predict_c(&q[0], &w[0], &P[0], (hb[j] - tt[0]) * 1e-6, phi)
                tt[0] = hb[j]
                hb_out[j, 0] = q[0]
                hb_out[j, 1] = q[1]
                hb_out[j, 2] = q[2]
                hb_out[j, 3] = q[3]
                hb_out[j, 4] = w[0]
                hb_out[j, 5] = w[1]
                hb_out[j, 6] = w[2]
                hb_n[j] = cnt[0]
                cnt[0] = 0
                j += 1
            ekf_predict_c(&q[0], &w[0], &P[0], (t - tt[0]) * 1e-6, phi)
            tt[0] = t
            quat_to_mat(&q[0], Rm)
            quat_to_mat(&rq[0], Rr)
            cxv = Rm[7] * Rr[8] - Rm[8] * Rr[7]
            cyv = Rm[8] * Rr[6] - Rm[6] * Rr[8]
            czv = Rm[6] * Rr[7] - Rm[7] * Rr[6]
            moved = sqrt(cxv * cxv + cyv * cyv + czv * czv) * f
            if t - rt[0] >= refresh_us or moved > refresh_px:
                for k in range(K):
                    X = Rm[0] * dirs[k, 0] + Rm[1] * dirs[k, 1] + Rm[2] * dirs[k, 2]
                    Y = Rm[3] * dirs[k, 0] + Rm[4] * dirs[k, 1] + Rm[5] * dirs[k, 2]
                    Z = Rm[6] * dirs[k, 0] + Rm[7] * dirs[k, 1] + Rm[8] * dirs[k, 2]
                    valid[k] = 0
                    proj[k, 0] = 0.0
                    proj[k, 1] = 0.0
                    if Z > MIN_DEPTH:
                        proj[k, 0] = f * X / Z
                        proj[k, 1] = f * Y / Z
                        u = proj[k, 0] + cx
                        v = proj[k, 1] + cy
                        if u >= -0.5 - margin and u < W - 0.5 + margin and v >= -0.5 - margin and v < H - 0.5 + margin:
                            valid[k] = 1
                rq[0] = q[0]
                rq[1] = q[1]
                rq[2] = q[2]
                rq[3] = q[3]
                rt[0] = t
            x = ex[i] - cx
            y = ey[i] - cy
            best = -1
            bd = INFINITY
            for k in range(K):
                if valid[k] == 0:
                    continue
                d2 = (proj[k, 0] - x) * (proj[k, 0] - x) + (proj[k, 1] - y) * (proj[k, 1] - y)
                if d2 < bd:
                    best = k
                    bd = d2
            if best < 0 or bd > r2:
                continue
            s[0] = dirs[best, 0]
            s[1] = dirs[best, 1]
            s[2] = dirs[best, 2]
            X = Rm[0] * s[0] + Rm[1] * s[1] + Rm[2] * s[2]
            Y = Rm[3] * s[0] + Rm[4] * s[1] + Rm[5] * s[2]
            Z = Rm[6] * s[0] + Rm[7] * s[1] + Rm[8] * s[2]
            if Z <= MIN_DEPTH:
                continue
            hx = f * X / Z
            hy = f * Y / Z
            vx = -hx * hy / f * w[0] + (f + hx * hx / f) * w[1] - hy * w[2]
            vy = (-f - hy * hy / f) * w[0] + hx * hy / f * w[1] + hx * w[2]
            speed = sqrt(vx * vx + vy * vy)
            zs = 0.0
            if speed > 0.0:
                zs = interp_row(&ztab[best, 0], &sp[0], S, speed) / speed
            rc = ekf_update_c(&q[0], &w[0], &P[0], s, x + vx * zs, y + vy * zs,
                              f, r00, r01, r11)
            if rc == 2:
                err = 2
                break
            if rc == 0:
                cnt[0] += 1
        if err == 0:
            while j < nhb:
                ekf_predict_c(&q[0], &w[0], &P[0], (hb[j] - tt[0]) * 1e-6, phi)
                tt[0] = hb[j]
                hb_out[j, 0] = q[0]
                hb_out[j, 1] = q[1]
                hb_out[j, 2] = q[2]
                hb_out[j, 3] = q[3]
                hb_out[j, 4] = w[0]
                hb_out[j, 5] = w[1]
                hb_out[j, 6] = w[2]
                hb_n[j] = cnt[0]
                cnt[0] = 0
                j += 1
    return hb_out_arr, hb_n_arr, err
