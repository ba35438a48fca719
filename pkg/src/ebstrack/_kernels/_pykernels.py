"""Pure-Python/numpy reference implementations of the kernels."""

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def lowpass_response(itilde_half, dt, a, b, v0):
    """RK4 integration of dV/dt = 2*pi*(b + a*I)*(I - V) for many rows.

    ``itilde_half`` has shape (rows, 2K+1) holding the photocurrent on a
    half-step grid.  Returns V and E = dV/dt on the K+1 full-step points.
    """
    I = np.ascontiguousarray(itilde_half, dtype=np.float64)
    rows, m = I.shape
    K = (m - 1) // 2
    V = np.empty((rows, K + 1))
    E = np.empty((rows, K + 1))
    v = np.array(v0, dtype=np.float64).reshape(rows).copy()
    h = 0.5 * dt
    for n in range(K + 1):
        i0 = I[:, 2 * n]
        V[:, n] = v
        E[:, n] = TWO_PI * (b + a * i0) * (i0 - v)
        if n == K:
            break
        im = I[:, 2 * n + 1]
        i1 = I[:, 2 * n + 2]
        gm = TWO_PI * (b + a * im)
        k1 = E[:, n]
        k2 = gm * (im - (v + h * k1))
        k3 = gm * (im - (v + h * k2))
        k4 = TWO_PI * (b + a * i1) * (i1 - (v + dt * k3))
        v = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return V, E


def _block_itilde(px, py, ptr, star_idx, star_pos, star_peak, sigma, I0):
    """Photocurrent of every active pixel on the block's half-step grid."""
    n = px.size
    counts = np.diff(ptr)
    pix_of = np.repeat(np.arange(n), counts)
    sx = star_pos[star_idx, :, 0]
    sy = star_pos[star_idx, :, 1]
    dx = px[pix_of, None] - sx
    dy = py[pix_of, None] - sy
    contrib = star_peak[star_idx, None] * np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    I = np.zeros((n, star_pos.shape[1]))
    # sequential accumulation in CSR order, matching the compiled kernel
    kmax = int(counts.max()) if n else 0
    for k in range(kmax):
        sel = counts > k
        I[sel] += contrib[ptr[:-1][sel] + k]
    return np.log(I / I0 + 1.0)


def emit_block(px, py, ptr, star_idx, star_pos, star_peak, sigma, I0, a, b, T0, dt, nsteps,
               theta_p, theta_n, refractory, V, Vref, last):
    """Integrate active pixels over one block and emit threshold crossings.

    Pixel state arrays V, Vref, last are updated in place.  Returns event
    arrays (pixel index, polarity, time in seconds) in emission order.
    """
    I = _block_itilde(px, py, ptr, star_idx, star_pos, star_peak, sigma, I0)
    n = px.size
    out_i, out_p, out_t = [], [], []
    h = 0.5 * dt
    v = V.copy()
    ref = Vref.copy()
    lst = last.copy()
    for s in range(nsteps):
        i0 = I[:, 2 * s]
        im = I[:, 2 * s + 1]
        i1 = I[:, 2 * s + 2]
        gm = TWO_PI * (b + a * im)
        k1 = TWO_PI * (b + a * i0) * (i0 - v)
        k2 = gm * (im - (v + h * k1))
        k3 = gm * (im - (v + h * k2))
        k4 = TWO_PI * (b + a * i1) * (i1 - (v + dt * k3))
        vn = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ts = T0 + s * dt
        for pol, thr in ((1, theta_p), (-1, theta_n)):
            while True:
                if pol > 0:
                    hit = np.nonzero(vn - ref >= thr)[0]
                else:
                    hit = np.nonzero(ref - vn >= thr)[0]
                if hit.size == 0:
                    break
                level = ref[hit] + pol * thr
                frac = (level - v[hit]) / (vn[hit] - v[hit])
                tc = ts + dt * frac
                ref[hit] = level
                ok = tc - lst[hit] >= refractory
                k = hit[ok]
                lst[k] = tc[ok]
                out_i.append(k)
                out_p.append(np.full(k.size, pol, dtype=np.int8))
                out_t.append(tc[ok])
        v = vn
    V[:] = v
    Vref[:] = ref
    last[:] = lst
    if out_i:
        idx = np.concatenate(out_i)
        pol = np.concatenate(out_p)
        tt = np.concatenate(out_t)
        order = np.lexsort((pol, idx, tt))
        return idx[order].astype(np.int64), pol[order], tt[order]
    return np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0)


def emit_tails(V, Vref, last, t_exit, t_stop, b, theta_n, refractory):
    """Analytic dark decay V(t) = V*exp(-2*pi*b*(t - t_exit)) with negative events.

    Updates V, Vref, last in place and returns (pixel index, time) arrays.
    """
    out_i, out_t = [], []
    rate = TWO_PI * b
    for k in range(V.size):
        v0 = V[k]
        ref = Vref[k]
        lst = last[k]
        te = t_exit[k]
        ts = t_stop[k]
        while True:
            level = ref - theta_n
            if level <= 0.0 or level >= v0:
                if level >= v0:
                    # already past the level: cannot happen for a consistent state
                    ref = level
                    continue
                break
            tc = te + math.log(v0 / level) / rate
            if tc > ts:
                break
            ref = level
            if tc - lst >= refractory:
                lst = tc
                out_i.append(k)
                out_t.append(tc)
        V[k] = v0 * math.exp(-rate * (ts - te))
        Vref[k] = ref
        last[k] = lst
    return np.asarray(out_i, dtype=np.int64), np.asarray(out_t, dtype=np.float64)
