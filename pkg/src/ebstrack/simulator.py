"""Deterministic event-stream synthesis from a catalog, a trajectory and the pixel model.

Pixels inside a tube of ``tube_sigmas * psf_sigma`` around each star's image
path are integrated block by block with RK4 on the half-step photocurrent
grid.  A positive event fires when V - V_ref reaches theta_p and a negative
one when V_ref - V reaches theta_n; the crossing time is interpolated inside
the step and the reference moves to the crossed level (so it equals V at that
instant).  Crossings inside the refractory window are not emitted but still
move the reference.  When a pixel leaves every tube its voltage decays in
the dark at the floor bandwidth b, which is solved in closed form.

Timestamp jitter and background noise come from one seeded generator, drawn
in canonical event order so output does not depend on the kernel backend's
internal ordering.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .events import EventStream
from .geometry import quat_to_matrix, quats_to_matrices
from .pixel_model import NOMINAL_PARAMS, PixelCircuitParams, peak_intensity

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SensorNoiseParams:
    threshold_pos: float = 0.05
    threshold_neg: float = 0.05
    refractory_us: float = 100.0
    timestamp_jitter_us: float = 100.0
    background_rate_hz: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (self.threshold_pos > 0 and self.threshold_neg > 0):
            raise ValueError("thresholds must be positive")
        if self.refractory_us < 0 or self.timestamp_jitter_us < 0 or self.background_rate_hz < 0:
            raise ValueError("noise rates and windows must be non-negative")


@dataclass(frozen=True)
class SimulationSettings:
    dt: float = 1e-4
    tube_sigmas: float = 4.0
    # widen the tube for bright stars until the PSF drops below this intensity
    tube_intensity_floor: float = 1e-3
    max_block_steps: int = 200
    block_motion_px: float = 4.0


def _star_paths(catalog, traj, intr, t_half, margin):
    """Absolute pixel positions of candidate stars at the given times.

    Returns (catalog indices, positions (n_star, len(t_half), 2)).
    """
    qs, _ = traj.at_many(t_half)
    f = intr.focal_length_px
    # candidate filter on the middle attitude with a generous angular margin
    corner = math.hypot(intr.width / 2 + margin, intr.height / 2 + margin)
    cos_lim = math.cos(min(math.atan(corner / f) * 1.05 + 1e-4, math.pi / 2))
    bore = quat_to_matrix(qs[len(qs) // 2])[2]
    cand = np.nonzero(catalog.directions @ bore > cos_lim)[0]
    if cand.size == 0:
        return cand, np.zeros((0, len(t_half), 2))
    mats = quats_to_matrices(qs)
    c = np.einsum("kij,nj->nki", mats, catalog.directions[cand])
    Z = c[..., 2]
    ok = np.all(Z > 1e-6, axis=1)
    cand, c, Z = cand[ok], c[ok], Z[ok]
    pos = np.empty(c.shape[:2] + (2,))
    pos[..., 0] = f * c[..., 0] / Z + intr.cx
    pos[..., 1] = f * c[..., 1] / Z + intr.cy
    inside = np.any((pos[..., 0] > -margin) & (pos[..., 0] < intr.width - 1 + margin)
                    & (pos[..., 1] > -margin) & (pos[..., 1] < intr.height - 1 + margin), axis=1)
    return cand[inside], pos[inside]


def _tube_pixels(path, radius, width, height):
    """Pixels within ``radius`` of the polyline through ``path`` (m, 2)."""
    lo = np.floor(path.min(axis=0) - radius).astype(int)
    hi = np.ceil(path.max(axis=0) + radius).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0], width - 1), min(hi[1], height - 1)
    if x1 < x0 or y1 < y0:
        return np.zeros(0, np.int64)
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    gx = gx.ravel().astype(float)
    gy = gy.ravel().astype(float)
    step = max(1, (len(path) - 1) // 8)
    verts = path[::step]
    if (len(path) - 1) % step:
        verts = np.vstack([verts, path[-1]])
    best = np.full(gx.size, np.inf)
    if len(verts) == 1:
        best = (gx - verts[0, 0]) ** 2 + (gy - verts[0, 1]) ** 2
    for a, b in zip(verts[:-1], verts[1:]):
        d = b - a
        L2 = float(d @ d)
        if L2 > 0:
            u = np.clip(((gx - a[0]) * d[0] + (gy - a[1]) * d[1]) / L2, 0.0, 1.0)
        else:
            u = 0.0
        px = a[0] + u * d[0] - gx
        py = a[1] + u * d[1] - gy
        best = np.minimum(best, px * px + py * py)
    keep = best <= radius * radius
    return (gy[keep].astype(np.int64) * width + gx[keep].astype(np.int64))


def simulate_events(catalog, traj, intrinsics, circuit=NOMINAL_PARAMS, noise=SensorNoiseParams(),
                    psf_sigma=2.0, t_span=None, settings=SimulationSettings(), backend=None,
                    return_clean=False, carry=None):
    """Simulate the event stream seen by the camera along ``traj``.

    ``carry`` is an optional dict holding per-pixel circuit state.  Passing
    the same dict to consecutive, abutting ``t_span`` segments continues the
    pixel physics across segment boundaries, so long runs can be produced
    piecewise without holding the whole stream in memory.  Jitter and
    background are drawn per segment from ``noise.seed``.
    """
    kern = _kernels.get_backend(backend)
    W, H = intrinsics.width, intrinsics.height
    t_start, t_end = (traj.t0, traj.t1) if t_span is None else map(float, t_span)
    radius = settings.tube_sigmas * psf_sigma
    a, b, I0 = circuit.a, circuit.b, circuit.I0
    thp, thn = noise.threshold_pos, noise.threshold_neg
    refr = noise.refractory_us * 1e-6

    # keep RK4 stable for the brightest star in the catalog
    dt = settings.dt
    if len(catalog):
        it_max = math.log(float(peak_intensity(catalog.mags.min())) / I0 + 1.0)
        lam = TWO_PI * (b + a * it_max)
        if lam * dt > 2.0:
            dt = 2.0 / lam

    npx = W * H
    if carry:
        V, Vref, last = carry["V"], carry["Vref"], carry["last"]
        state, t_exit, active = carry["state"], carry["t_exit"], carry["active"]
    else:
        V = np.zeros(npx)
        Vref = np.zeros(npx)
        last = np.full(npx, -np.inf)
        state = np.zeros(npx, np.int8)  # 0 never active, 1 active, 2 decaying in the dark
        t_exit = np.zeros(npx)
        active = np.zeros(0, np.int64)

    ev_pix, ev_pol, ev_t = [], [], []

    def tails(pix, t_stop):
        if pix.size == 0:
            return
        v, r, l = V[pix].copy(), Vref[pix].copy(), last[pix].copy()
        ti, tt = kern.emit_tails(v, r, l, t_exit[pix].copy(), np.full(pix.size, t_stop), b, thn, refr)
        V[pix], Vref[pix], last[pix] = v, r, l
        if ti.size:
            ev_pix.append(pix[ti])
            ev_pol.append(np.full(ti.size, -1, np.int8))
            ev_t.append(tt)

    total_steps = int(round((t_end - t_start) / dt))
    done = 0
    peaks = peak_intensity(catalog.mags) if len(catalog) else np.zeros(0)
    f = intrinsics.focal_length_px
    rmax = math.hypot(W / 2, H / 2)
    radii = np.full(len(catalog), radius)
    if settings.tube_intensity_floor > 0 and len(catalog):
        ratio = np.maximum(peaks / (settings.tube_intensity_floor * I0), 1.0)
        radii = np.maximum(radius, psf_sigma * np.sqrt(2.0 * np.log(ratio)))
    while done < total_steps:
        T0 = t_start + done * dt
        _, w0 = traj.at(T0)
        speed = f * math.hypot(w0[0], w0[1]) + abs(w0[2]) * rmax + 1e-9
        nb = int(settings.block_motion_px / (speed * dt))
        nb = max(10, min(settings.max_block_steps, nb, total_steps - done))
        nb = min(nb, total_steps - done)
        t_half = T0 + 0.5 * dt * np.arange(2 * nb + 1)
        cand, pos = _star_paths(catalog, traj, intrinsics, t_half,
                                (radii.max() if len(catalog) else radius) + 2)

        pix_lists, star_lists = [], []
        for s in range(len(cand)):
            pix = _tube_pixels(pos[s], radii[cand[s]], W, H)
            pix_lists.append(pix)
            star_lists.append(np.full(pix.size, s, np.int32))
        if pix_lists:
            allp = np.concatenate(pix_lists)
            alls = np.concatenate(star_lists)
        else:
            allp = np.zeros(0, np.int64)
            alls = np.zeros(0, np.int32)
        order = np.lexsort((alls, allp))
        allp, alls = allp[order], alls[order]
        uniq, start_idx = np.unique(allp, return_index=True)
        ptr = np.append(start_idx, allp.size).astype(np.int64)

        # pixels leaving every tube start decaying in the dark
        gone = np.setdiff1d(active, uniq, assume_unique=True)
        state[gone] = 2
        t_exit[gone] = T0

        # pixels (re)entering
        st = state[uniq]
        back = uniq[st == 2]
        tails(back, T0)
        fresh = uniq[st == 0]
        px = (uniq % W).astype(float)
        py = (uniq // W).astype(float)
        if fresh.size:
            sel = st == 0
            sub_ptr_counts = np.diff(ptr)[sel]
            sub_ptr = np.concatenate(([0], np.cumsum(sub_ptr_counts))).astype(np.int64)
            sub_star = np.concatenate([alls[ptr[i]:ptr[i + 1]] for i in np.nonzero(sel)[0]])
            it0 = _kernels.python_backend._block_itilde(
                px[sel], py[sel], sub_ptr, sub_star, pos[:, :1, :], peaks[cand], psf_sigma, I0)[:, 0]
            V[fresh] = it0
            Vref[fresh] = it0
        state[uniq] = 1

        if uniq.size:
            v = V[uniq].copy()
            r = Vref[uniq].copy()
            l = last[uniq].copy()
            pi, pp, pt = kern.emit_block(px, py, ptr, alls, np.ascontiguousarray(pos),
                                         peaks[cand].astype(float), psf_sigma, I0, a, b, T0, dt,
                                         nb, thp, thn, refr, v, r, l)
            V[uniq], Vref[uniq], last[uniq] = v, r, l
            if pi.size:
                ev_pix.append(uniq[pi])
                ev_pol.append(pp.astype(np.int8))
                ev_t.append(pt)
        active = uniq
        done += nb

    t_final = t_start + total_steps * dt
    state[active] = 2
    t_exit[active] = t_final
    dark = np.nonzero(state == 2)[0]
    dark = dark[t_exit[dark] < t_final]
    tails(dark, t_final)
    t_exit[dark] = t_final  # voltages now hold their decayed value at t_final
    if carry is not None:
        carry.update(V=V, Vref=Vref, last=last, state=state, t_exit=t_exit,
                     active=np.zeros(0, np.int64))

    if ev_t:
        pix = np.concatenate(ev_pix)
        pol = np.concatenate(ev_pol)
        tt = np.concatenate(ev_t)
    else:
        pix = np.zeros(0, np.int64)
        pol = np.zeros(0, np.int8)
        tt = np.zeros(0)
    x = (pix % W).astype(np.int32)
    y = (pix // W).astype(np.int32)
    order = np.lexsort((pol, x, y, tt))
    x, y, pol, tt = x[order], y[order], pol[order], tt[order]

    rng = np.random.default_rng(noise.seed)
    if noise.timestamp_jitter_us > 0 and tt.size:
        tt = tt + rng.normal(0.0, noise.timestamp_jitter_us * 1e-6, tt.size)
    t_lo_us = int(math.ceil(t_start * 1e6 - 1e-6))
    t_hi_us = int(math.floor(t_final * 1e6 + 1e-6))
    tu = np.clip(np.rint(tt * 1e6), max(t_lo_us, 0), t_hi_us).astype(np.int64)
    clean = EventStream(x, y, pol, tu, W, H)

    n_bg = rng.poisson(noise.background_rate_hz * W * H * max(t_final - t_start, 0.0))
    if n_bg:
        bx = rng.integers(0, W, n_bg)
        by = rng.integers(0, H, n_bg)
        bt = rng.integers(max(t_lo_us, 0), t_hi_us + 1, n_bg)
        bp = np.where(rng.random(n_bg) < 0.5, 1, -1)
        stream = EventStream(np.concatenate([clean.x, bx]), np.concatenate([clean.y, by]),
                             np.concatenate([clean.p, bp]), np.concatenate([clean.t, bt]), W, H)
    else:
        stream = clean
    if return_clean:
        return stream, clean
    return stream


def segment_seed(seed, k):
    """Noise seed for segment k, derived deterministically from the run seed."""
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def simulate_segments(catalog, traj, intrinsics, circuit=NOMINAL_PARAMS, noise=SensorNoiseParams(),
                      psf_sigma=2.0, t_span=None, segment_s=2.0, settings=SimulationSettings(),
                      backend=None):
    """Yield the stream in canonical, time-ordered segments of ``segment_s`` seconds.

    Pixel state carries across segments.  Events stamped exactly on a segment
    boundary are held back and merged into the next segment so the
    concatenation of all segments is canonically ordered.
    """
    if not segment_s > 0:
        raise ValueError("segment_s must be positive")
    t_start, t_end = (traj.t0, traj.t1) if t_span is None else map(float, t_span)
    n = max(1, int(math.ceil((t_end - t_start) / segment_s - 1e-9)))
    carry = {}
    held = None
    for k in range(n):
        a = t_start + k * segment_s
        b = t_end if k == n - 1 else t_start + (k + 1) * segment_s
        seg_noise = dataclasses.replace(noise, seed=segment_seed(noise.seed, k))
        s = simulate_events(catalog, traj, intrinsics, circuit, seg_noise, psf_sigma, (a, b),
                            settings, backend, carry=carry)
        if held is not None and len(held):
            s = EventStream.concatenate([held, s])
        if k < n - 1:
            cut = int(np.searchsorted(s.t, int(round(b * 1e6)), side="left"))
            held = s[cut:]
            s = s[:cut]
        yield s
