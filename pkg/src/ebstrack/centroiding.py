"""Batch centroid estimators and the per-magnitude centroiding benchmark.

Estimators work in absolute pixel coordinates.  The MLE uses the positive
likelihood field from the pixel model as a template: event i at time t_i is
compared against a star at x0 + v * (t_i - t_mid), with x0 the star position
at the batch mid-time.
"""

import functools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateLikelihood, EmptyBatch
from .events import EventStream
from .pixel_model import (NOMINAL_PARAMS, OffsetCurve, PixelCircuitParams, StarSignal,
                          build_offset_curve, spatial_likelihood_field)

LIKELIHOOD_FLOOR = 1e-12
METHODS = ("mean_positive", "mean_all", "offset", "mle")
BENCH_HEADER = "mag,method,mean_abs_err_px,std_px,bias_along_px,n_batches"


@dataclass
class EventBatch:
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    t: np.ndarray
    window: tuple

    def __post_init__(self):
        if not self.window[1] > self.window[0]:
            raise ValueError("batch window must have positive length")

    def __len__(self):
        return int(self.t.size)

    @property
    def t_mid(self):
        """Window mid-time in seconds."""
        return 0.5 * (self.window[0] + self.window[1]) * 1e-6

    @classmethod
    def from_stream(cls, stream, t0=None, t1=None):
        if t0 is None:
            t0 = int(stream.t[0]) if len(stream) else 0
        if t1 is None:
            t1 = int(stream.t[-1]) + 1 if len(stream) else t0 + 1
        s = stream.time_slice(t0, t1)
        return cls(s.x.astype(float), s.y.astype(float), s.p, s.t, (t0, t1))

    def shifted(self, dx=0.0, dy=0.0, dt_us=0):
        return EventBatch(self.x + dx, self.y + dy, self.p, self.t + dt_us,
                          (self.window[0] + dt_us, self.window[1] + dt_us))


@dataclass
class CentroidEstimate:
    position: np.ndarray
    n_events: int
    method: str


def batch_events(stream, window_us, anchor=None):
    """Half-open windows [anchor + k*w, anchor + (k+1)*w) covering the stream.

    The anchor defaults to the stream's first timestamp.  Empty windows
    between events are included so batch k always starts at anchor + k*w.
    """
    if window_us <= 0:
        raise ValueError("window_us must be positive")
    if len(stream) == 0:
        return []
    t0 = int(stream.t[0]) if anchor is None else int(anchor)
    nb = int((int(stream.t[-1]) - t0) // window_us) + 1
    edges = t0 + window_us * np.arange(nb + 1, dtype=np.int64)
    cuts = np.searchsorted(stream.t, edges, side="left")
    out = []
    for k in range(nb):
        lo, hi = cuts[k], cuts[k + 1]
        out.append(EventBatch(stream.x[lo:hi].astype(float), stream.y[lo:hi].astype(float),
                              stream.p[lo:hi], stream.t[lo:hi], (int(edges[k]), int(edges[k + 1]))))
    return out


def centroid_mean_positive(batch):
    pos = batch.p > 0
    n = int(pos.sum())
    if n == 0:
        raise EmptyBatch("no positive events in batch")
    return CentroidEstimate(np.array([batch.x[pos].mean(), batch.y[pos].mean()]), n,
                            "mean_positive")


def centroid_mean_all(batch):
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    return CentroidEstimate(np.array([batch.x.mean(), batch.y.mean()]), len(batch), "mean_all")


def centroid_offset_corrected(batch, vbar, magnitude, curve):
    est = centroid_mean_positive(batch)
    vbar = np.asarray(vbar, dtype=float)
    z = float(curve(magnitude))
    return CentroidEstimate(est.position + vbar * z, est.n_events, "offset")


@functools.lru_cache(maxsize=64)
def _template(magnitude, sigma, vx, vy, params, grid_step):
    return spatial_likelihood_field(StarSignal(magnitude, sigma, (vx, vy)), params,
                                    grid_step=grid_step)


class _FieldLookup:
    """Bilinear lookup of a likelihood field, normalized to peak 1 and floored."""

    def __init__(self, fld):
        vals = fld.values / fld.values.max()
        self.vals = np.maximum(vals, LIKELIHOOD_FLOOR)
        self.log_vals = np.log(self.vals)
        self.a0 = fld.along[0]
        self.c0 = fld.cross[0]
        self.h = fld.step
        self.na = fld.along.size
        self.nc = fld.cross.size
        u = fld.direction
        self.ux, self.uy = float(u[0]), float(u[1])

    def values(self, dx, dy):
        along = dx * self.ux + dy * self.uy
        cross = -dx * self.uy + dy * self.ux
        fa = (along - self.a0) / self.h
        fc = (cross - self.c0) / self.h
        outside = (fa < 0) | (fa > self.na - 1) | (fc < 0) | (fc > self.nc - 1)
        fa = np.clip(fa, 0, self.na - 1 - 1e-9)
        fc = np.clip(fc, 0, self.nc - 1 - 1e-9)
        ia = fa.astype(np.int64)
        ic = fc.astype(np.int64)
        wa = fa - ia
        wc = fc - ic
        v = self.vals
        out = ((1 - wc) * ((1 - wa) * v[ic, ia] + wa * v[ic, ia + 1])
               + wc * ((1 - wa) * v[ic + 1, ia] + wa * v[ic + 1, ia + 1]))
        out[outside] = LIKELIHOOD_FLOOR
        return np.maximum(out, LIKELIHOOD_FLOOR)


def _mle_objective(lookup, ex, ey):
    def nll(x0, y0):
        return -float(np.sum(np.log(lookup.values(ex - x0, ey - y0))))
    return nll


def centroid_mle(batch, v, magnitude, psf_sigma, params=NOMINAL_PARAMS, grid_step=0.1,
                 return_details=False):
    """Maximum-likelihood star position at the batch mid-time."""
    from scipy.optimize import minimize

    pos = batch.p > 0
    n = int(pos.sum())
    if n < 3:
        raise EmptyBatch(f"MLE needs at least 3 positive events, got {n}")
    v = np.asarray(v, dtype=float)
    if not np.linalg.norm(v) > 0:
        raise ValueError("MLE needs a nonzero velocity")
    fld = _template(float(magnitude), float(psf_sigma), float(v[0]), float(v[1]), params,
                    float(grid_step))
    lookup = _lookup_for(fld)
    dt = batch.t[pos] * 1e-6 - batch.t_mid
    ex = batch.x[pos] - v[0] * dt
    ey = batch.y[pos] - v[1] * dt
    nll = _mle_objective(lookup, ex, ey)

    # coarse grid around the motion-compensated event mean
    cx, cy = ex.mean(), ey.mean()
    r = 4.0 * psf_sigma
    offs = np.arange(-r, r + 1e-9, 0.5)
    gx, gy = np.meshgrid(cx + offs, cy + offs)
    gx, gy = gx.ravel(), gy.ravel()
    scores = np.empty(gx.size)
    for chunk in range(0, gx.size, 256):
        sx = gx[chunk:chunk + 256]
        sy = gy[chunk:chunk + 256]
        vals = lookup.values(ex[None, :] - sx[:, None], ey[None, :] - sy[:, None])
        scores[chunk:chunk + 256] = -np.sum(np.log(vals), axis=1)
    k = int(np.argmin(scores))
    res = minimize(lambda z: nll(z[0], z[1]), np.array([gx[k], gy[k]]), method="Nelder-Mead",
                   options={"xatol": 1e-4, "fatol": 1e-9, "maxiter": 400,
                            "initial_simplex": np.array([[gx[k], gy[k]], [gx[k] + 0.25, gy[k]],
                                                         [gx[k], gy[k] + 0.25]])})
    best = res.x if res.fun <= scores[k] else np.array([gx[k], gy[k]])
    if np.all(lookup.values(ex - best[0], ey - best[1]) <= LIKELIHOOD_FLOOR):
        raise DegenerateLikelihood("every event falls outside the likelihood template")
    est = CentroidEstimate(np.asarray(best, dtype=float), n, "mle")
    if return_details:
        return est, lookup, ex, ey
    return est


_LOOKUPS = {}


def _lookup_for(fld):
    key = id(fld)
    lk = _LOOKUPS.get(key)
    if lk is None or lk[0] is not fld:
        lk = (fld, _FieldLookup(fld))
        _LOOKUPS[key] = lk
    return lk[1]


@dataclass
class BenchmarkConfig:
    """Single-star transit used to score centroid estimators.

    The star crosses a small sensor at constant image speed along +x.  The
    first ``settle_s`` seconds are skipped so every pixel near the star has
    seen its full rise, then ``n_batches`` windows are scored.
    """

    psf_sigma: float = 2.5
    speed_px_s: float = 35.0
    window_us: int = 1000
    n_batches: int = 200
    settle_s: float = 0.8
    width: int = 96
    height: int = 48
    focal_length_px: float = 7171.0
    start_x_px: float = -30.0
    circuit: PixelCircuitParams = NOMINAL_PARAMS
    threshold: float = 0.01
    refractory_us: float = 0.0
    jitter_us: float = 0.0
    background_rate_hz: float = 0.0
    seed: int = 1
    sim_dt: float = 1e-4


@dataclass
class BenchmarkRow:
    mag: float
    method: str
    mean_abs_err_px: float
    std_px: float
    bias_along_px: float
    n_batches: int


def _transit(cfg, magnitude, seed):
    from .catalog import StarCatalog
    from .geometry import CameraIntrinsics, quat_conjugate, quat_rotate
    from .simulator import SensorNoiseParams, SimulationSettings, simulate_events
    from .trajectory import gen_trajectory

    intr = CameraIntrinsics(cfg.focal_length_px, cfg.width, cfg.height)
    rate = math.degrees(cfg.speed_px_s / cfg.focal_length_px)
    duration = cfg.settle_s + cfg.n_batches * cfg.window_us * 1e-6 + 0.01
    traj = gen_trajectory("constant_slew", {"axis": "yaw", "rate_deg_s": rate}, duration)
    cam = np.array([cfg.start_x_px, 0.0, cfg.focal_length_px])
    d = quat_rotate(quat_conjugate(traj.q[0]), cam / np.linalg.norm(cam))
    cat = StarCatalog([1], d[None, :], [magnitude], cutoff=max(7.0, magnitude))
    noise = SensorNoiseParams(cfg.threshold, cfg.threshold, cfg.refractory_us, cfg.jitter_us,
                              cfg.background_rate_hz, seed)
    stream = simulate_events(cat, traj, intr, cfg.circuit, noise, cfg.psf_sigma,
                             settings=SimulationSettings(dt=cfg.sim_dt))
    return stream, traj, intr, d


def centroid_benchmark(cfg=BenchmarkConfig(), methods=METHODS, mag_grid=range(8), curve=None):
    """Score each method on simulated 1 ms batches for every magnitude."""
    from .geometry import project_directions, star_image_velocity

    rows = []
    mags = [float(m) for m in mag_grid]
    if curve is None and "offset" in methods:
        curve = build_offset_curve(cfg.circuit, sorted(set(mags)) if len(set(mags)) > 1
                                   else [mags[0], mags[0] + 1], cfg.speed_px_s, cfg.psf_sigma,
                                   normalize=False)
    for i, m in enumerate(mags):
        stream, traj, intr, d = _transit(cfg, m, cfg.seed + i)
        t0 = int(round(cfg.settle_s * 1e6))
        errs = {meth: [] for meth in methods}
        along = {meth: [] for meth in methods}
        for k in range(cfg.n_batches):
            w0 = t0 + k * cfg.window_us
            batch = EventBatch.from_stream(stream, w0, w0 + cfg.window_us)
            if int((batch.p > 0).sum()) < 3:
                continue
            q, omega = traj.at(batch.t_mid)
            xy, _ = project_directions(q, d[None, :], intr.focal_length_px)
            truth = xy[0] + np.array([intr.cx, intr.cy])
            vel = star_image_velocity(xy[0], intr.focal_length_px, omega)
            vbar = vel / np.linalg.norm(vel)
            for meth in methods:
                if meth == "mean_positive":
                    est = centroid_mean_positive(batch)
                elif meth == "mean_all":
                    est = centroid_mean_all(batch)
                elif meth == "offset":
                    est = centroid_offset_corrected(batch, vbar, m, curve)
                elif meth == "mle":
                    est = centroid_mle(batch, vel, m, cfg.psf_sigma, cfg.circuit)
                else:
                    raise ValueError(f"unknown method {meth!r}")
                e = est.position - truth
                errs[meth].append(float(np.hypot(e[0], e[1])))
                along[meth].append(float(e @ vbar))
        for meth in methods:
            a = np.asarray(errs[meth])
            rows.append(BenchmarkRow(m, meth, float(a.mean()) if a.size else float("nan"),
                                     float(a.std()) if a.size else float("nan"),
                                     float(np.mean(along[meth])) if a.size else float("nan"),
                                     int(a.size)))
    return rows


def write_benchmark_csv(rows, path):
    from .io_util import atomic_write_text

    lines = [BENCH_HEADER]
    for r in rows:
        lines.append(f"{r.mag!r},{r.method},{r.mean_abs_err_px!r},{r.std_px!r},"
                     f"{r.bias_along_px!r},{r.n_batches}")
    atomic_write_text(path, "\n".join(lines) + "\n")
