"""Manifold EKF attitude tracker driven by individual positive events.

State is (q, omega) with a 6x6 error covariance over (dtheta, domega), where
dtheta is a left perturbation of q.  Each event is predicted to, gated
against the nearest projected catalog star, shifted by the star's offset
correction and folded in as a 2-D pixel measurement of that star.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .catalog import fov_query, nearest_projected_star
from .events import EventStream
from .errors import (BehindCamera, ConfigError, InitFailure, NoSolution, SingularInnovation,
                     TimeReversal)
from .geometry import (MIN_DEPTH, exp_map, quat_multiply, quat_normalize,
                       quat_rotate, quat_to_matrix, skew, star_image_velocity)
from .io_util import atomic_write_text, format_float
from .lost_in_space import dbscan, plate_solve
from .pixel_model import OffsetCurve, OffsetTable

TRACK_HEADER = "t_us,qw,qx,qy,qz,wx,wy,wz,n_absorbed"
MAX_INNOVATION_COND = 1e12
I3 = np.eye(3)


@dataclass
class TrackerState:
    q: np.ndarray
    omega: np.ndarray
    P: np.ndarray
    t: int  # microseconds of validity

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        self.P = np.asarray(self.P, dtype=float)
        self.t = int(self.t)


@dataclass(frozen=True)
class StampedAttitude:
    t: int
    q: np.ndarray
    omega: np.ndarray
    n_events_absorbed: int


@dataclass
class TrackerConfig:
    spectral_density: float = 1e-3  # phi_s, rad^2/s^3
    psf_sigma: float = 2.0
    meas_noise: Optional[np.ndarray] = None  # default psf_sigma^2 * I
    gate_radius: Optional[float] = None  # default ceil(3 sigma + max|z|)
    # OffsetCurve (speed independent) or OffsetTable; None disables the correction
    offset_curve: Optional[object] = None
    heartbeat_us: int = 1000
    init_window_us: int = 60000
    init_max_prefix_us: int = 2000000
    init_attitude_var: float = 1e-4
    init_rate_var: float = 1e-2
    dbscan_eps: float = 2.0
    dbscan_min_samples: int = 3
    refresh_px: float = 0.5
    refresh_us: int = 10000
    fov_margin_px: float = 10.0
    chunk_us: int = 100000

    def __post_init__(self):
        if not self.spectral_density > 0:
            raise ConfigError("spectral_density must be positive")
        if not self.psf_sigma > 0:
            raise ConfigError("psf_sigma must be positive")
        R = self.R
        if R.shape != (2, 2) or not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0:
            raise ConfigError("meas_noise must be a symmetric positive definite 2x2 matrix")
        if not self.radius > 0:
            raise ConfigError("gate_radius must be positive")
        if self.heartbeat_us <= 0 or self.init_window_us <= 0 or self.chunk_us <= 0:
            raise ConfigError("periods must be positive")
        if self.offset_curve is not None and not isinstance(self.offset_curve, (OffsetCurve, OffsetTable)):
            raise ConfigError("offset_curve must be an OffsetCurve or OffsetTable")

    @property
    def R(self):
        if self.meas_noise is None:
            return self.psf_sigma ** 2 * np.eye(2)
        return np.asarray(self.meas_noise, dtype=float)

    @property
    def radius(self):
        if self.gate_radius is not None:
            return float(self.gate_radius)
        zmax = 0.0
        if self.offset_curve is not None:
            zmax = float(np.abs(self.offset_curve.offsets).max())
        return float(math.ceil(3.0 * self.psf_sigma + zmax))

    @property
    def table(self):
        c = self.offset_curve
        if c is None:
            return OffsetTable(np.array([0.0]), np.array([1.0]), np.zeros((1, 1)))
        return OffsetTable.from_curve(c) if isinstance(c, OffsetCurve) else c


def offset_shift(v, zrow, speeds):
    """Pixel shift from an event to the star: unit image velocity times z(m, |v|)."""
    speed = math.hypot(v[0], v[1])
    if speed <= 0.0:
        return np.zeros(2)
    z = float(np.interp(speed, speeds, zrow))
    return np.array([v[0], v[1]]) * (z / speed)


def initial_covariance(config):
    return np.diag([config.init_attitude_var] * 3 + [config.init_rate_var] * 3)


# --- EKF primitives --------------------------------------------------------

def transition_matrix(omega, dt):
    F = np.eye(6)
    F[:3, :3] += skew(dt * np.asarray(omega))
    F[:3, 3:] = dt * I3 + 0.5 * dt * dt * skew(omega)
    return F


def process_noise(dt, phi_s):
    """Discrete process noise for white angular acceleration of density phi_s.

    The Dt^3/3 attitude block keeps Q positive semidefinite; without it the
    matrix is indefinite.
    """
    Q = np.zeros((6, 6))
    Q[:3, :3] = dt ** 3 / 3.0 * I3
    Q[:3, 3:] = 0.5 * dt * dt * I3
    Q[3:, :3] = 0.5 * dt * dt * I3
    Q[3:, 3:] = dt * I3
    return phi_s * Q


def ekf_predict(ts, t_new, phi_s):
    t_new = int(t_new)
    if t_new < ts.t:
        raise TimeReversal(f"predict from {ts.t} to {t_new} us")
    dt = (t_new - ts.t) * 1e-6
    q = quat_normalize(quat_multiply(exp_map(dt * ts.omega), ts.q))
    F = transition_matrix(ts.omega, dt)
    P = F @ ts.P @ F.T + process_noise(dt, phi_s)
    return TrackerState(q, ts.omega.copy(), P, t_new)


def _projection_and_jacobian(q, star, f):
    X, Y, Z = quat_rotate(q, star)
    if Z <= MIN_DEPTH:
        raise BehindCamera(f"rotated depth {Z:.3g}")
    h = np.array([f * X / Z, f * Y / Z])
    H = np.zeros((2, 6))
    H[0, :3] = f / Z * np.array([-X * Y / Z, Z + X * X / Z, -Y])
    H[1, :3] = f / Z * np.array([-Z - Y * Y / Z, X * Y / Z, X])
    return h, H


def measurement_jacobian(state, star, f):
    """2x6 Jacobian of the projected star with respect to the error state.

    ``state`` is a TrackerState or a bare quaternion.
    """
    q = state.q if isinstance(state, TrackerState) else np.asarray(state, dtype=float)
    return _projection_and_jacobian(q, np.asarray(star, dtype=float), f)[1]


def _innovation_cond(S):
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 0:
        return math.inf
    return ev[1] / ev[0]


def ekf_update(ts, z, star, f, R):
    h, H = _projection_and_jacobian(ts.q, np.asarray(star, dtype=float), f)
    y = np.asarray(z, dtype=float) - h
    PHt = ts.P @ H.T
    S = H @ PHt + R
    if _innovation_cond(S) > MAX_INNOVATION_COND:
        raise SingularInnovation("innovation covariance is ill conditioned")
    K = PHt @ np.linalg.inv(S)
    d = K @ y
    q = quat_normalize(quat_multiply(exp_map(d[:3]), ts.q))
    P = (np.eye(6) - K @ H) @ ts.P
    P = 0.5 * (P + P.T)
    return TrackerState(q, ts.omega + d[3:], P, ts.t)


def process_event(ts, e, catalog_projections, config, f):
    """One step of the per-event loop. Returns (state, absorbed).

    ``catalog_projections`` is a list of (CatalogStar, relative pixel point)
    and the event carries relative pixel coordinates.
    """
    ts = ekf_predict(ts, e.t, config.spectral_density)
    p = np.array([float(e.x), float(e.y)])
    hit = nearest_projected_star(p, catalog_projections, config.radius)
    if hit is None:
        return ts, False
    star = hit[0]
    h, _ = _projection_and_jacobian(ts.q, star.direction, f)
    v = star_image_velocity(h, f, ts.omega)
    tab = config.table
    shift = offset_shift(v, tab.rows(star.magnitude), tab.speeds)
    return ekf_update(ts, p + shift, star.direction, f, config.R), True


# --- initialization --------------------------------------------------------

def cluster_centroids(stream, intr, eps=2.0, min_samples=3):
    """Means (relative pixels) of DBSCAN clusters of positive events, largest first."""
    pos = stream.positives()
    if len(pos) == 0:
        return np.zeros((0, 2)), np.zeros(0, np.int64)
    key = pos.y.astype(np.int64) * stream.width + pos.x
    uniq, counts = np.unique(key, return_counts=True)
    pts = np.column_stack([uniq % stream.width, uniq // stream.width]).astype(float)
    labels = dbscan(pts, eps, min_samples, weights=counts).labels
    out, sizes = [], []
    for c in range(int(labels.max()) + 1 if labels.size else 0):
        m = labels == c
        w = counts[m]
        out.append((pts[m] * w[:, None]).sum(axis=0) / w.sum())
        sizes.append(int(w.sum()))
    if not out:
        return np.zeros((0, 2)), np.zeros(0, np.int64)
    out = np.array(out)
    sizes = np.array(sizes)
    order = np.argsort(-sizes, kind="stable")
    rel = out[order] - np.array([intr.cx, intr.cy])
    return rel, sizes[order]


def init_attitude(stream, catalog, intr, config=None):
    """Lost-in-space initialization from the first usable window of events."""
    config = config or TrackerConfig()
    if len(stream) == 0:
        raise InitFailure("empty event stream")
    t0 = int(stream.t[0])
    W = int(config.init_window_us)
    start = t0
    last_err = None
    while start < t0 + config.init_max_prefix_us:
        window = stream.time_slice(start, start + W)
        cents, _ = cluster_centroids(window, intr, config.dbscan_eps, config.dbscan_min_samples)
        try:
            sol = plate_solve(cents, catalog, intr)
        except NoSolution as exc:
            last_err = exc
            start += W
            continue
        return TrackerState(sol.q, np.zeros(3), initial_covariance(config), start + W // 2)
    raise InitFailure(f"no plate solution within {config.init_max_prefix_us} us ({last_err})")


# --- tracking loop ---------------------------------------------------------

@dataclass
class TrackResult:
    t_us: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    n_absorbed: np.ndarray
    init_state: Optional[TrackerState] = None
    final_state: Optional[TrackerState] = None
    n_events: int = 0

    def __len__(self):
        return len(self.t_us)

    def __getitem__(self, i):
        return StampedAttitude(int(self.t_us[i]), self.q[i], self.omega[i], int(self.n_absorbed[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


class _LoopState:
    """Mutable filter state shared with the event-loop kernels."""

    def __init__(self, ts, n_cand):
        self.q = ts.q.astype(float).copy()
        self.w = ts.omega.astype(float).copy()
        self.P = np.ascontiguousarray(ts.P, dtype=float).ravel().copy()
        self.t = np.array([ts.t], dtype=np.int64)
        self.count = np.zeros(1, dtype=np.int64)  # absorbed since last heartbeat
        self.rq = self.q.copy()
        self.rt = np.array([ts.t], dtype=np.int64)

    def state(self):
        return TrackerState(self.q.copy(), self.w.copy(), self.P.reshape(6, 6).copy(), int(self.t[0]))


def _py_track_chunk(ex, ey, et, hb_t, dirs, ztab, speeds, ls, params):
    """Reference event loop built from the public EKF primitives."""
    f, cx, cy, W, H, margin, phi, R, radius, refresh_px, refresh_us = params
    n_hb = len(hb_t)
    hb_out = np.zeros((n_hb, 7))
    hb_n = np.zeros(n_hb, np.int64)
    ts = ls.state()
    K = len(dirs)
    proj = np.zeros((K, 2))
    valid = np.zeros(K, bool)

    def refresh(q):
        c = quat_rotate(q, dirs) if K else np.zeros((0, 3))
        ok = c[:, 2] > MIN_DEPTH
        proj[:] = 0.0
        proj[ok, 0] = f * c[ok, 0] / c[ok, 2]
        proj[ok, 1] = f * c[ok, 1] / c[ok, 2]
        u = proj[:, 0] + cx
        v = proj[:, 1] + cy
        valid[:] = ok & (u >= -0.5 - margin) & (u < W - 0.5 + margin) \
            & (v >= -0.5 - margin) & (v < H - 0.5 + margin)

    refresh(ls.rq)
    r2 = radius * radius
    j = 0

    def emit(ts):
        nonlocal j
        hb_out[j, :4] = ts.q
        hb_out[j, 4:] = ts.omega
        hb_n[j] = ls.count[0]
        ls.count[0] = 0
        j += 1

    for i in range(len(et)):
        t = int(et[i])
        while j < n_hb and hb_t[j] <= t:
            ts = ekf_predict(ts, int(hb_t[j]), phi)
            emit(ts)
        ts = ekf_predict(ts, t, phi)
        Rm = quat_to_matrix(ts.q)
        Rr = quat_to_matrix(ls.rq)
        moved = np.linalg.norm(np.cross(Rm[2], Rr[2])) * f
        if t - ls.rt[0] >= refresh_us or moved > refresh_px:
            refresh(ts.q)
            ls.rq = ts.q.copy()
            ls.rt[0] = t
        x = ex[i] - cx
        y = ey[i] - cy
        best, bd = -1, math.inf
        for k in range(K):
            if not valid[k]:
                continue
            d2 = (proj[k, 0] - x) ** 2 + (proj[k, 1] - y) ** 2
            if d2 < bd:
                best, bd = k, d2
        if best < 0 or bd > r2:
            continue
        try:
            h, _ = _projection_and_jacobian(ts.q, dirs[best], f)
        except BehindCamera:
            continue
        v = star_image_velocity(h, f, ts.omega)
        z = np.array([x, y]) + offset_shift(v, ztab[best], speeds)
        ts = ekf_update(ts, z, dirs[best], f, R)
        ls.count[0] += 1
    while j < n_hb:
        ts = ekf_predict(ts, int(hb_t[j]), phi)
        emit(ts)
    ls.q[:] = ts.q
    ls.w[:] = ts.omega
    ls.P[:] = ts.P.ravel()
    ls.t[0] = ts.t
    return hb_out, hb_n


def _run_chunk(kern, ex, ey, et, hb_t, dirs, ztab, speeds, ls, params):
    if kern is None:
        return _py_track_chunk(ex, ey, et, hb_t, dirs, ztab, speeds, ls, params)
    f, cx, cy, W, H, margin, phi, R, radius, refresh_px, refresh_us = params
    hb_out, hb_n, err = kern.track_chunk(
        ex, ey, et, hb_t, dirs, ztab, speeds, ls.q, ls.w, ls.P, ls.t, ls.count, ls.rq, ls.rt,
        f, cx, cy, W, H, margin, phi, R[0, 0], R[0, 1], R[1, 1], radius, refresh_px, refresh_us)
    if err == 1:
        raise TimeReversal("event timestamps decrease")
    if err == 2:
        raise SingularInnovation("innovation covariance is ill conditioned")
    return hb_out, hb_n


class Tracker:
    """Incremental tracker: feed consecutive event streams, collect heartbeats.

    One instance processes one stream strictly in order.  Until the filter is
    initialized, positive events are buffered and initialization is retried
    on the buffered prefix.
    """

    def __init__(self, catalog, intr, config=None, init_state=None, backend=None):
        self.catalog = catalog
        self.intr = intr
        self.config = config or TrackerConfig()
        kmod = _kernels.get_backend(backend)
        self._kern = kmod if hasattr(kmod, "track_chunk") else None
        self._pending = []
        self.init_state = None
        self.ls = None
        self.next_hb = None
        self.n_events = 0
        self._q, self._n, self._t = [], [], []
        c = self.config
        self._params = (intr.focal_length_px, intr.cx, intr.cy, intr.width, intr.height,
                        c.fov_margin_px, c.spectral_density, c.R, c.radius, c.refresh_px,
                        c.refresh_us)
        self._table = c.table
        self._speeds = np.ascontiguousarray(self._table.speeds, dtype=float)
        if init_state is not None:
            self._start(init_state)

    def _start(self, ts0):
        self.init_state = ts0
        self.ls = _LoopState(ts0, 0)
        self.next_hb = ts0.t

    def _try_init(self, stream):
        self._pending.append(stream.positives())
        buf = EventStream.concatenate(self._pending) if len(self._pending) > 1 else self._pending[0]
        self._pending = [buf]
        if len(buf) == 0:
            return None
        try:
            ts0 = init_attitude(buf, self.catalog, self.intr, self.config)
        except InitFailure:
            if buf.duration_us >= self.config.init_max_prefix_us:
                raise
            return None
        self._pending = []
        self._start(ts0)
        return buf

    def feed(self, stream):
        """Process a stream segment; returns the number of heartbeats emitted."""
        if self.ls is None:
            stream = self._try_init(stream)
            if stream is None:
                return 0
        pos = stream.positives()
        first = int(np.searchsorted(pos.t, self.ls.t[0], side="left"))
        ex = pos.x[first:].astype(np.float64)
        ey = pos.y[first:].astype(np.float64)
        et = pos.t[first:].astype(np.int64)
        self.n_events += len(et)
        if len(et) and np.any(np.diff(et) < 0):
            raise TimeReversal("event timestamps decrease")
        c = self.config
        f = self.intr.focal_length_px
        ls = self.ls
        emitted = 0
        lo = 0
        while lo < len(et):
            stop = int(et[lo]) + int(c.chunk_us)
            hi = int(np.searchsorted(et, stop, side="left"))
            t_last = int(et[hi - 1])
            n_hb = (t_last - self.next_hb) // c.heartbeat_us + 1 if t_last >= self.next_hb else 0
            hb = self.next_hb + c.heartbeat_us * np.arange(max(n_hb, 0), dtype=np.int64)
            # candidate stars: anything that could enter the frame during the chunk
            speed = float(np.linalg.norm(ls.w))
            extra = (1.5 * speed * (t_last - int(et[lo]) + c.refresh_us) * 1e-6 + 0.01) * f
            idx, _ = fov_query(ls.q, self.intr, self.catalog, c.fov_margin_px + extra)
            idx = np.sort(idx)
            dirs = np.ascontiguousarray(self.catalog.directions[idx])
            ztab = np.ascontiguousarray(self._table.rows(self.catalog.mags[idx]),
                                        dtype=float).reshape(len(idx), -1)
            # projections restart from the last refresh attitude, so results do not
            # depend on where chunk (or feed) boundaries fall
            hb_out, hb_n = _run_chunk(self._kern, ex[lo:hi], ey[lo:hi], et[lo:hi], hb,
                                      dirs, ztab, self._speeds, ls, self._params)
            self._t.append(hb)
            self._q.append(hb_out)
            self._n.append(hb_n)
            emitted += len(hb)
            if len(hb):
                self.next_hb = int(hb[-1]) + c.heartbeat_us
            lo = hi
        return emitted

    def result(self):
        if self.ls is None:
            raise InitFailure("tracker never initialized")
        t = np.concatenate(self._t) if self._t else np.zeros(0, np.int64)
        qw = np.concatenate(self._q) if self._q else np.zeros((0, 7))
        n = np.concatenate(self._n) if self._n else np.zeros(0, np.int64)
        return TrackResult(t, qw[:, :4], qw[:, 4:], n, self.init_state, self.ls.state(),
                           self.n_events)


def track(stream, catalog, intr, config=None, init_state=None, backend=None):
    """Track attitude over ``stream``; heartbeats start at the init time."""
    if len(stream) == 0:
        raise InitFailure("empty event stream")
    tr = Tracker(catalog, intr, config, init_state, backend)
    tr.feed(stream)
    if tr.ls is None:
        raise InitFailure("no plate solution in the available prefix")
    return tr.result()


def write_track(result, path):
    lines = [TRACK_HEADER]
    for t, q, w, n in zip(result.t_us, result.q, result.omega, result.n_absorbed):
        vals = [format_float(v) for v in list(q) + list(w)]
        lines.append(f"{int(t)}," + ",".join(vals) + f",{int(n)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_track(path):
    from .trajectory import read_truth

    traj, extra = read_truth(path, header=TRACK_HEADER, extra_cols=1)
    return TrackResult(traj.t_us, traj.q, traj.omega, extra[:, 0].astype(np.int64))
