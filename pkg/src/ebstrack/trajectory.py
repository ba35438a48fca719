"""Camera trajectories: profile generators, interpolation and truth CSV I/O.

A trajectory stores world-to-camera quaternions and the camera-frame angular
velocity omega with q(t + h) = exp(h * omega) * q(t).  Profiles are defined by
omega(t) and integrated from a start attitude with fine exponential steps.

Rotation axis names: ``pitch`` is camera x (stars move along image y),
``yaw`` is camera y (stars move along image x), ``roll`` is the boresight.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UnknownProfile
from .geometry import (CelestialAttitude, celestial_to_quat, exp_map, quat_multiply,
                       quat_normalize, slerp)
from .io_util import atomic_write_text

TRUTH_HEADER = "t_us,qw,qx,qy,qz,wx,wy,wz"
DEG = math.pi / 180.0
AXES = {"pitch": (1.0, 0.0, 0.0), "yaw": (0.0, 1.0, 0.0), "roll": (0.0, 0.0, 1.0)}


@dataclass
class Trajectory:
    t_us: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        self.t_us = np.asarray(self.t_us, dtype=np.int64)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        self.omega = np.asarray(self.omega, dtype=float).reshape(-1, 3)
        if not (len(self.t_us) == len(self.q) == len(self.omega)) or len(self.t_us) == 0:
            raise ValueError("trajectory columns must be nonempty and equal length")
        if np.any(np.diff(self.t_us) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t_us)

    @property
    def t0(self):
        return self.t_us[0] * 1e-6

    @property
    def t1(self):
        return self.t_us[-1] * 1e-6

    def at(self, t):
        """(q, omega) at time t seconds; slerp for q, linear for omega, clamped."""
        tu = t * 1e6
        k = int(np.searchsorted(self.t_us, tu, side="right")) - 1
        if k < 0:
            return self.q[0].copy(), self.omega[0].copy()
        if k >= len(self.t_us) - 1:
            return self.q[-1].copy(), self.omega[-1].copy()
        u = (tu - self.t_us[k]) / (self.t_us[k + 1] - self.t_us[k])
        q = slerp(self.q[k], self.q[k + 1], u)
        w = (1 - u) * self.omega[k] + u * self.omega[k + 1]
        return quat_normalize(q), w

    def at_many(self, t):
        """Vectorized ``at`` for an array of times in seconds."""
        tu = np.asarray(t, dtype=float).ravel() * 1e6
        n = len(self.t_us)
        k = np.clip(np.searchsorted(self.t_us, tu, side="right") - 1, 0, max(n - 2, 0))
        if n == 1:
            return np.repeat(self.q, tu.size, 0), np.repeat(self.omega, tu.size, 0)
        t0 = self.t_us[k].astype(float)
        t1 = self.t_us[k + 1].astype(float)
        u = np.clip((tu - t0) / (t1 - t0), 0.0, 1.0)
        q0 = self.q[k]
        q1 = self.q[k + 1].copy()
        d = np.sum(q0 * q1, axis=1)
        flip = d < 0
        q1[flip] *= -1
        d = np.abs(d)
        th = np.arccos(np.minimum(d, 1.0))
        s = np.sin(th)
        small = s < 1e-9
        s_safe = np.where(small, 1.0, s)
        w0 = np.where(small, 1 - u, np.sin((1 - u) * th) / s_safe)
        w1 = np.where(small, u, np.sin(u * th) / s_safe)
        q = w0[:, None] * q0 + w1[:, None] * q1
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        w = (1 - u)[:, None] * self.omega[k] + u[:, None] * self.omega[k + 1]
        return q, w


def _rate_fn(profile, p, duration):
    if profile == "constant_slew":
        axis = _axis(p.get("axis", "pitch"))
        rate = float(p.get("rate_deg_s", 1.0)) * DEG
        return lambda t: rate * axis

    if profile == "velocity_sweep":
        vmax = float(p.get("max_rate_deg_s", 1.8)) * DEG
        vmin = float(p.get("min_rate_deg_s", 0.1)) * DEG
        ang = float(p.get("direction_deg", 30.0)) * DEG
        period = float(p.get("period_s", duration))
        axis = np.array([math.cos(ang), math.sin(ang), 0.0])
        roll = float(p.get("roll_rate_deg_s", 0.0)) * DEG

        def f(t):
            s = abs(math.sin(math.pi * t / period))
            w = (vmin + (vmax - vmin) * s) * axis
            w[2] = roll
            return w
        return f

    if profile == "high_velocity":
        vmax = float(p.get("max_rate_deg_s", 7.5)) * DEG
        vmin = float(p.get("min_rate_deg_s", 0.5)) * DEG
        ramp = float(p.get("ramp_s", 10.0))
        ang = float(p.get("direction_deg", 45.0)) * DEG
        axis = np.array([math.cos(ang), math.sin(ang), 0.0])
        return lambda t: (vmin + (vmax - vmin) * min(t / ramp, 1.0)) * axis

    if profile == "smooth_sine":
        amp = float(p.get("amplitude_deg_s", 0.8)) * DEG
        per = float(p.get("period_s", 20.0))
        return lambda t: amp * np.array([math.sin(2 * math.pi * t / per),
                                         math.cos(2 * math.pi * t / per), 0.0])

    if profile == "tilt_ladder":
        rate = float(p.get("rate_deg_s", 1.0)) * DEG
        slew = float(p.get("slew_s", 2.0))
        dwell = float(p.get("dwell_s", 3.0))
        drift = float(p.get("drift_deg_s", 0.1)) * DEG

        def f(t):
            ph = t % (slew + dwell)
            pitch = rate if ph < slew else 0.0
            return np.array([pitch, drift, 0.0])
        return f

    if profile == "multipose":
        rng = np.random.default_rng(int(p.get("seed", 0)))
        rate = float(p.get("rate_deg_s", 0.84)) * DEG
        slew = float(p.get("slew_s", 3.0))
        dwell = float(p.get("dwell_s", 2.0))
        drift = float(p.get("drift_deg_s", 0.05)) * DEG
        n = int(math.ceil(duration / (slew + dwell))) + 1
        ang = rng.uniform(0, 2 * math.pi, n)

        def f(t):
            k = int(t // (slew + dwell))
            ph = t - k * (slew + dwell)
            a = ang[min(k, n - 1)]
            r = rate if ph < slew else drift
            return r * np.array([math.cos(a), math.sin(a), 0.0])
        return f

    raise UnknownProfile(f"unknown trajectory profile {profile!r}")


PROFILES = ("constant_slew", "velocity_sweep", "multipose", "smooth_sine", "tilt_ladder",
            "high_velocity")


def _axis(a):
    if isinstance(a, str):
        if a not in AXES:
            raise ValueError(f"unknown axis {a!r}")
        a = AXES[a]
    a = np.asarray(a, dtype=float)
    return a / np.linalg.norm(a)


def gen_trajectory(profile, params=None, duration=10.0, sample_dt=1e-3, substeps=10):
    """Integrate a named profile; samples at 0, sample_dt, ..., duration."""
    params = dict(params or {})
    if not duration > 0:
        raise ValueError("duration must be positive")
    rate = _rate_fn(profile, params, duration)
    start = params.get("start", (0.0, 0.0, 0.0))
    q = celestial_to_quat(CelestialAttitude(*map(float, start)))
    n = int(round(duration / sample_dt))
    dt_us = int(round(sample_dt * 1e6))
    if dt_us <= 0:
        raise ValueError("sample_dt must be at least 1 microsecond")
    h = dt_us * 1e-6 / substeps
    ts = np.arange(n + 1, dtype=np.int64) * dt_us
    qs = np.empty((n + 1, 4))
    ws = np.empty((n + 1, 3))
    for i in range(n + 1):
        t = ts[i] * 1e-6
        qs[i] = q
        ws[i] = rate(t)
        if i == n:
            break
        for j in range(substeps):
            w = rate(t + (j + 0.5) * h)
            q = quat_multiply(exp_map(h * w), q)
        q = quat_normalize(q)
    return Trajectory(ts, qs, ws)


def write_truth(traj, path):
    lines = [TRUTH_HEADER]
    for t, q, w in zip(traj.t_us.tolist(), traj.q.tolist(), traj.omega.tolist()):
        lines.append(",".join([str(t)] + [repr(v) for v in q] + [repr(v) for v in w]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_truth(path, header=TRUTH_HEADER, extra_cols=0):
    """Read a truth (or track) CSV.  Returns Trajectory and any extra columns."""
    rows = []
    extras = []
    ncol = len(header.split(","))
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    if lines[0].replace(" ", "") != header:
        raise ParseError(f"expected header '{header}'", 1)
    last = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncol:
            raise ParseError(f"expected {ncol} fields", lineno)
        try:
            t = int(parts[0])
            vals = [float(s) for s in parts[1:8]]
            ext = [float(s) for s in parts[8:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if last is not None and t <= last:
            raise ParseError("timestamps must be strictly increasing", lineno)
        q = np.array(vals[:4])
        nq = np.linalg.norm(q)
        if not np.isfinite(nq) or abs(nq - 1.0) > 1e-6:
            raise ParseError("quaternion is not unit norm", lineno)
        last = t
        rows.append([t] + vals)
        extras.append(ext)
    if not rows:
        raise ParseError("no samples", len(lines))
    a = np.array(rows)
    traj = Trajectory(a[:, 0].astype(np.int64), a[:, 1:5], a[:, 5:8])
    if extra_cols:
        return traj, np.array(extras)
    return traj
