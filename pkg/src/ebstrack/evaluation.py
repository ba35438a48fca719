"""Track evaluation: across/about attitude errors and relative-rotation alignment."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoOverlap
from .geometry import (ARCSEC_PER_RAD, boxminus, exp_map, log_map, quat_conjugate,
                       quat_multiply, quat_normalize, skew)
from .io_util import atomic_write_text, format_float

COMPARISON_HEADER = "t_us,across_arcsec,about_arcsec,scored"
MATCH_WINDOW_US = 5000
MIN_MATCHES = 10


def attitude_difference(q_est, q_true):
    """(across, about) in arcseconds of the error rotation in the true camera frame."""
    d = boxminus(q_est, q_true) * ARCSEC_PER_RAD
    return float(math.hypot(d[0], d[1])), float(abs(d[2]))


def _errors(q_est, q_true):
    """Vectorized camera-frame error rotation vectors (rad), shape (N, 3)."""
    qe = np.asarray(q_est, dtype=float)
    qt = np.asarray(q_true, dtype=float)
    # q_est * q_true^-1, with q_true^-1 the conjugate
    w1, x1, y1, z1 = qe.T
    w2, x2, y2, z2 = qt[:, 0], -qt[:, 1], -qt[:, 2], -qt[:, 3]
    w = w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2
    x = w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2
    y = w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2
    z = w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2
    sgn = np.where(w < 0, -1.0, 1.0)
    w, v = w * sgn, np.column_stack([x, y, z]) * sgn[:, None]
    n = np.linalg.norm(v, axis=1)
    theta = 2.0 * np.arctan2(n, w)
    scale = np.where(n > 1e-12, theta / np.where(n > 1e-12, n, 1.0), 2.0 / np.maximum(w, 1e-300))
    return v * scale[:, None]


@dataclass
class TrackComparison:
    t_us: np.ndarray
    across: np.ndarray
    about: np.ndarray
    scored: np.ndarray  # bool, False inside the convergence transient
    summary: dict = field(default_factory=dict)

    @staticmethod
    def summarize(across, about, scored):
        a, b = across[scored], about[scored]
        if a.size == 0:
            nan = float("nan")
            return dict(n=0, across_rms=nan, about_rms=nan, across_mean=nan, about_mean=nan,
                        across_max=nan, about_max=nan)
        return dict(n=int(a.size),
                    across_rms=float(np.sqrt(np.mean(a * a))),
                    about_rms=float(np.sqrt(np.mean(b * b))),
                    across_mean=float(np.mean(a)), about_mean=float(np.mean(b)),
                    across_max=float(np.max(a)), about_max=float(np.max(b)))

    def to_csv(self, path):
        lines = [COMPARISON_HEADER]
        for t, a, b, s in zip(self.t_us.tolist(), self.across.tolist(), self.about.tolist(),
                              self.scored.tolist()):
            lines.append(f"{t},{format_float(a)},{format_float(b)},{int(s)}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        scored = a[:, 3].astype(bool)
        return cls(a[:, 0].astype(np.int64), a[:, 1], a[:, 2], scored,
                   cls.summarize(a[:, 1], a[:, 2], scored))


def _series(x):
    """(t_us, q) from a TrackResult, Trajectory or (t_us, q) pair."""
    if hasattr(x, "t_us") and hasattr(x, "q"):
        return np.asarray(x.t_us, dtype=np.int64), np.asarray(x.q, dtype=float)
    t, q = x
    return np.asarray(t, dtype=np.int64), np.asarray(q, dtype=float)


def evaluate_track(est, truth, q_r=None, transient_s=1.0):
    """Compare an estimated series with a truth Trajectory.

    Truth is slerped to the estimate timestamps; ``q_r`` (if given) is applied
    to truth as q_r * q_true.  Samples within ``transient_s`` of the first
    estimate are kept in the per-sample data but excluded from the summary.
    """
    t, q = _series(est)
    if len(t) == 0:
        raise NoOverlap("empty estimate series")
    inside = (t >= truth.t_us[0]) & (t <= truth.t_us[-1])
    t, q = t[inside], q[inside]
    if len(t) == 0 or (t[-1] - t[0]) < 1_000_000:
        raise NoOverlap("estimate and truth overlap by less than 1 s")
    qt, _ = truth.at_many(t * 1e-6)
    if q_r is not None:
        qr = np.asarray(q_r, dtype=float)
        qt = np.array([quat_multiply(qr, x) for x in qt])
    d = _errors(q, qt) * ARCSEC_PER_RAD
    across = np.hypot(d[:, 0], d[:, 1])
    about = np.abs(d[:, 2])
    scored = t >= t[0] + int(round(transient_s * 1e6))
    return TrackComparison(t, across, about, scored,
                           TrackComparison.summarize(across, about, scored))


def match_series(est, ref, window_us=MATCH_WINDOW_US):
    """Nearest-neighbour time matching; returns index arrays (i_est, i_ref)."""
    te, _ = _series(est)
    tr, _ = _series(ref)
    if len(te) == 0 or len(tr) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    k = np.clip(np.searchsorted(tr, te), 1, len(tr) - 1) if len(tr) > 1 else np.zeros(len(te), np.int64)
    if len(tr) > 1:
        left = k - 1
        k = np.where(np.abs(tr[left] - te) <= np.abs(tr[k] - te), left, k)
    ok = np.abs(tr[k] - te) <= window_us
    return np.nonzero(ok)[0], k[ok]


def _inv_left_jacobian(phi):
    th = float(np.linalg.norm(phi))
    K = skew(phi)
    if th < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    c = 1.0 / (th * th) - (1.0 + math.cos(th)) / (2.0 * th * math.sin(th))
    return np.eye(3) - 0.5 * K + c * (K @ K)


def align_relative_rotation(est, ref, max_iter=50, tol=1e-10):
    """q_r minimizing sum |log(q_r * q_ref * q_est^-1)|^2 (Gauss-Newton)."""
    ie, ir = match_series(est, ref)
    if len(ie) < MIN_MATCHES:
        raise NoOverlap(f"{len(ie)} matched samples, need {MIN_MATCHES}")
    _, qe = _series(est)
    _, qf = _series(ref)
    qe, qf = qe[ie], qf[ir]
    # A_i = q_ref_i * q_est_i^-1, so the residual is log(q_r * A_i)
    A = [quat_multiply(a, quat_conjugate(b)) for a, b in zip(qf, qe)]
    q_r = quat_normalize(quat_conjugate(A[0]))
    for _ in range(max_iter):
        JtJ = np.zeros((3, 3))
        Jtr = np.zeros(3)
        for a in A:
            r = log_map(quat_multiply(q_r, a))
            J = _inv_left_jacobian(r)
            JtJ += J.T @ J
            Jtr += J.T @ r
        step = -np.linalg.solve(JtJ, Jtr)
        q_r = quat_normalize(quat_multiply(exp_map(step), q_r))
        if np.linalg.norm(step) < tol:
            break
    if q_r[0] < 0:
        q_r = -q_r
    return q_r
