"""Rotation-manifold math, pinhole projection and celestial conversions.

Conventions used everywhere in the package:

* Quaternions are numpy arrays ``(w, x, y, z)``, Hamilton product, and
  represent the active world-to-camera rotation ``q_wc``.  Rotating a
  celestial unit vector ``s`` by ``q`` yields its camera-frame direction.
* Perturbations are applied on the left: ``q' = exp(dtheta) * q``.  The filter
  propagates ``q(t + dt) = exp(dt * omega) * q(t)``, so ``omega`` is expressed
  in the camera frame.
* Camera frame: +z boresight, +x right, +y down on the image.
* Pixel points are measured relative to the principal point.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import BehindCamera

ARCSEC_PER_RAD = 180.0 / np.pi * 3600.0
SMALL_ANGLE = 1e-8
MIN_DEPTH = 1e-9
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_conjugate(q):
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


quat_inverse = quat_conjugate


def quat_multiply(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_rotate(q, v):
    """Rotate vector(s) ``v`` (shape (3,) or (N, 3)) by unit quaternion ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w, u = q[0], q[1:]
    cross = np.cross(u, v)
    dot = v @ u
    return (2.0 * w * w - 1.0) * v + 2.0 * w * cross + 2.0 * np.multiply.outer(dot, u)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_matrices(qs):
    """Rotation matrices for an (N, 4) array of quaternions."""
    qs = np.asarray(qs, dtype=float)
    w, x, y, z = qs[:, 0], qs[:, 1], qs[:, 2], qs[:, 3]
    R = np.empty((len(qs), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method; returns the quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    cand = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(cand))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + 2 * R[0, 0] - tr)
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + 2 * R[1, 1] - tr)
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + 2 * R[2, 2] - tr)
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def exp_map(dtheta):
    dtheta = np.asarray(dtheta, dtype=float)
    theta = np.linalg.norm(dtheta)
    if theta < SMALL_ANGLE:
        # second-order series of cos(t/2) and sin(t/2)/t
        return np.concatenate(([1.0 - theta * theta / 8.0],
                               0.5 * (1.0 - theta * theta / 24.0) * dtheta))
    half = 0.5 * theta
    return np.concatenate(([np.cos(half)], np.sin(half) / theta * dtheta))


def log_map(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    v = q[1:]
    n = np.linalg.norm(v)
    if n < SMALL_ANGLE:
        return 2.0 * v / q[0] * (1.0 - n * n / (3.0 * q[0] * q[0]))
    theta = 2.0 * np.arctan2(n, q[0])
    return theta / n * v


def rodrigues_dcm(dtheta):
    dtheta = np.asarray(dtheta, dtype=float)
    theta = np.linalg.norm(dtheta)
    K = skew(dtheta)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / (theta * theta) * (K @ K))


def boxplus(q, omega, delta):
    """Apply a 6-vector perturbation to the (q, omega) state."""
    delta = np.asarray(delta, dtype=float)
    q_new = quat_normalize(quat_multiply(exp_map(delta[:3]), q))
    return q_new, np.asarray(omega, dtype=float) + delta[3:]


def boxminus(q1, q2):
    """Rotation vector taking q2 to q1: log(q1 * q2^-1)."""
    return log_map(quat_multiply(q1, quat_conjugate(q2)))


def slerp(q0, q1, u):
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    d = float(q0 @ q1)
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9999999:
        return quat_normalize(q0 + u * (q1 - q0))
    th = np.arccos(min(d, 1.0))
    s = np.sin(th)
    return (np.sin((1 - u) * th) * q0 + np.sin(u * th) * q1) / s


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length_px: float = 7171.0
    width: int = 1280
    height: int = 720
    principal_point: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise ValueError("focal_length_px must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor dimensions must be positive")

    @property
    def cx(self):
        if self.principal_point is None:
            return (self.width - 1) / 2.0
        return float(self.principal_point[0])

    @property
    def cy(self):
        if self.principal_point is None:
            return (self.height - 1) / 2.0
        return float(self.principal_point[1])

    @property
    def ifov_arcsec(self):
        return np.arctan(1.0 / self.focal_length_px) * ARCSEC_PER_RAD

    def in_frame(self, x, y, margin=0.0):
        """True where relative point (x, y) rounds onto the (expanded) sensor."""
        u = np.asarray(x) + self.cx
        v = np.asarray(y) + self.cy
        return ((u >= -0.5 - margin) & (u < self.width - 0.5 + margin)
                & (v >= -0.5 - margin) & (v < self.height - 0.5 + margin))

    def to_relative(self, px, py):
        return np.asarray(px, dtype=float) - self.cx, np.asarray(py, dtype=float) - self.cy


def project_star(q, s, intr):
    """Project a celestial unit vector; returns (point, in_frame)."""
    X, Y, Z = quat_rotate(q, s)
    if Z <= MIN_DEPTH:
        raise BehindCamera(f"rotated depth {Z:.3g}")
    f = intr.focal_length_px
    p = np.array([f * X / Z, f * Y / Z])
    return p, bool(intr.in_frame(p[0], p[1]))


def project_directions(q, dirs, f):
    """Vectorized projection. Returns (xy, depth); xy is NaN behind the camera."""
    c = quat_rotate(q, np.asarray(dirs, dtype=float).reshape(-1, 3))
    Z = c[:, 2]
    ok = Z > MIN_DEPTH
    xy = np.full((len(c), 2), np.nan)
    xy[ok, 0] = f * c[ok, 0] / Z[ok]
    xy[ok, 1] = f * c[ok, 1] / Z[ok]
    return xy, Z


def star_image_velocity(p, f, omega):
    """Image-plane velocity (px/s) of a star at relative point p.

    Derived from the propagation model ds/dt = omega x s of camera-frame
    directions, so it is the exact time derivative of project_star under the
    filter's own kinematics.
    """
    x, y = float(p[0]), float(p[1])
    wx, wy, wz = omega
    vx = -x * y / f * wx + (f + x * x / f) * wy - y * wz
    vy = (-f - y * y / f) * wx + x * y / f * wy + x * wz
    return np.array([vx, vy])


def radec_to_unit(ra_deg, dec_deg):
    ra = np.radians(ra_deg)
    dec = np.radians(dec_deg)
    cd = np.cos(dec)
    return np.stack([cd * np.cos(ra), cd * np.sin(ra), np.sin(dec)], axis=-1)


def unit_to_radec(v):
    v = np.asarray(v, dtype=float)
    ra = np.degrees(np.arctan2(v[..., 1], v[..., 0])) % 360.0
    dec = np.degrees(np.arcsin(np.clip(v[..., 2], -1.0, 1.0)))
    return ra, dec


@dataclass(frozen=True)
class CelestialAttitude:
    ra: float
    dec: float
    roll: float
    gimbal_degenerate: bool = False


def celestial_to_quat(att):
    """Roll 0 puts camera +x along local east and +y along local north."""
    ra, dec, roll = np.radians([att.ra, att.dec, att.roll])
    b = radec_to_unit(att.ra, att.dec)
    east = np.array([-np.sin(ra), np.cos(ra), 0.0])
    north = np.cross(b, east)
    cr, sr = np.cos(roll), np.sin(roll)
    xc = cr * east + sr * north
    yc = -sr * east + cr * north
    return matrix_to_quat(np.vstack([xc, yc, b]))


def quat_to_celestial(q):
    R = quat_to_matrix(q)
    b = R[2]
    ra, dec = unit_to_radec(b)
    ra, dec = float(ra), float(dec)
    if abs(dec) > 89.999:
        return CelestialAttitude(ra, dec, 0.0, True)
    rar = np.radians(ra)
    east = np.array([-np.sin(rar), np.cos(rar), 0.0])
    north = np.cross(b, east)
    roll = np.degrees(np.arctan2(R[0] @ north, R[0] @ east))
    if roll >= 180.0:
        roll -= 360.0
    return CelestialAttitude(ra, dec, float(roll), False)
