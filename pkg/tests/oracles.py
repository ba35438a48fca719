"""Independent reference computations used by the unit and acceptance tests."""

import math

import numpy as np
from scipy.integrate import quad_vec

from ebstrack.catalog import fov_query
from ebstrack.geometry import (CelestialAttitude, boxminus, celestial_to_quat, exp_map,
                               quat_multiply, quat_rotate, skew)


def random_state(rng, w_max=0.2):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w = rng.standard_normal(3)
    w *= rng.uniform(0.0, w_max) / np.linalg.norm(w)
    return q, w


def propagate(q, w, dt):
    return quat_multiply(exp_map(dt * w), q), w


def fd_transition(q, w, dt, h=1e-6):
    """Central differences of the error-state map through one propagation step."""
    qn, wn = propagate(q, w, dt)
    F = np.zeros((6, 6))
    for k in range(6):
        cols = []
        for s in (1.0, -1.0):
            d = np.zeros(6)
            d[k] = s * h
            qp, wp = propagate(quat_multiply(exp_map(d[:3]), q), w + d[3:], dt)
            cols.append(np.concatenate([boxminus(qp, qn), wp - wn]))
        F[:, k] = (cols[0] - cols[1]) / (2 * h)
    return F


def project(q, s, f):
    X, Y, Z = quat_rotate(q, s)
    return np.array([f * X / Z, f * Y / Z])


def fd_measurement(q, s, f, h=1e-7):
    H = np.zeros((2, 6))
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        H[:, k] = (project(quat_multiply(exp_map(d), q), s, f)
                   - project(quat_multiply(exp_map(-d), q), s, f)) / (2 * h)
    return H


def quadrature_Q(w, dt, phi):
    """Integral over [0, dt] of F(tau) Qc F(tau)^T for white angular acceleration."""
    Qc = np.zeros((6, 6))
    Qc[3:, 3:] = phi * np.eye(3)

    def integrand(tau):
        F = np.eye(6)
        F[:3, :3] += skew(tau * w)
        F[:3, 3:] = tau * np.eye(3) + 0.5 * tau * tau * skew(w)
        return F @ Qc @ F.T

    return quad_vec(integrand, 0.0, dt, epsabs=1e-16, epsrel=1e-12)[0]


def brute_dbscan(points, eps, min_samples):
    """Textbook O(n^2) DBSCAN with input-order expansion; labels -1 for noise."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2))
    nb = [list(np.nonzero(d[i] <= eps)[0]) for i in range(n)]
    core = [len(x) >= min_samples for x in nb]
    lab = [None] * n
    c = 0
    for i in range(n):
        if lab[i] is not None:
            continue
        if not core[i]:
            lab[i] = -1
            continue
        lab[i] = c
        queue = list(nb[i])
        while queue:
            j = queue.pop(0)
            if lab[j] == -1:
                lab[j] = c
            if lab[j] is not None:
                continue
            lab[j] = c
            if core[j]:
                queue.extend(nb[j])
        c += 1
    return np.array(lab)


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if not np.array_equal(a < 0, b < 0):
        return False
    pairs = {(x, y) for x, y in zip(a, b) if x >= 0}
    return len(pairs) == len({x for x, _ in pairs}) == len({y for _, y in pairs})


def find_start(catalog, intr, n_min, n_max, dec=20.0, roll=0.0, need_bright=None, step=0.5):
    """First RA (deg) on a scan line whose field holds n_min..n_max stars."""
    for ra in np.arange(0.0, 360.0, step):
        q = celestial_to_quat(CelestialAttitude(float(ra), dec, roll))
        idx, _ = fov_query(q, intr, catalog, 0.0)
        if n_min <= len(idx) <= n_max:
            if need_bright is None or catalog.mags[idx].min() <= need_bright:
                return float(ra), idx
    raise RuntimeError("no field matches")


def rms(x):
    x = np.asarray(x, dtype=float)
    return math.sqrt(float(np.mean(x * x)))
