"""Lost-in-space initialization: DBSCAN clustering, Wahba solver, plate solving.

The plate solver matches centroid triangles against a table of catalog star
pairs sorted by angular separation.  Each side of a centroid triangle selects
catalog pairs within a tolerance; pairs sharing a vertex are joined into
candidate triangles, mirror images are rejected by handedness, and each
survivor is verified by projecting the catalog and counting inliers.
"""

import math
from dataclasses import dataclass

import numpy as np

from .catalog import fov_query
from .errors import DegenerateGeometry, NoSolution


@dataclass
class DBSCANResult:
    labels: np.ndarray  # cluster id per point, -1 for noise

    @property
    def clusters(self):
        n = int(self.labels.max()) + 1 if self.labels.size else 0
        return [np.nonzero(self.labels == c)[0] for c in range(n)]

    @property
    def noise(self):
        return np.nonzero(self.labels < 0)[0]


def dbscan(points, eps=2.0, min_samples=3, weights=None):
    """Density clustering; core points expand in input order.

    ``min_samples`` counts the point itself.  Border points join the first
    cluster that reaches them.  Integer ``weights`` stand for repeated points
    at the same location, which is equivalent to passing the duplicates.
    """
    from scipy.spatial import cKDTree

    if not eps > 0 or min_samples < 1:
        raise ValueError("need eps > 0 and min_samples >= 1")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -2, dtype=np.int64)  # -2 unvisited
    if n == 0:
        return DBSCANResult(np.zeros(0, np.int64))
    tree = cKDTree(pts)
    nbrs = tree.query_ball_point(pts, eps)
    if weights is None:
        core = np.array([len(nb) >= min_samples for nb in nbrs])
    else:
        w = np.asarray(weights)
        core = np.array([w[nb].sum() >= min_samples for nb in nbrs])
    cid = 0
    for i in range(n):
        if labels[i] != -2:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        labels[i] = cid
        queue = sorted(nbrs[i])
        head = 0
        while head < len(queue):
            j = queue[head]
            head += 1
            if labels[j] == -1:
                labels[j] = cid
            if labels[j] != -2:
                continue
            labels[j] = cid
            if core[j]:
                queue.extend(sorted(nbrs[j]))
        cid += 1
    return DBSCANResult(labels)


def wahba_solve(body, ref, weights=None):
    """Quaternion q (world-to-camera) minimizing sum w |b - q(c)|^2.

    Davenport's q-method on the attitude profile matrix B = sum w b c^T.
    """
    b = np.asarray(body, dtype=float).reshape(-1, 3)
    c = np.asarray(ref, dtype=float).reshape(-1, 3)
    if len(b) != len(c):
        raise ValueError("body and reference sets differ in length")
    if len(b) < 2:
        raise DegenerateGeometry("need at least two vector pairs")
    w = np.ones(len(b)) if weights is None else np.asarray(weights, dtype=float)
    cross = np.linalg.norm(np.cross(c[0], c[1:]), axis=1)
    crossb = np.linalg.norm(np.cross(b[0], b[1:]), axis=1)
    if cross.max() < 1e-10 or crossb.max() < 1e-10:
        raise DegenerateGeometry("vector pairs are collinear")
    B = (w[:, None] * b).T @ c
    S = B + B.T
    sigma = np.trace(B)
    z = np.array([B[1, 2] - B[2, 1], B[2, 0] - B[0, 2], B[0, 1] - B[1, 0]])
    K = np.empty((4, 4))
    K[:3, :3] = S - sigma * np.eye(3)
    K[:3, 3] = z
    K[3, :3] = z
    K[3, 3] = sigma
    vals, vecs = np.linalg.eigh(K)
    qs = vecs[:, np.argmax(vals)]
    # K's eigenvector is scalar-last for the transposed (passive) convention
    q = np.array([qs[3], -qs[0], -qs[1], -qs[2]])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def pair_table(catalog, max_sep_rad):
    """Catalog star pairs closer than max_sep_rad, sorted by separation (cached)."""
    key = ("pairs", round(float(max_sep_rad), 12))
    hit = catalog._cache.get(key)
    if hit is not None:
        return hit
    from scipy.spatial import cKDTree

    d = catalog.directions
    if len(d) < 2:
        table = (np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))
    else:
        tree = cKDTree(d)
        pairs = tree.query_pairs(2.0 * math.sin(max_sep_rad / 2.0), output_type="ndarray")
        chord = np.linalg.norm(d[pairs[:, 0]] - d[pairs[:, 1]], axis=1)
        ang = 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))
        order = np.lexsort((pairs[:, 1], pairs[:, 0], ang))
        table = (ang[order], pairs[order, 0].astype(np.int64), pairs[order, 1].astype(np.int64))
    catalog._cache[key] = table
    return table


def _angle(u, v):
    return 2.0 * math.asin(min(np.linalg.norm(u - v) / 2.0, 1.0))


@dataclass
class PlateSolution:
    q: np.ndarray
    matches: list  # (centroid index, catalog index)
    rms_px: float
    n_inliers: int


def _verify(q, pts, catalog, intr, inlier_px):
    idx, xy = fov_query(q, intr, catalog, margin_px=inlier_px)
    if idx.size == 0:
        return [], float("inf")
    d2 = ((pts[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2)
    j = np.argmin(d2, axis=1)
    best = d2[np.arange(len(pts)), j]
    ok = best <= inlier_px ** 2
    # one centroid per catalog star: keep the closest
    taken = {}
    for i in np.nonzero(ok)[0]:
        s = int(idx[j[i]])
        if s not in taken or best[i] < best[taken[s]]:
            taken[s] = i
    matches = sorted((int(i), s) for s, i in taken.items())
    if not matches:
        return [], float("inf")
    rms = math.sqrt(float(np.mean([best[i] for i, _ in matches])))
    return matches, rms


def plate_solve(centroids, catalog, intr, tol_px=3.0, inlier_px=2.0, min_inliers=4,
                max_centroids=12, max_triples=400, patience=40):
    """Absolute attitude from star centroids (pixels relative to the principal point)."""
    pts = np.asarray(centroids, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n < min_inliers or n < 3:
        raise NoSolution(f"{n} centroids, need at least {max(min_inliers, 3)}")
    f = intr.focal_length_px
    rays = np.column_stack([pts[:, 0], pts[:, 1], np.full(n, f)])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    diag = math.hypot(intr.width, intr.height)
    max_sep = math.atan(diag / f) * 1.05 + 5 * tol_px / f
    ang, pa, pb = pair_table(catalog, max_sep)
    tol = tol_px / f
    dirs = catalog.directions
    ncat = len(catalog)

    def lookup(d):
        lo, hi = np.searchsorted(ang, [d - tol, d + tol])
        a, b = pa[lo:hi], pb[lo:hi]
        return np.concatenate([a, b]), np.concatenate([b, a])

    m = min(n, max_centroids)
    best = None
    best_key = None
    since = 0
    tried = 0
    for k in range(2, m):
        for j in range(1, k):
            for i in range(j):
                tried += 1
                if tried > max_triples or (best is not None and since > patience):
                    break
                since += 1
                d_ij = _angle(rays[i], rays[j])
                d_ik = _angle(rays[i], rays[k])
                d_jk = _angle(rays[j], rays[k])
                a1, b1 = lookup(d_ij)
                a2, c2 = lookup(d_ik)
                b3, c3 = lookup(d_jk)
                if a1.size == 0 or a2.size == 0 or b3.size == 0:
                    continue
                jk = set((b3 * ncat + c3).tolist())
                by_a = {}
                for a, c in zip(a2.tolist(), c2.tolist()):
                    by_a.setdefault(a, []).append(c)
                det_obs = np.linalg.det(np.vstack([rays[i], rays[j], rays[k]]))
                for a, b in zip(a1.tolist(), b1.tolist()):
                    for c in by_a.get(a, ()):
                        if c == b or (b * ncat + c) not in jk:
                            continue
                        det_cat = np.linalg.det(np.vstack([dirs[a], dirs[b], dirs[c]]))
                        if det_cat * det_obs <= 0:
                            continue
                        try:
                            q = wahba_solve(rays[[i, j, k]], dirs[[a, b, c]])
                        except DegenerateGeometry:
                            continue
                        matches, rms = _verify(q, pts, catalog, intr, inlier_px)
                        if len(matches) < min_inliers:
                            continue
                        ci = [u for u, _ in matches]
                        si = [s for _, s in matches]
                        q = wahba_solve(rays[ci], dirs[si])
                        matches, rms = _verify(q, pts, catalog, intr, inlier_px)
                        key = (len(matches), -rms)
                        if len(matches) >= min_inliers and (best_key is None or key > best_key):
                            best_key = key
                            best = PlateSolution(q, matches, rms, len(matches))
                            since = 0
                        if best is not None and best.n_inliers == n:
                            return best
            else:
                continue
            break
        else:
            continue
        break
    if best is None:
        raise NoSolution(f"no hypothesis reached {min_inliers} inliers")
    return best
