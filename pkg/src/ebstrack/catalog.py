"""Star catalog: CSV I/O, field-of-view queries and synthetic generation."""

import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import EmptyCatalog, PackingFailure, ParseError
from .geometry import CameraIntrinsics, project_directions, quat_rotate, radec_to_unit, unit_to_radec

CATALOG_HEADER = "id,ra_deg,dec_deg,mag"
DEFAULT_CUTOFF = 7.0
DEFAULT_MARGIN_PX = 10.0

__all__ = [
    "CatalogStar", "StarCatalog", "radec_to_unit", "load_catalog", "save_catalog",
    "stars_in_fov", "fov_query", "nearest_projected_star", "gen_synthetic_catalog",
]


@dataclass(frozen=True)
class CatalogStar:
    id: int
    direction: np.ndarray
    magnitude: float


@dataclass(eq=False)
class StarCatalog:
    """Column-oriented catalog; ``stars`` gives the row view."""

    ids: np.ndarray
    directions: np.ndarray
    mags: np.ndarray
    cutoff: float = DEFAULT_CUTOFF
    n_dropped: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.directions = np.asarray(self.directions, dtype=float).reshape(-1, 3)
        self.mags = np.asarray(self.mags, dtype=float).reshape(-1)
        if not (len(self.ids) == len(self.directions) == len(self.mags)):
            raise ValueError("catalog columns differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("catalog ids must be unique")
        if np.any(self.mags > self.cutoff):
            raise ValueError("catalog contains stars fainter than the cutoff")
        if len(self.ids):
            n = np.linalg.norm(self.directions, axis=1)
            if np.max(np.abs(n - 1.0)) > 1e-9:
                raise ValueError("catalog directions must be unit vectors")
        for a in (self.ids, self.directions, self.mags):
            a.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    def star(self, i):
        return CatalogStar(int(self.ids[i]), self.directions[i], float(self.mags[i]))

    @property
    def stars(self):
        return [self.star(i) for i in range(len(self))]

    @classmethod
    def from_radec(cls, ids, ra_deg, dec_deg, mags, cutoff=DEFAULT_CUTOFF):
        return cls(ids, radec_to_unit(np.asarray(ra_deg, float), np.asarray(dec_deg, float)),
                   mags, cutoff)

    def subset(self, mask):
        return StarCatalog(self.ids[mask], self.directions[mask], self.mags[mask], self.cutoff)


def load_catalog(path, cutoff=DEFAULT_CUTOFF):
    ids, ras, decs, mags = [], [], [], []
    dropped = 0
    header_seen = False
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                if line.replace(" ", "") != CATALOG_HEADER:
                    raise ParseError(f"expected header '{CATALOG_HEADER}'", lineno)
                header_seen = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
            try:
                sid = int(parts[0])
                ra = float(parts[1])
                dec = float(parts[2])
                mag = float(parts[3])
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not (np.isfinite(ra) and np.isfinite(dec) and np.isfinite(mag)) or abs(dec) > 90.0:
                raise ParseError("coordinate out of range", lineno)
            if sid in seen:
                raise ParseError(f"duplicate id {sid}", lineno)
            seen.add(sid)
            if mag > cutoff:
                dropped += 1
                continue
            ids.append(sid)
            ras.append(ra)
            decs.append(dec)
            mags.append(mag)
    if not header_seen:
        raise ParseError("missing header", 1)
    if not ids:
        raise EmptyCatalog(f"no stars at or brighter than magnitude {cutoff} in {path}")
    cat = StarCatalog.from_radec(ids, ras, decs, mags, cutoff)
    cat.n_dropped = dropped
    return cat


def save_catalog(cat, path):
    from .io_util import atomic_write_text

    ra, dec = unit_to_radec(cat.directions)
    lines = [CATALOG_HEADER]
    for i in range(len(cat)):
        lines.append(f"{int(cat.ids[i])},{float(ra[i])!r},{float(dec[i])!r},{float(cat.mags[i])!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _fov_cos_threshold(intr, margin_px):
    corners_u = np.array([-0.5 - margin_px, intr.width - 0.5 + margin_px]) - intr.cx
    corners_v = np.array([-0.5 - margin_px, intr.height - 0.5 + margin_px]) - intr.cy
    r = np.sqrt(np.max(corners_u ** 2) + np.max(corners_v ** 2))
    half = np.arctan(r / intr.focal_length_px)
    return np.cos(min(half * 1.001 + 1e-6, np.pi / 2))


def fov_query(q, intr, cat, margin_px=DEFAULT_MARGIN_PX):
    """Indices and relative pixel positions of stars inside the expanded frame."""
    if len(cat) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    boresight = quat_rotate(np.array([q[0], -q[1], -q[2], -q[3]]), np.array([0.0, 0.0, 1.0]))
    cand = np.nonzero(cat.directions @ boresight > _fov_cos_threshold(intr, margin_px))[0]
    xy, _ = project_directions(q, cat.directions[cand], intr.focal_length_px)
    ok = np.isfinite(xy[:, 0])
    ok[ok] = intr.in_frame(xy[ok, 0], xy[ok, 1], margin_px)
    return cand[ok], xy[ok]


def stars_in_fov(q, intr, cat, margin_px=DEFAULT_MARGIN_PX):
    idx, xy = fov_query(q, intr, cat, margin_px)
    return [(cat.star(i), p) for i, p in zip(idx, xy)]


def nearest_projected_star(p, projections, r):
    """Closest (star, point) within r of p; ties go to the lower star id."""
    best = None
    best_key = None
    px, py = float(p[0]), float(p[1])
    for star, xy in projections:
        d2 = (xy[0] - px) ** 2 + (xy[1] - py) ** 2
        key = (d2, star.id)
        if best_key is None or key < best_key:
            best, best_key = (star, xy), key
    if best is None or best_key[0] > r * r:
        return None
    return best


def gen_synthetic_catalog(seed, n_stars, mag_range=(0.0, 7.0), min_separation_deg=0.0,
                          cutoff=DEFAULT_CUTOFF):
    if n_stars <= 0:
        raise ValueError("n_stars must be positive")
    rng = np.random.default_rng(seed)
    if min_separation_deg <= 0:
        v = rng.standard_normal((n_stars, 3))
        dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    else:
        dirs = _packed_directions(rng, n_stars, np.radians(min_separation_deg))
    mags = rng.uniform(mag_range[0], mag_range[1], n_stars)
    return StarCatalog(np.arange(1, n_stars + 1), dirs, mags, max(cutoff, float(mag_range[1])))


def _packed_directions(rng, n, sep):
    # random sequential placement with a hash grid on the chord distance
    chord = 2.0 * np.sin(sep / 2.0)
    cell = chord
    grid = {}
    out = np.empty((n, 3))
    count = 0
    attempts = 0
    limit = 10_000 * n
    while count < n:
        batch = rng.standard_normal((4096, 3))
        batch /= np.linalg.norm(batch, axis=1, keepdims=True)
        for v in batch:
            attempts += 1
            if attempts > limit:
                raise PackingFailure(f"placed {count} of {n} stars at separation {np.degrees(sep):.4g} deg")
            key = tuple(np.floor(v / cell).astype(int))
            ok = True
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        for j in grid.get((key[0] + dx, key[1] + dy, key[2] + dz), ()):
                            if np.sum((out[j] - v) ** 2) < chord * chord:
                                ok = False
                                break
                        if not ok:
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                out[count] = v
                grid.setdefault(key, []).append(count)
                count += 1
                if count == n:
                    break
    return out
