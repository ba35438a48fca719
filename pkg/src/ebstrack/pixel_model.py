"""Low-light event-pixel signal model and the magnitude-dependent offset curve.

A pixel sees the log-compressed photocurrent ``It = log(I/I0 + 1)`` through a
first-order low-pass whose cutoff grows with the photocurrent,
``f_c = b + a*It``.  The filtered voltage obeys

    dV/dt = 2*pi*f_c(It) * (It - V)

and its time derivative is the event likelihood E_LL.  Dim stars see a slow
pixel, so their positive events lag; bright stars saturate the log and their
positive events lead the true centroid.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._kernels import lowpass_response
from .errors import InsufficientData, InvalidStep, NoConvergence, ParseError

TWO_PI = 2.0 * math.pi
DEFAULT_DT = 5e-5
# RK4 on a linear decay is stable for lambda*dt below ~2.78; keep some margin
RK4_STABLE = 2.0


@dataclass(frozen=True)
class PixelCircuitParams:
    I0: float = 1.0
    a: float = 20.0
    b: float = 2.0

    def __post_init__(self):
        if not self.I0 > 0:
            raise ValueError("I0 must be positive")
        if not self.a >= 0:
            raise ValueError("a must be non-negative")
        if not self.b > 0:
            raise ValueError("b must be positive")


NOMINAL_PARAMS = PixelCircuitParams(1.0, 20.0, 2.0)


@dataclass(frozen=True)
class StarSignal:
    """A star drifting past a pixel.

    ``position_at_t0`` is the pixel position minus the star position at t=0,
    so the pixel-to-star offset at time t is ``x0 - v*t``.
    """

    magnitude: float
    psf_sigma: float
    velocity: tuple
    position_at_t0: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.psf_sigma > 0:
            raise ValueError("psf_sigma must be positive")


def photocurrent(I, I0=1.0):
    return np.log(np.asarray(I, dtype=float) / I0 + 1.0)


def peak_intensity(m):
    """Peak pixel intensity of a star, with magnitude 7 mapped to 1."""
    return 10.0 ** (0.4 * (7.0 - np.asarray(m, dtype=float)))


def star_intensity(t, signal):
    t = np.asarray(t, dtype=float)
    x0 = np.asarray(signal.position_at_t0, dtype=float)
    v = np.asarray(signal.velocity, dtype=float)
    dx = x0[0] - v[0] * t
    dy = x0[1] - v[1] * t
    r2 = dx * dx + dy * dy
    return peak_intensity(signal.magnitude) * np.exp(-r2 / (2.0 * signal.psf_sigma ** 2))


def cutoff_frequency(itilde, params):
    return params.b + params.a * np.asarray(itilde, dtype=float)


def _substeps(itilde_max, params, dt):
    lam = TWO_PI * (params.b + params.a * itilde_max)
    return max(1, int(math.ceil(lam * dt / RK4_STABLE)))


def _integrate(itilde_fn, t0, n_steps, dt, params, rows=1):
    """Integrate rows of photocurrent given by ``itilde_fn(t) -> (rows, len(t))``.

    The step is subdivided automatically when the requested dt would make
    RK4 unstable for the brightest photocurrent; outputs stay on the dt grid.
    """
    t_half = t0 + 0.5 * dt * np.arange(2 * n_steps + 1)
    It = itilde_fn(t_half)
    sub = _substeps(float(np.max(It)) if It.size else 0.0, params, dt)
    if sub > 1:
        h = dt / sub
        t_half = t0 + 0.5 * h * np.arange(2 * n_steps * sub + 1)
        It = itilde_fn(t_half)
    else:
        h = dt
    V, E = lowpass_response(It, h, params.a, params.b, It[:, 0].copy())
    return V[:, ::sub], E[:, ::sub], It[:, ::2 * sub]


@dataclass
class LikelihoodSeries:
    t: np.ndarray
    V: np.ndarray
    E: np.ndarray
    itilde: np.ndarray


def solve_event_likelihood(signal, params, t_span, dt=DEFAULT_DT):
    """V(t) and E_LL(t) for one pixel, V settled at the start of t_span."""
    if not dt > 0:
        raise InvalidStep(f"dt must be positive, got {dt}")
    t0, t1 = float(t_span[0]), float(t_span[1])
    n = max(1, int(round((t1 - t0) / dt)))

    def itilde(t):
        return photocurrent(star_intensity(t, signal), params.I0)[None, :]

    V, E, It = _integrate(itilde, t0, n, dt, params)
    return LikelihoodSeries(t0 + dt * np.arange(n + 1), V[0], E[0], It[0])


def _row_offsets(psf_sigma, max_sigmas=5.0, rows_per_sigma=8):
    step = psf_sigma / rows_per_sigma
    k = int(round(max_sigmas * rows_per_sigma))
    return step * np.arange(k + 1), step


def _row_responses(magnitude, speed, psf_sigma, params, d_perp, dt, span_sigmas=7.0):
    """E_LL for pixels at cross-track distances d_perp, vs time from closest approach."""
    if not dt > 0:
        raise InvalidStep(f"dt must be positive, got {dt}")
    if not speed > 0:
        raise ValueError("speed must be positive")
    T = span_sigmas * psf_sigma / speed
    n = int(math.ceil(2 * T / dt))
    peak = float(peak_intensity(magnitude))
    row_gain = np.exp(-np.asarray(d_perp) ** 2 / (2 * psf_sigma ** 2))[:, None]

    def itilde(t):
        along = np.exp(-(speed * t) ** 2 / (2 * psf_sigma ** 2))[None, :]
        return np.log(peak * row_gain * along / params.I0 + 1.0)

    V, E, _ = _integrate(itilde, -T, n, dt, params, rows=len(d_perp))
    tau = -T + dt * np.arange(n + 1)
    return tau, E


def theoretical_offset(magnitude, speed, psf_sigma, params=NOMINAL_PARAMS, dt=DEFAULT_DT):
    """Along-track lag (px) of the positive-likelihood mass centroid.

    Positive values mean the positive events trail the true centroid.
    """
    d, _ = _row_offsets(psf_sigma)
    tau, E = _row_responses(magnitude, speed, psf_sigma, params, d, dt)
    w = np.maximum(E, 0.0)
    row_w = np.where(d == 0, 1.0, 2.0)[:, None]
    mass = np.sum(row_w * w)
    if mass <= 0:
        return 0.0
    return float(speed * np.sum(row_w * w * tau[None, :]) / mass)


@dataclass
class LikelihoodField:
    """Positive-event likelihood on an (along, cross) grid in the star frame.

    ``along`` is measured along the unit velocity, ``cross`` along the
    velocity rotated +90 degrees in the image.  values[i, j] is at
    (cross[i], along[j]).
    """

    values: np.ndarray
    along: np.ndarray
    cross: np.ndarray
    step: float
    velocity: np.ndarray
    row_peak_time: np.ndarray = field(default=None)

    @property
    def direction(self):
        return self.velocity / np.linalg.norm(self.velocity)

    def mass(self):
        return float(self.values.sum())

    def mean(self):
        """Mean (along, cross) position of the likelihood mass."""
        m = self.values.sum()
        a = float((self.values.sum(axis=0) * self.along).sum() / m)
        c = float((self.values.sum(axis=1) * self.cross).sum() / m)
        return a, c

    def mode(self):
        i, j = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return float(self.along[j]), float(self.cross[i])

    def image_offsets(self, dx, dy):
        """Convert image-plane offsets from the star to (along, cross)."""
        u = self.direction
        return dx * u[0] + dy * u[1], -dx * u[1] + dy * u[0]

    def to_image(self, along, cross):
        u = self.direction
        return along * u[0] - cross * u[1], along * u[1] + cross * u[0]

    def sample(self, n, rng):
        """Draw points (along, cross) by inverse-CDF sampling of the grid cells."""
        p = self.values.ravel()
        cdf = np.cumsum(p)
        cdf /= cdf[-1]
        k = np.searchsorted(cdf, rng.random(n), side="right")
        k = np.minimum(k, p.size - 1)
        i, j = np.unravel_index(k, self.values.shape)
        h = self.step
        a = self.along[j] + (rng.random(n) - 0.5) * h
        c = self.cross[i] + (rng.random(n) - 0.5) * h
        return a, c


def spatial_likelihood_field(signal, params=NOMINAL_PARAMS, grid_extent=None, grid_step=0.1,
                             dt=DEFAULT_DT):
    """Positive-event likelihood field around a moving star.

    Each cross-track row is one ODE solve with the Gaussian peak reduced by
    exp(-d^2 / 2 sigma^2); along-track offset s maps to time via -s/|v|.
    """
    v = np.asarray(signal.velocity, dtype=float)
    speed = float(np.linalg.norm(v))
    if not speed > 0:
        raise ValueError("likelihood field needs a nonzero velocity")
    sigma = signal.psf_sigma
    if grid_extent is None:
        grid_extent = (7.0 * sigma, 5.0 * sigma)
    ext_a, ext_c = float(grid_extent[0]), float(grid_extent[1])
    na = int(round(ext_a / grid_step))
    nc = int(round(ext_c / grid_step))
    along = grid_step * np.arange(-na, na + 1)
    cross = grid_step * np.arange(-nc, nc + 1)
    d_unique = grid_step * np.arange(nc + 1)
    tau, E = _row_responses(signal.magnitude, speed, sigma, params, d_unique, dt,
                            span_sigmas=max(7.0, ext_a / sigma + 1.0))
    t_query = -along / speed
    rows = np.empty((nc + 1, along.size))
    for k in range(nc + 1):
        rows[k] = np.interp(t_query, tau, E[k])
    rows = np.maximum(rows, 0.0)
    peak_t = tau[np.argmax(E, axis=1)]
    idx = np.abs(np.arange(-nc, nc + 1))
    return LikelihoodField(rows[idx], along, cross, grid_step, v, peak_t[idx])


@dataclass
class OffsetCurve:
    """Piecewise-linear z(m) in pixels, clamped outside the sample range.

    ``normalized`` curves have their minimum shifted to zero; absolute curves
    keep the signed offset of the positive-event mean from the star.
    """

    mags: np.ndarray
    offsets: np.ndarray
    normalized: bool = True
    counts: Optional[np.ndarray] = None
    stderr: Optional[np.ndarray] = None

    def __post_init__(self):
        self.mags = np.asarray(self.mags, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float)
        if self.mags.ndim != 1 or self.mags.shape != self.offsets.shape or self.mags.size < 1:
            raise ValueError("offset curve needs matching 1-D samples")
        if np.any(np.diff(self.mags) <= 0):
            raise ValueError("offset curve magnitudes must be strictly increasing")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offset curve values must be finite")

    def __call__(self, m):
        return np.interp(m, self.mags, self.offsets)

    @classmethod
    def zero(cls):
        return cls(np.array([0.0]), np.array([0.0]), normalized=True)

    def normalize(self):
        return OffsetCurve(self.mags, self.offsets - self.offsets.min(), True,
                           self.counts, self.stderr)

    def to_csv(self, path):
        from .io_util import atomic_write_text

        lines = ["mag,offset_px"]
        lines += [f"{m!r},{z!r}" for m, z in zip(self.mags.tolist(), self.offsets.tolist())]
        atomic_write_text(path, "\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, normalized=None):
        mags, offs = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if lineno == 1 or line.replace(" ", "") == "mag,offset_px":
                    if line.replace(" ", "") != "mag,offset_px":
                        raise ParseError("expected header 'mag,offset_px'", lineno)
                    continue
                try:
                    m, z = (float(s) for s in line.split(","))
                except ValueError as exc:
                    raise ParseError(str(exc), lineno) from None
                mags.append(m)
                offs.append(z)
        if not mags:
            raise ParseError("offset curve has no samples", 1)
        offs = np.array(offs)
        if normalized is None:
            normalized = bool(np.isclose(offs.min(), 0.0))
        return cls(np.array(mags), offs, normalized)


def build_offset_curve(params, mag_samples, speed, psf_sigma, normalize=True, dt=DEFAULT_DT):
    mags = np.asarray(sorted(mag_samples), dtype=float)
    if mags.size < 2:
        raise ValueError("need at least two magnitude samples")
    z = np.array([theoretical_offset(m, speed, psf_sigma, params, dt) for m in mags])
    curve = OffsetCurve(mags, z, normalized=False)
    return curve.normalize() if normalize else curve


@dataclass
class OffsetTable:
    """Absolute offset z(m, speed) in pixels on a magnitude x speed grid.

    Bilinear in (m, speed) and clamped at the grid edges.
    """

    mags: np.ndarray
    speeds: np.ndarray
    offsets: np.ndarray  # (len(mags), len(speeds))

    def __post_init__(self):
        self.mags = np.asarray(self.mags, dtype=float)
        self.speeds = np.asarray(self.speeds, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=float).reshape(len(self.mags), len(self.speeds))
        if np.any(np.diff(self.mags) <= 0) or np.any(np.diff(self.speeds) <= 0):
            raise ValueError("offset table axes must be strictly increasing")
        if not np.all(np.isfinite(self.offsets)):
            raise ValueError("offset table values must be finite")

    @classmethod
    def from_curve(cls, curve):
        return cls(curve.mags, np.array([1.0]), curve.offsets[:, None])

    def rows(self, m):
        """Offsets over the speed grid for magnitude(s) m, shape (..., n_speeds)."""
        m = np.asarray(m, dtype=float)
        return np.stack([np.interp(m, self.mags, self.offsets[:, j])
                         for j in range(len(self.speeds))], axis=-1)

    def __call__(self, m, speed):
        return np.interp(speed, self.speeds, self.rows(m))


def build_offset_table(params, mag_samples, speeds, psf_sigma, dt=DEFAULT_DT):
    mags = np.asarray(sorted(mag_samples), dtype=float)
    speeds = np.asarray(sorted(speeds), dtype=float)
    z = np.array([[theoretical_offset(m, s, psf_sigma, params, dt) for s in speeds] for m in mags])
    return OffsetTable(mags, speeds, z)


def empirical_offset_curve(events, truth, catalog, intrinsics, mag_bins, gate_radius=10.0,
                           normalize=True, min_count=100, window_us=1000):
    """Measure the along-track offset of positive events from true star positions.

    ``mag_bins`` are bin edges.  Each positive event is assigned to the nearest
    true star projection within ``gate_radius``; its displacement along the
    star's image velocity is averaged per bin.  The offset is minus that mean,
    so positive values mean the events lag the star.
    """
    from .catalog import fov_query
    from .geometry import star_image_velocity

    edges = np.asarray(mag_bins, dtype=float)
    nb = edges.size - 1
    if nb < 1:
        raise ValueError("need at least two bin edges")
    sums = np.zeros(nb)
    sq = np.zeros(nb)
    counts = np.zeros(nb, dtype=np.int64)
    msum = np.zeros(nb)
    pos = events.p > 0
    ex, ey = intrinsics.to_relative(events.x[pos], events.y[pos])
    et = events.t[pos].astype(np.int64)
    f = intrinsics.focal_length_px
    if et.size:
        starts = np.arange(et[0] - et[0] % window_us, et[-1] + 1, window_us)
        cuts = np.searchsorted(et, np.append(starts, starts[-1] + window_us))
        for k, t_lo in enumerate(starts):
            lo, hi = cuts[k], cuts[k + 1]
            if hi <= lo:
                continue
            t_mid = (t_lo + 0.5 * window_us) * 1e-6
            q, w = truth.at(t_mid)
            idx, xy = fov_query(q, intrinsics, catalog, gate_radius)
            if idx.size == 0:
                continue
            vel = np.array([star_image_velocity(p, f, w) for p in xy])
            dt = et[lo:hi] * 1e-6 - t_mid
            # star position at each event time, linear over the window
            sx = xy[:, 0][None, :] + vel[:, 0][None, :] * dt[:, None]
            sy = xy[:, 1][None, :] + vel[:, 1][None, :] * dt[:, None]
            dx = ex[lo:hi, None] - sx
            dy = ey[lo:hi, None] - sy
            d2 = dx * dx + dy * dy
            key = d2 + 1e-9 * np.argsort(np.argsort(catalog.ids[idx]))[None, :]
            j = np.argmin(key, axis=1)
            rows = np.arange(hi - lo)
            ok = d2[rows, j] <= gate_radius ** 2
            if not np.any(ok):
                continue
            j = j[ok]
            speed = np.linalg.norm(vel[j], axis=1)
            moving = speed > 1e-9
            j = j[moving]
            ux = vel[j, 0] / speed[moving]
            uy = vel[j, 1] / speed[moving]
            along = dx[rows[ok][moving], j] * ux + dy[rows[ok][moving], j] * uy
            mags = catalog.mags[idx[j]]
            b = np.searchsorted(edges, mags, side="right") - 1
            b[mags == edges[-1]] = nb - 1
            inb = (b >= 0) & (b < nb)
            np.add.at(sums, b[inb], along[inb])
            np.add.at(sq, b[inb], along[inb] ** 2)
            np.add.at(counts, b[inb], 1)
            np.add.at(msum, b[inb], mags[inb])
    for i in range(nb):
        if counts[i] < min_count:
            raise InsufficientData(
                f"bin [{edges[i]}, {edges[i + 1]}) has {counts[i]} events (< {min_count})", bin=i)
    mean = sums / counts
    var = np.maximum(sq / counts - mean ** 2, 0.0)
    stderr = np.sqrt(var / counts)
    centers = 0.5 * (edges[:-1] + edges[1:])
    curve = OffsetCurve(centers, -mean, False, counts, stderr)
    return curve.normalize() if normalize else curve


@dataclass
class CircuitFit:
    params: PixelCircuitParams
    residual: float
    iterations: int


def fit_circuit_params(empirical, speed, psf_sigma, init_guess=NOMINAL_PARAMS, max_iter=2000,
                       dt=DEFAULT_DT):
    """Fit (I0, a, b) so the theoretical curve matches an empirical one.

    Nelder-Mead in log space with box bounds, started from ``init_guess`` and
    from the best node of a 3x3x3 log grid; the lower-cost result wins.
    Curves are compared after normalization to a zero minimum unless the
    empirical curve is absolute.
    Raises NoConvergence when the iteration budget runs out.
    """
    from scipy.optimize import minimize

    if empirical.mags.size < 4:
        raise ValueError("need at least four curve samples to fit")
    target = empirical.offsets
    mags = empirical.mags
    lo = np.log10([1e-3, 1e-6, 1e-6])
    hi = np.log10([1e3, 1e4, 1e3])

    def unpack(x):
        x = np.clip(x, lo, hi)
        return PixelCircuitParams(10 ** x[0], 10 ** x[1], 10 ** x[2])

    def curve(p):
        return build_offset_curve(p, mags, speed, psf_sigma, empirical.normalized, dt).offsets

    def cost(x):
        return float(np.sum((curve(unpack(x)) - target) ** 2))

    # two starts: the caller's guess and the best node of a coarse log grid
    g = init_guess
    starts = [np.log10([g.I0, max(g.a, 1e-6), g.b])]
    grid = np.stack(np.meshgrid(*[np.linspace(l, h, 3) for l, h in zip(lo, hi)],
                                indexing="ij"), -1).reshape(-1, 3)
    starts.append(grid[int(np.argmin([cost(x) for x in grid]))])
    best, nit = None, 0
    for x0 in starts:
        res = minimize(cost, x0, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                       options={"maxiter": max_iter, "xatol": 1e-4, "fatol": 1e-10})
        if not res.success and res.nit >= max_iter:
            raise NoConvergence(f"Nelder-Mead stopped after {res.nit} iterations")
        nit += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    return CircuitFit(unpack(best.x), float(best.fun), nit)
