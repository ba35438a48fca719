import numpy as np
import pytest

from ebstrack.centroiding import (BENCH_HEADER, BenchmarkConfig, EventBatch, _transit,
                                  batch_events, centroid_benchmark, centroid_mean_all,
                                  centroid_mean_positive, centroid_mle, centroid_offset_corrected,
                                  write_benchmark_csv)
from ebstrack.errors import DegenerateLikelihood, EmptyBatch
from ebstrack.events import EventStream
from ebstrack.geometry import project_directions, star_image_velocity
from ebstrack.pixel_model import NOMINAL_PARAMS, OffsetCurve, StarSignal, spatial_likelihood_field


def make_batch(x, y, p, t=None, window=(0, 1000)):
    n = len(x)
    t = np.full(n, (window[0] + window[1]) // 2) if t is None else np.asarray(t)
    return EventBatch(np.asarray(x, float), np.asarray(y, float), np.asarray(p, np.int8),
                      np.asarray(t, np.int64), window)


def test_batch_events(rng):
    assert batch_events(EventStream.empty(10, 10), 1000) == []
    s = EventStream([1, 2], [1, 1], [1, 1], [0, 1000], 10, 10)
    b = batch_events(s, 1000)
    assert len(b) == 2 and len(b[0]) == 1 and len(b[1]) == 1 and b[1].t[0] == 1000
    t = np.sort(rng.integers(0, 50_000, 5000))
    s = EventStream(np.zeros(5000), np.zeros(5000), np.ones(5000), t, 10, 10, canonical=False)
    b = batch_events(s, 700)
    hist, _ = np.histogram(t, bins=t[0] + 700 * np.arange(len(b) + 1))
    assert [len(x) for x in b] == hist.tolist()
    assert sum(len(x) for x in b) == len(t)


def test_mean_positive():
    assert np.array_equal(centroid_mean_positive(make_batch([10], [20], [1])).position, [10, 20])
    b = make_batch([0, 2, 100], [0, 0, 100], [1, 1, -1])
    assert np.array_equal(centroid_mean_positive(b).position, [1, 0])
    with pytest.raises(EmptyBatch):
        centroid_mean_positive(make_batch([1], [1], [-1]))


def test_mean_all():
    assert np.array_equal(centroid_mean_all(make_batch([10], [20], [-1])).position, [10, 20])
    b = make_batch([0, 2, 100], [0, 0, 100], [1, 1, -1])
    assert np.allclose(centroid_mean_all(b).position, [34, 100 / 3])
    with pytest.raises(EmptyBatch):
        centroid_mean_all(make_batch([], [], []))


def test_means_match_brute_force(rng):
    for _ in range(50):
        n = rng.integers(2, 60)
        x, y = rng.uniform(0, 100, (2, n))
        p = rng.choice([-1, 1], n)
        p[0] = 1
        b = make_batch(x, y, p)
        pos = p > 0
        assert np.allclose(centroid_mean_positive(b).position, [x[pos].sum() / pos.sum(),
                                                                y[pos].sum() / pos.sum()])
        assert np.allclose(centroid_mean_all(b).position, [x.sum() / n, y.sum() / n])


def test_offset_corrected():
    b = make_batch([4, 6], [5, 5], [1, 1])
    zero = OffsetCurve([0.0, 7.0], [0.0, 0.0])
    assert np.array_equal(centroid_offset_corrected(b, [0.6, 0.8], 3, zero).position,
                          centroid_mean_positive(b).position)
    c = OffsetCurve([0.0, 7.0], [1.5, 1.5])
    assert np.allclose(centroid_offset_corrected(b, [1, 0], 3, c).position, [6.5, 5])


def test_offset_correction_helps_bright_star():
    cfg = BenchmarkConfig(psf_sigma=2.0, speed_px_s=50.0, n_batches=500)
    rows = centroid_benchmark(cfg, ("mean_positive", "offset"), [0.0])
    r = {x.method: x for x in rows}
    assert r["offset"].n_batches >= 450
    assert r["offset"].mean_abs_err_px < r["mean_positive"].mean_abs_err_px


def test_mle_recovers_mode():
    sig, v = 2.0, np.array([50.0, 0.0])
    fld = spatial_likelihood_field(StarSignal(3.0, sig, tuple(v)), NOMINAL_PARAMS)
    ma, mc = fld.mode()
    dx, dy = fld.to_image(ma, mc)
    x0 = np.array([40.3, 20.7])
    b = make_batch(np.full(12, x0[0] + dx), np.full(12, x0[1] + dy), np.ones(12))
    est = centroid_mle(b, v, 3.0, sig)
    assert np.linalg.norm(est.position - x0) < 0.05


def transit_batches(mag, n, sigma=2.5, speed=35.0):
    cfg = BenchmarkConfig(psf_sigma=sigma, speed_px_s=speed, n_batches=n)
    stream, traj, intr, d = _transit(cfg, mag, 5)
    out = []
    for k in range(n):
        w0 = int(cfg.settle_s * 1e6) + k * cfg.window_us
        b = EventBatch.from_stream(stream, w0, w0 + cfg.window_us)
        q, w = traj.at(b.t_mid)
        xy, _ = project_directions(q, d[None, :], intr.focal_length_px)
        out.append((b, star_image_velocity(xy[0], intr.focal_length_px, w)))
    return out


def test_mle_matches_dense_grid():
    for b, v in transit_batches(3.0, 20):
        est, lookup, ex, ey = centroid_mle(b, v, 3.0, 2.5, return_details=True)
        g = np.arange(-0.5, 0.5001, 0.01)
        gx, gy = np.meshgrid(est.position[0] + g, est.position[1] + g)
        gx, gy = gx.ravel(), gy.ravel()
        nll = np.array([-np.sum(np.log(lookup.values(ex - a, ey - c))) for a, c in zip(gx, gy)])
        k = int(np.argmin(nll))
        assert np.hypot(gx[k] - est.position[0], gy[k] - est.position[1]) < 0.05


def test_estimators_translation_equivariant():
    (b, v), = transit_batches(2.0, 1)
    c = OffsetCurve([0.0, 7.0], [0.3, 1.2])
    d = np.array([3.25, -7.5])
    bs = b.shifted(*d)
    vbar = v / np.linalg.norm(v)
    for fn in (centroid_mean_positive, centroid_mean_all,
               lambda x: centroid_offset_corrected(x, vbar, 2.0, c),
               lambda x: centroid_mle(x, v, 2.0, 2.5)):
        e0, e1 = fn(b).position, fn(bs).position
        assert np.allclose(e1 - e0, d, atol=1e-5)


def test_mle_time_shift_invariance():
    (b, v), = transit_batches(4.0, 1)
    e0 = centroid_mle(b, v, 4.0, 2.5).position
    e1 = centroid_mle(b.shifted(dt_us=123_456), v, 4.0, 2.5).position
    assert np.allclose(e0, e1, atol=1e-6)


def test_mle_errors():
    with pytest.raises(EmptyBatch):
        centroid_mle(make_batch([1, 2], [1, 2], [1, 1]), [50, 0], 3.0, 2.0)
    far = make_batch([0, 200, 0], [0, 0, 300], [1, 1, 1])
    with pytest.raises(DegenerateLikelihood):
        centroid_mle(far, [50, 0], 3.0, 2.0)


def test_benchmark_csv(tmp_path):
    cfg = BenchmarkConfig(n_batches=20)
    rows = centroid_benchmark(cfg, ("mean_positive", "mle"), [2.0])
    write_benchmark_csv(rows, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == BENCH_HEADER and len(lines) == 3
    assert lines[1].startswith("2.0,mean_positive,")
