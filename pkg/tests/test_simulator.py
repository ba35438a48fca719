import math

import numpy as np
import pytest
from scipy.stats import wasserstein_distance

from ebstrack.catalog import StarCatalog
from ebstrack.errors import BadMagic, ParseError, TruncatedRecord, UnknownProfile
from ebstrack.events import (EventStream, EventWriter, decode_events, encode_events,
                             iter_events, read_events, write_events)
from ebstrack.geometry import (CameraIntrinsics, boxminus, project_star, quat_rotate,
                               star_image_velocity)
from ebstrack.pixel_model import NOMINAL_PARAMS, StarSignal, spatial_likelihood_field
from ebstrack.simulator import SensorNoiseParams, simulate_events, simulate_segments
from ebstrack.trajectory import gen_trajectory, read_truth, write_truth

from conftest import place_stars

INTR = CameraIntrinsics()
F = INTR.focal_length_px
QUIET = SensorNoiseParams(timestamp_jitter_us=0.0, background_rate_hz=0.0)


def yaw_scene(mags, speed=50.0, duration=1.0, y=0.0, x_start=-25.0, spacing=0.0):
    """Stars moving along +x at ``speed`` px/s, at (x_start, y + k*spacing) at t=0."""
    traj = gen_trajectory("constant_slew", {"axis": "yaw", "rate_deg_s": math.degrees(speed / F),
                                            "start": [50.0, 20.0, 0.0]}, duration)
    pts = [(x_start, y + k * spacing) for k in range(len(mags))]
    dirs = place_stars(traj.q[0], pts, F)
    return traj, StarCatalog(np.arange(1, len(mags) + 1), dirs, mags)


# trajectory ------------------------------------------------------------------------

def test_constant_slew_zero_rate():
    traj = gen_trajectory("constant_slew", {"rate_deg_s": 0.0}, 2.0)
    assert np.allclose(traj.q, traj.q[0], atol=0)


def test_constant_slew_great_circle():
    traj = gen_trajectory("constant_slew", {"axis": "pitch", "rate_deg_s": 1.0}, 10.0)
    b0 = quat_rotate(np.array([1, -1, -1, -1]) * traj.q[0], [0, 0, 1])
    b1 = quat_rotate(np.array([1, -1, -1, -1]) * traj.q[-1], [0, 0, 1])
    ang = math.degrees(math.acos(np.clip(b0 @ b1, -1, 1)))
    assert abs(ang - 10.0) < 1e-6


def fd_rates(traj):
    h = np.diff(traj.t_us) * 1e-6
    return np.array([np.linalg.norm(boxminus(traj.q[i + 1], traj.q[i])) / h[i]
                     for i in range(len(h))])


def test_velocity_sweep_max_rate():
    traj = gen_trajectory("velocity_sweep", {"max_rate_deg_s": 1.8}, 20.0)
    assert 1.79 <= math.degrees(fd_rates(traj).max()) <= 1.81


@pytest.mark.parametrize("profile", ["velocity_sweep", "multipose", "smooth_sine", "tilt_ladder",
                                     "high_velocity", "constant_slew"])
def test_omega_consistent_with_quaternions(profile):
    traj = gen_trajectory(profile, {}, 12.0, sample_dt=1e-2)
    h = np.diff(traj.t_us) * 1e-6
    for i in range(0, len(h), 7):
        w_fd = boxminus(traj.q[i + 1], traj.q[i]) / h[i]
        w_mid = 0.5 * (traj.omega[i] + traj.omega[i + 1])
        if np.linalg.norm(w_mid) > 1e-6 and np.allclose(traj.omega[i], traj.omega[i + 1]):
            assert np.linalg.norm(w_fd - w_mid) <= 0.02 * np.linalg.norm(w_mid)
    assert np.allclose(np.linalg.norm(traj.q, axis=1), 1, atol=1e-9)


def test_unknown_profile():
    with pytest.raises(UnknownProfile):
        gen_trajectory("loop_the_loop", {}, 1.0)


def test_truth_round_trip(tmp_path):
    traj = gen_trajectory("smooth_sine", {}, 3.0, sample_dt=5e-3)
    write_truth(traj, tmp_path / "t.csv")
    back = read_truth(tmp_path / "t.csv")
    assert np.array_equal(back.t_us, traj.t_us)
    assert np.max(np.abs(back.q - traj.q)) < 1e-9 and np.max(np.abs(back.omega - traj.omega)) < 1e-9
    assert np.max(np.abs(np.linalg.norm(back.q, axis=1) - 1)) < 1e-9


def test_truth_errors(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        read_truth(p)
    p.write_text("t_us,qw,qx,qy,qz,wx,wy,wz\n10,1,0,0,0,0,0,0\n5,1,0,0,0,0,0,0\n")
    with pytest.raises(ParseError) as exc:
        read_truth(p)
    assert exc.value.line == 3


# event file format -----------------------------------------------------------------

def random_stream(rng, n):
    t = np.sort(rng.integers(0, 10**9, n))
    s = EventStream(rng.integers(0, 1280, n), rng.integers(0, 720, n),
                    rng.choice(np.array([-1, 1], np.int8), n), t, 1280, 720, canonical=False)
    s.sort()
    return s


def test_event_round_trip(tmp_path, rng):
    s = random_stream(rng, 1_000_000)
    write_events(s, tmp_path / "e.ebs")
    raw = (tmp_path / "e.ebs").read_bytes()
    back = read_events(tmp_path / "e.ebs")
    assert back.equals(s)
    assert encode_events(back) == raw
    assert raw[:4] == b"EBS1" and len(raw) == 20 + 16 * len(s)


def test_event_file_errors(tmp_path, rng):
    s = random_stream(rng, 100)
    raw = encode_events(s)
    with pytest.raises(BadMagic):
        decode_events(b"EBS2" + raw[4:])
    with pytest.raises(TruncatedRecord) as exc:
        decode_events(raw[:-5])
    assert exc.value.index == 98
    (tmp_path / "bad.ebs").write_bytes(raw[:-5])
    with pytest.raises(TruncatedRecord):
        list(iter_events(tmp_path / "bad.ebs"))


def test_event_writer_and_iter(tmp_path, rng):
    s = random_stream(rng, 50_000)
    with EventWriter(tmp_path / "w.ebs", 1280, 720) as w:
        for lo in range(0, len(s), 7000):
            w.write(s[lo:lo + 7000])
    assert (tmp_path / "w.ebs").read_bytes() == encode_events(s)
    parts = list(iter_events(tmp_path / "w.ebs", chunk=9999))
    assert EventStream.concatenate(parts).equals(s)


# simulator ---------------------------------------------------------------------------

def test_empty_catalog_no_background():
    traj = gen_trajectory("constant_slew", {"rate_deg_s": 1.0}, 0.5)
    cat = StarCatalog(np.zeros(0), np.zeros((0, 3)), np.zeros(0))
    assert len(simulate_events(cat, traj, INTR, noise=QUIET)) == 0


def test_static_scene_is_silent():
    traj, cat = yaw_scene([2.0, 4.0], speed=0.0, spacing=20.0)
    ev = simulate_events(cat, traj, INTR, noise=QUIET)
    assert len(ev) == 0


def test_single_pixel_positive_then_negative():
    traj, cat = yaw_scene([2.0], speed=50.0, x_start=-25.3, y=0.2)
    ev = simulate_events(cat, traj, INTR, noise=QUIET)
    px, py = int(round(INTR.cx)), int(round(0.2 + INTR.cy))
    sel = (ev.x == px) & (ev.y == py)
    p = ev.p[sel]
    assert p.size > 4 and np.all(np.diff(ev.t[sel]) >= 0)
    k = int(np.argmax(p < 0))
    assert np.all(p[:k] > 0) and np.all(p[k:] < 0)


def test_stream_invariants_and_determinism():
    traj, cat = yaw_scene([1.0, 3.0, 6.0], speed=80.0, spacing=15.0)
    noise = SensorNoiseParams(seed=9, background_rate_hz=0.5)
    a = simulate_events(cat, traj, INTR, noise=noise)
    b = simulate_events(cat, traj, INTR, noise=noise)
    assert encode_events(a) == encode_events(b)
    a.validate()
    key = np.lexsort((a.p, a.x, a.y, a.t))
    assert np.array_equal(key, np.arange(len(a)))
    c = simulate_events(cat, traj, INTR, noise=SensorNoiseParams(seed=10, background_rate_hz=0.5))
    assert encode_events(c) != encode_events(a)


def test_counts_increase_with_brightness():
    n = []
    for m in (0.0, 7.0):
        traj, cat = yaw_scene([m])
        n.append(len(simulate_events(cat, traj, INTR, noise=QUIET)))
    assert n[0] > n[1] > 0


def test_segments_match_single_shot():
    traj, cat = yaw_scene([1.0, 4.0], speed=60.0, spacing=12.0, duration=1.0)
    one = simulate_events(cat, traj, INTR, noise=QUIET)
    parts = list(simulate_segments(cat, traj, INTR, noise=QUIET, segment_s=0.3))
    assert len(parts) == 4
    assert EventStream.concatenate(parts).equals(one)


def lag_after_closest_approach(mag, sigma=2.0, speed=50.0):
    """Mean time of positive events after the star's closest approach, per pixel."""
    traj, cat = yaw_scene([mag], speed=speed, x_start=-30.0, y=0.0)
    noise = SensorNoiseParams(threshold_pos=0.01, threshold_neg=0.01, refractory_us=0.0,
                              timestamp_jitter_us=0.0, background_rate_hz=0.0)
    ev = simulate_events(cat, traj, INTR, noise=noise, psf_sigma=sigma)
    pos = (ev.p > 0) & (ev.y == int(round(INTR.cy)))
    x_rel = ev.x[pos] - INTR.cx
    # closest approach of pixel x (y offset -0.5 px is common to all)
    t_ca = (x_rel + 30.0) / speed
    return float(np.mean(ev.t[pos] * 1e-6 - t_ca))


def test_simulated_dim_star_latency_ordering():
    assert lag_after_closest_approach(7.0) > lag_after_closest_approach(0.0)


def test_event_histogram_matches_likelihood_field():
    speed, sigma, mag = 50.0, 2.0, 3.0
    traj, cat = yaw_scene([mag], speed=speed, x_start=-30.0, y=0.3, duration=1.2)
    noise = SensorNoiseParams(threshold_pos=0.01, threshold_neg=0.01, refractory_us=0.0,
                              timestamp_jitter_us=0.0, background_rate_hz=0.0)
    ev = simulate_events(cat, traj, INTR, noise=noise, psf_sigma=sigma)
    ev = ev[(ev.p > 0) & (ev.t > 100_000) & (ev.t < 1_100_000)]
    along = []
    for x, y, t in zip(*INTR.to_relative(ev.x, ev.y), ev.t):
        q, w = traj.at(t * 1e-6)
        p, _ = project_star(q, cat.directions[0], INTR)
        v = star_image_velocity(p, F, w)
        along.append((x - p[0]) * v[0] / np.linalg.norm(v) + (y - p[1]) * v[1] / np.linalg.norm(v))
    fld = spatial_likelihood_field(StarSignal(mag, sigma, (speed, 0.0)), NOMINAL_PARAMS, grid_step=0.1)
    marg = fld.values.sum(axis=0)
    emd = wasserstein_distance(np.array(along), fld.along, v_weights=marg)
    assert emd < 0.3
