import json
import math
import pathlib

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from ebstrack.cli import main
from ebstrack.config import load_config, load_schema, parse_config
from ebstrack.errors import ConfigError, NoOverlap
from ebstrack.evaluation import (TrackComparison, align_relative_rotation, attitude_difference,
                                 evaluate_track)
from ebstrack.geometry import CelestialAttitude, celestial_to_quat, exp_map, quat_multiply
from ebstrack.tracker import TrackerConfig
from ebstrack.trajectory import gen_trajectory

from conftest import random_quats
from oracles import find_start

ARCSEC = math.radians(1.0 / 3600.0)
ROOT = pathlib.Path(__file__).resolve().parents[1]


def rot(v):
    return exp_map(np.asarray(v, dtype=float))


# attitude difference ---------------------------------------------------------------

def test_attitude_difference_identity(rng):
    q = random_quats(rng, 1)[0]
    assert attitude_difference(q, q) == pytest.approx((0.0, 0.0), abs=1e-9)
    assert attitude_difference(-q, q) == pytest.approx((0.0, 0.0), abs=1e-9)


def test_attitude_difference_pure_roll(rng):
    q = random_quats(rng, 1)[0]
    qe = quat_multiply(rot([0.0, 0.0, 100.0 * ARCSEC]), q)
    across, about = attitude_difference(qe, q)
    assert across == pytest.approx(0.0, abs=1e-6)
    assert about == pytest.approx(100.0, rel=1e-9)


def test_attitude_difference_matches_geodesic_angle(rng):
    for q in random_quats(rng, 50):
        d = rng.normal(0.0, 1e-3, 3)
        qe = quat_multiply(rot(d), q)
        across, about = attitude_difference(qe, q)
        # scipy uses scalar-last quaternions
        ang = (Rotation.from_quat(np.roll(qe, -1)) * Rotation.from_quat(np.roll(q, -1)).inv()).magnitude()
        assert math.hypot(across, about) == pytest.approx(math.degrees(ang) * 3600.0, rel=1e-9)
        assert across == pytest.approx(math.hypot(d[0], d[1]) / ARCSEC, rel=1e-9)


def test_attitude_difference_symmetric(rng):
    for q in random_quats(rng, 20):
        qe = quat_multiply(rot(rng.normal(0.0, 1e-3, 3)), q)
        a = attitude_difference(qe, q)
        b = attitude_difference(q, qe)
        assert a == pytest.approx(b, rel=1e-9)


# track evaluation ------------------------------------------------------------------

@pytest.fixture(scope="module")
def truth():
    return gen_trajectory("velocity_sweep", {"start": [40.0, 20.0, 0.0]}, 3.0)


def test_evaluate_exact_track_is_zero(truth):
    cmp_ = evaluate_track(truth, truth)
    assert cmp_.summary["across_rms"] < 1e-6 and cmp_.summary["about_rms"] < 1e-6
    assert cmp_.scored.sum() == np.count_nonzero(truth.t_us >= 1_000_000)


def test_evaluate_compensates_relative_rotation(truth):
    q_r = rot([0.0, 0.0, 50.0 * ARCSEC])
    est = (truth.t_us, np.array([quat_multiply(q_r, q) for q in truth.q]))
    raw = evaluate_track(est, truth)
    assert raw.summary["about_rms"] == pytest.approx(50.0, rel=1e-6)
    fixed = evaluate_track(est, truth, q_r)
    assert fixed.summary["about_rms"] < 0.1 and fixed.summary["across_rms"] < 0.1


def test_comparison_csv_round_trip(truth, tmp_path):
    est = (truth.t_us, np.array([quat_multiply(rot([1e-5, 0, 2e-5]), q) for q in truth.q]))
    cmp_ = evaluate_track(est, truth)
    p = tmp_path / "cmp.csv"
    cmp_.to_csv(p)
    back = TrackComparison.from_csv(p)
    for k, v in cmp_.summary.items():
        assert back.summary[k] == pytest.approx(v, rel=1e-12)


def test_evaluate_no_overlap(truth):
    with pytest.raises(NoOverlap):
        evaluate_track((truth.t_us[:500] + 10_000_000, truth.q[:500]), truth)
    with pytest.raises(NoOverlap):
        evaluate_track((truth.t_us[:500], truth.q[:500]), truth)


def test_align_identity(truth):
    q_r = align_relative_rotation(truth, truth)
    assert math.hypot(*attitude_difference(q_r, np.array([1.0, 0, 0, 0]))) < 1e-6


def test_align_recovers_rotation(truth, rng):
    q_r = rot(rng.normal(0.0, 1.0, 3) * math.radians(1.0) / math.sqrt(3))
    est = (truth.t_us, np.array([quat_multiply(q_r, q) for q in truth.q]))
    got = align_relative_rotation(est, truth)
    assert math.hypot(*attitude_difference(got, q_r)) < 0.1


def test_align_with_noise(truth, rng):
    q_r = rot([2e-4, -1e-4, 3e-4])
    noisy = [quat_multiply(rot(rng.normal(0.0, 30.0 * ARCSEC, 3)), quat_multiply(q_r, q))
             for q in truth.q]
    got = align_relative_rotation((truth.t_us, np.array(noisy)), truth)
    assert math.hypot(*attitude_difference(got, q_r)) < 5.0


def test_align_no_overlap(truth):
    with pytest.raises(NoOverlap):
        align_relative_rotation((truth.t_us[:5], truth.q[:5]), truth)


# configuration ---------------------------------------------------------------------

def test_parse_config_defaults_and_values(tmp_path):
    cfg = parse_config({"seed": 4, "psf_sigma": 1.5, "tracker": {"spectral_density": 2e-3},
                        "intrinsics": {"principal_point": [600.0, 350.0]}}, str(tmp_path))
    assert cfg.noise.seed == 4
    assert cfg.intrinsics.cx == 600.0
    tc = cfg.tracker_config()
    assert isinstance(tc, TrackerConfig)
    assert tc.spectral_density == 2e-3 and tc.psf_sigma == 1.5
    assert tc.offset_curve is not None


@pytest.mark.parametrize("bad", [
    {"tracker": {"bogus": 1}},
    {"psf_sigma": "wide"},
    {"noise": {"threshold_pos": -1.0}},
    {"tracker": {"spectral_density": 0.0}},
])
def test_parse_config_rejects_bad_input(bad):
    with pytest.raises(ConfigError):
        parse_config(bad).tracker_config()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{\n  \"seed\": ,\n}")
    with pytest.raises(ConfigError, match="line 2"):
        load_config(p)


def test_docs_schema_matches_package():
    docs = json.loads((ROOT / "docs" / "config_schema.json").read_text())
    assert docs == load_schema()


# command line ----------------------------------------------------------------------

def write_config(path, sky, intr, duration=2.0, extra=None):
    ra, _ = find_start(sky, intr, 8, 12)
    data = {
        "seed": 11,
        "catalog": {"n": 5000, "seed": 7, "mag_min": 0.0, "mag_max": 7.0,
                    "min_separation_deg": 0.5},
        "trajectory": {"profile": "constant_slew", "duration": duration,
                       "params": {"axis": "yaw", "rate_deg_s": 0.3, "start": [ra, 20.0, 0.0]}},
        "noise": {"background_rate_hz": 0.0},
        "tracker": {"offset": {"mode": "table", "speeds": [10, 25, 50, 100, 225]}},
        "benchmark": {"n_batches": 20, "mags": [2, 5], "methods": ["mean_positive", "offset"]},
    }
    data.update(extra or {})
    path.write_text(json.dumps(data))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, sky, intr):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "run.json", sky, intr)
    outs = []
    for k in range(2):
        ev, tr, tk = d / f"ev{k}.bin", d / f"truth{k}.csv", d / f"track{k}.csv"
        assert main(["simulate", "--config", str(cfg), "--out-events", str(ev),
                     "--out-truth", str(tr)]) == 0
        assert main(["track", "--config", str(cfg), "--events", str(ev), "--out", str(tk)]) == 0
        outs.append((ev, tr, tk))
    return d, cfg, outs


def test_cli_pipeline_is_deterministic(pipeline):
    _, _, ((e0, t0, k0), (e1, t1, k1)) = pipeline
    assert e0.read_bytes() == e1.read_bytes()
    assert t0.read_bytes() == t1.read_bytes()
    assert k0.read_bytes() == k1.read_bytes()


def test_cli_eval(pipeline, capsys):
    d, _, ((_, truth, trk), _) = pipeline
    code, out, _ = run(capsys, "eval", "--est", trk, "--truth", truth, "--out", d / "cmp.csv")
    assert code == 0
    vals = dict(kv.split("=") for kv in out.split())
    assert float(vals["across_rms_arcsec"]) < 30.0
    code, out, _ = run(capsys, "eval", "--est", truth, "--truth", truth, "--out", d / "self.csv")
    assert code == 0
    vals = dict(kv.split("=") for kv in out.split())
    assert float(vals["across_rms_arcsec"]) < 1e-6 and float(vals["about_rms_arcsec"]) < 1e-6


def test_cli_generators(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-catalog", "--seed", 3, "--n", 200, "--out", tmp_path / "c.csv")
    assert code == 0 and out.strip() == "stars=200"
    code, out, _ = run(capsys, "gen-traj", "--profile", "smooth_sine", "--duration", 1.0,
                       "--start", "10,20,30", "--out", tmp_path / "t.csv")
    assert code == 0 and out.strip() == "samples=1001"


def test_cli_centroid_bench_and_offsets(tmp_path, capsys, sky, intr):
    cfg = write_config(tmp_path / "run.json", sky, intr)
    code, out, _ = run(capsys, "centroid-bench", "--config", cfg, "--out", tmp_path / "b.csv")
    assert code == 0 and out.count("method=") == 2
    code, out, _ = run(capsys, "offset-curve", "--mode", "theory", "--mags", "0:2:1",
                       "--out", tmp_path / "o.csv")
    assert code == 0 and out.strip() == "samples=3"


@pytest.mark.parametrize("argv,kind,code", [
    (["track", "--config", "/nonexistent.json", "--events", "x", "--out", "y"], "ConfigError", 2),
    (["gen-traj", "--profile", "spin", "--duration", "1", "--out", "{tmp}/t.csv"],
     "UnknownProfile", 2),
    (["eval", "--est", "/nonexistent.csv", "--truth", "/nonexistent.csv", "--out", "{tmp}/e.csv"],
     "IOError", 2),
    (["offset-curve", "--mode", "fit", "--out", "{tmp}/o.csv"], "ConfigError", 2),
])
def test_cli_error_format(argv, kind, code, tmp_path, capsys):
    got, out, err = run(capsys, *[a.format(tmp=tmp_path) for a in argv])
    assert got == code
    lines = err.strip().splitlines()
    assert len(lines) == 1
    assert lines[0].startswith(f"error={kind} exit={code} message=\"")
    assert lines[0].endswith("\"")


def test_cli_no_solution_exit_code(tmp_path, capsys, sky, intr):
    cfg = write_config(tmp_path / "run.json", sky, intr, duration=0.5)
    ev, tr = tmp_path / "e.bin", tmp_path / "t.csv"
    assert main(["simulate", "--config", str(cfg), "--out-events", str(ev), "--out-truth", str(tr)]) == 0
    capsys.readouterr()
    # a catalog that does not contain the observed field
    other = tmp_path / "other.json"
    data = json.loads(cfg.read_text())
    data["catalog"] = {"n": 50, "seed": 99}
    other.write_text(json.dumps(data))
    code, _, err = run(capsys, "track", "--config", other, "--events", ev, "--out", tmp_path / "k.csv")
    assert code == 4
    assert err.startswith("error=InitFailure exit=4")
