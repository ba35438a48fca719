"""Command-line entry point: ``ebstrack <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 no
solution (initialization or plate solving).  Failures print one line on
stderr: ``error=<Kind> exit=<code> message="<text>"``.
"""

import argparse
import json
import sys
import time

import numpy as np

from .errors import ConfigError, EbsTrackError, ParseError


def _floats(text):
    """'0,1,2' or 'start:stop:step' (stop inclusive) -> list of floats."""
    text = text.strip()
    if ":" in text:
        a, b, s = (float(v) for v in text.split(":"))
        if s <= 0:
            raise ConfigError("range step must be positive")
        return list(np.round(np.arange(a, b + 0.5 * s, s), 12))
    return [float(v) for v in text.split(",") if v.strip()]


def _catalog_for(cfg, must_exist=True):
    from .catalog import gen_synthetic_catalog, load_catalog

    cutoff = cfg.catalog.get("cutoff", 7.0)
    p = cfg.path("catalog", required=False, must_exist=must_exist)
    if p is not None:
        return load_catalog(p, cutoff)
    if "n" in cfg.catalog:
        c = cfg.catalog
        return gen_synthetic_catalog(c.get("seed", cfg.seed), c["n"],
                                     (c.get("mag_min", 0.0), c.get("mag_max", 7.0)),
                                     c.get("min_separation_deg", 0.0), cutoff)
    raise ConfigError("config needs paths.catalog or catalog.n")


def _trajectory_for(cfg):
    from .trajectory import gen_trajectory

    spec = cfg.trajectory_spec()
    return gen_trajectory(spec["profile"], spec["params"], spec["duration"], spec["sample_dt"])


def cmd_gen_catalog(args):
    from .catalog import gen_synthetic_catalog, save_catalog

    cutoff = max(7.0, args.mag_max) if args.cutoff is None else args.cutoff
    cat = gen_synthetic_catalog(args.seed, args.n, (args.mag_min, args.mag_max), args.min_sep, cutoff)
    save_catalog(cat, args.out)
    print(f"stars={len(cat)}")


def cmd_gen_traj(args):
    from .trajectory import gen_trajectory, write_truth

    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc.msg}") from None
    if args.start:
        params["start"] = [float(v) for v in args.start.split(",")]
    traj = gen_trajectory(args.profile, params, args.duration, args.sample_dt)
    write_truth(traj, args.out)
    print(f"samples={len(traj)}")


def cmd_simulate(args):
    from .config import load_config
    from .events import EventWriter
    from .simulator import simulate_segments
    from .trajectory import write_truth

    cfg = load_config(args.config)
    cat = _catalog_for(cfg)
    traj = _trajectory_for(cfg)
    write_truth(traj, args.out_truth)
    intr = cfg.intrinsics
    n = 0
    with EventWriter(args.out_events, intr.width, intr.height) as w:
        for seg in simulate_segments(cat, traj, intr, cfg.circuit, cfg.noise, cfg.psf_sigma,
                                     segment_s=cfg.segment_s, settings=cfg.simulation):
            w.write(seg)
            n += len(seg)
    print(f"events={n} truth_samples={len(traj)}")


def cmd_track(args):
    from .config import load_config
    from .events import iter_events
    from .tracker import Tracker, write_track

    cfg = load_config(args.config)
    cat = _catalog_for(cfg)
    tcfg = cfg.tracker_config()
    tr = Tracker(cat, cfg.intrinsics, tcfg)
    t0 = time.perf_counter()
    for chunk in iter_events(args.events):
        tr.feed(chunk)
    res = tr.result()
    el = time.perf_counter() - t0
    write_track(res, args.out)
    rate = res.n_events / el if el > 0 else float("inf")
    print(f"heartbeats={len(res)} positive_events={res.n_events} elapsed_s={el:.3f} "
          f"events_per_s={rate:.0f}")


def cmd_eval(args):
    from .evaluation import align_relative_rotation, evaluate_track
    from .tracker import read_track
    from .trajectory import read_truth

    try:
        est = read_track(args.est)
    except ParseError:
        # a truth-format file is also accepted as the estimate
        est = read_truth(args.est)
    truth = read_truth(args.truth)
    q_r = align_relative_rotation(est, truth) if args.align else None
    cmp_ = evaluate_track(est, truth, q_r, args.transient)
    cmp_.to_csv(args.out)
    s = cmp_.summary
    print(f"across_rms_arcsec={s['across_rms']:.6g} about_rms_arcsec={s['about_rms']:.6g}")


def cmd_centroid_bench(args):
    from .centroiding import METHODS, centroid_benchmark, write_benchmark_csv
    from .config import load_config

    cfg = load_config(args.config)
    bcfg = cfg.benchmark_config()
    mags = cfg.benchmark.get("mags", list(range(8)))
    methods = tuple(cfg.benchmark.get("methods", METHODS))
    rows = centroid_benchmark(bcfg, methods, mags)
    write_benchmark_csv(rows, args.out)
    for meth in methods:
        errs = [r.mean_abs_err_px for r in rows if r.method == meth]
        print(f"method={meth} mean_abs_err_px={np.nanmean(errs):.4f}")


def cmd_offset_curve(args):
    from .pixel_model import (NOMINAL_PARAMS, OffsetCurve, build_offset_curve,
                              empirical_offset_curve, fit_circuit_params)

    circuit, sigma = NOMINAL_PARAMS, 2.0
    cfg = None
    if args.config:
        from .config import load_config

        cfg = load_config(args.config)
        circuit, sigma = cfg.circuit, cfg.psf_sigma
    if args.sigma is not None:
        sigma = args.sigma
    if args.mode == "theory":
        curve = build_offset_curve(circuit, _floats(args.mags), args.speed, sigma,
                                   normalize=args.normalize)
    elif args.mode == "empirical":
        from .catalog import load_catalog
        from .events import read_events
        from .trajectory import read_truth

        if not (args.events and args.truth):
            raise ConfigError("empirical mode needs --events and --truth")
        if args.catalog:
            cat = load_catalog(args.catalog)
        elif cfg is not None:
            cat = _catalog_for(cfg)
        else:
            raise ConfigError("empirical mode needs --catalog or --config")
        intr = cfg.intrinsics if cfg is not None else None
        if intr is None:
            from .geometry import CameraIntrinsics

            intr = CameraIntrinsics()
        curve = empirical_offset_curve(read_events(args.events), read_truth(args.truth), cat, intr,
                                       _floats(args.mag_bins), args.gate_radius, args.normalize,
                                       args.min_count)
    else:
        if not args.empirical:
            raise ConfigError("fit mode needs --empirical")
        emp = OffsetCurve.from_csv(args.empirical)
        fit = fit_circuit_params(emp, args.speed, sigma, circuit)
        curve = build_offset_curve(fit.params, emp.mags, args.speed, sigma,
                                   normalize=emp.normalized)
        print(f"I0={fit.params.I0:.6g} a={fit.params.a:.6g} b={fit.params.b:.6g} "
              f"residual={fit.residual:.6g}")
    curve.to_csv(args.out)
    print(f"samples={len(curve.mags)}")


def build_parser():
    p = argparse.ArgumentParser(prog="ebstrack", description="Event-based star tracking toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-catalog", help="synthetic star catalog CSV")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--mag-min", type=float, default=0.0)
    g.add_argument("--mag-max", type=float, default=7.0)
    g.add_argument("--min-sep", type=float, default=0.0, help="minimum separation, degrees")
    g.add_argument("--cutoff", type=float, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_catalog)

    g = sub.add_parser("gen-traj", help="truth trajectory CSV")
    g.add_argument("--profile", required=True)
    g.add_argument("--duration", type=float, required=True)
    g.add_argument("--params", default=None, help="profile parameters as JSON")
    g.add_argument("--start", default=None, help="ra,dec,roll in degrees")
    g.add_argument("--sample-dt", type=float, default=1e-3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_traj)

    g = sub.add_parser("simulate", help="event stream and truth from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out-events", required=True)
    g.add_argument("--out-truth", required=True)
    g.set_defaults(func=cmd_simulate)

    g = sub.add_parser("track", help="track an event file")
    g.add_argument("--config", required=True)
    g.add_argument("--events", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_track)

    g = sub.add_parser("eval", help="compare a track with truth")
    g.add_argument("--est", required=True)
    g.add_argument("--truth", required=True)
    g.add_argument("--align", action="store_true", help="estimate and remove a relative rotation")
    g.add_argument("--transient", type=float, default=1.0, help="seconds excluded from summary")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_eval)

    g = sub.add_parser("centroid-bench", help="centroiding benchmark CSV")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_centroid_bench)

    g = sub.add_parser("offset-curve", help="offset curve CSV")
    g.add_argument("--mode", choices=("theory", "empirical", "fit"), required=True)
    g.add_argument("--config", default=None)
    g.add_argument("--mags", default="0:7:0.5")
    g.add_argument("--speed", type=float, default=50.0, help="image speed, px/s")
    g.add_argument("--sigma", type=float, default=None, help="PSF sigma, px")
    g.add_argument("--normalize", action="store_true")
    g.add_argument("--events", default=None)
    g.add_argument("--truth", default=None)
    g.add_argument("--catalog", default=None)
    g.add_argument("--mag-bins", default="0:7:1")
    g.add_argument("--gate-radius", type=float, default=10.0)
    g.add_argument("--min-count", type=int, default=100)
    g.add_argument("--empirical", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_offset_curve)
    return p


def _report(kind, code, message):
    msg = str(message).replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    print(f'error={kind} exit={code} message="{msg}"', file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except EbsTrackError as exc:
        return _report(exc.kind, exc.exit_code, exc)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _report("IOError", 2, exc)
    except (ValueError, TypeError) as exc:
        return _report("InvalidArgument", 2, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
