"""JSON run configuration validated against the shipped schema."""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .centroiding import BenchmarkConfig
from .errors import ConfigError
from .geometry import CameraIntrinsics
from .pixel_model import (NOMINAL_PARAMS, OffsetCurve, PixelCircuitParams, build_offset_curve,
                          build_offset_table)
from .simulator import SensorNoiseParams, SimulationSettings
from .tracker import TrackerConfig

DEFAULT_OFFSET_MAGS = tuple(np.arange(0.0, 7.01, 0.5))
DEFAULT_OFFSET_SPEEDS = (10.0, 25.0, 50.0, 100.0, 150.0, 225.0, 350.0, 500.0, 700.0, 1000.0)
PATH_KEYS = ("catalog", "events", "truth", "output", "offset_curve")


def load_schema():
    with resources.files("ebstrack").joinpath("config_schema.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class RunConfig:
    seed: int = 0
    paths: dict = field(default_factory=dict)
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    circuit: PixelCircuitParams = NOMINAL_PARAMS
    psf_sigma: float = 2.0
    noise: SensorNoiseParams = SensorNoiseParams()
    simulation: SimulationSettings = SimulationSettings()
    segment_s: float = 2.0
    catalog: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    tracker: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)
    base_dir: str = "."

    def path(self, key, required=True, must_exist=False):
        p = self.paths.get(key)
        if p is None:
            if required:
                raise ConfigError(f"config is missing paths.{key}")
            return None
        p = p if os.path.isabs(p) else os.path.join(self.base_dir, p)
        if must_exist and not os.path.exists(p):
            raise ConfigError(f"paths.{key} does not exist: {p}")
        return p

    def offset_model(self):
        """OffsetTable, OffsetCurve or None per tracker.offset."""
        spec = dict(self.tracker.get("offset", {}))
        mode = spec.get("mode", "table")
        mags = spec.get("mags", DEFAULT_OFFSET_MAGS)
        if mode == "none":
            return None
        if mode == "table":
            return build_offset_table(self.circuit, mags, spec.get("speeds", DEFAULT_OFFSET_SPEEDS),
                                      self.psf_sigma)
        if mode == "curve":
            return build_offset_curve(self.circuit, mags, spec.get("speed", 100.0), self.psf_sigma,
                                      normalize=False)
        if mode == "file":
            return OffsetCurve.from_csv(self.path("offset_curve", must_exist=True), normalized=False)
        raise ConfigError(f"unknown offset mode {mode!r}")

    def tracker_config(self):
        t = {k: v for k, v in self.tracker.items() if k != "offset"}
        if t.get("meas_noise") is not None:
            t["meas_noise"] = np.asarray(t["meas_noise"], dtype=float)
        return TrackerConfig(psf_sigma=self.psf_sigma, offset_curve=self.offset_model(), **t)

    def benchmark_config(self):
        b = {k: v for k, v in self.benchmark.items() if k not in ("mags", "methods")}
        return BenchmarkConfig(circuit=self.circuit, **b)

    def trajectory_spec(self):
        spec = dict(profile="velocity_sweep", duration=10.0, sample_dt=1e-3, params={})
        spec.update(self.trajectory)
        return spec


def parse_config(data, base_dir="."):
    import jsonschema

    try:
        jsonschema.validate(data, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    seed = int(data.get("seed", 0))
    try:
        intr_d = dict(data.get("intrinsics", {}))
        if intr_d.get("principal_point") is not None:
            intr_d["principal_point"] = tuple(intr_d["principal_point"])
        intr = CameraIntrinsics(**intr_d)
        circuit = PixelCircuitParams(**{**dataclasses.asdict(NOMINAL_PARAMS), **data.get("circuit", {})})
        noise_d = dict(data.get("noise", {}))
        noise_d.setdefault("seed", seed)
        noise = SensorNoiseParams(**noise_d)
        sim_d = dict(data.get("simulation", {}))
        segment_s = float(sim_d.pop("segment_s", 2.0))
        sim = SimulationSettings(**sim_d)
        cfg = RunConfig(seed=seed, paths=dict(data.get("paths", {})), intrinsics=intr,
                        circuit=circuit, psf_sigma=float(data.get("psf_sigma", 2.0)), noise=noise,
                        simulation=sim, segment_s=segment_s, catalog=dict(data.get("catalog", {})),
                        trajectory=dict(data.get("trajectory", {})),
                        tracker=dict(data.get("tracker", {})),
                        benchmark=dict(data.get("benchmark", {})), base_dir=base_dir)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_config(data, os.path.dirname(os.path.abspath(path)))
