"""Event-based star tracking: sensor model, simulator, centroiding and attitude tracker."""

from ._kernels import BACKEND
from .catalog import StarCatalog, gen_synthetic_catalog, load_catalog, save_catalog, stars_in_fov
from .centroiding import BenchmarkConfig, centroid_benchmark, centroid_mle
from .errors import EbsTrackError
from .evaluation import align_relative_rotation, evaluate_track
from .events import EventStream, EventWriter, iter_events, read_events, write_events
from .geometry import CameraIntrinsics, CelestialAttitude, boxminus, boxplus, project_star
from .lost_in_space import dbscan, plate_solve, wahba_solve
from .pixel_model import (NOMINAL_PARAMS, OffsetCurve, OffsetTable, PixelCircuitParams,
                          build_offset_curve, build_offset_table, theoretical_offset)
from .simulator import SensorNoiseParams, SimulationSettings, simulate_events, simulate_segments
from .tracker import Tracker, TrackerConfig, track, read_track, write_track
from .trajectory import Trajectory, gen_trajectory, read_truth, write_truth

__version__ = "0.1.0"
