"""Visual-inertial-ranging odometry with UWB anchor initialization,
first-estimate-consistent fusion and a simulation/evaluation harness."""

from .pipeline import RunConfig, run_pipeline
from .sim import SimConfig, gen_trajectory, simulate
from .state import FilterState, ImuState

__all__ = [
    "RunConfig", "run_pipeline",
    "SimConfig", "gen_trajectory", "simulate",
    "FilterState", "ImuState",
]
