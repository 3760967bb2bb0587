"""Configuration, experiment orchestration, sweeps, and file emission."""

from .config import (
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    load_grid,
    parse_config,
    parse_grid,
    render_config,
    validate_config,
)
from .runner import ResultBundle, build_system, make_schedule, replay, run_experiment
from .sweep import run_group, run_sweep

__all__ = [
    "RunConfig",
    "ResultBundle",
    "apply_overrides",
    "build_system",
    "config_hash",
    "load_config",
    "load_grid",
    "make_schedule",
    "parse_config",
    "parse_grid",
    "render_config",
    "replay",
    "run_experiment",
    "run_group",
    "run_sweep",
    "validate_config",
]
