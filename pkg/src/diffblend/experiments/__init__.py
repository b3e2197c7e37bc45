"""Config-driven experiment runners and the ``diffblend`` command line."""

from .config import ConfigError, Experiment, build, config_hash, load_config
from .runner import (RunRecord, run_fit, run_jensen_report, run_kla_sweep, run_pareto, run_sample,
                     run_validate)

__all__ = ["ConfigError", "Experiment", "RunRecord", "build", "config_hash", "load_config", "run_fit",
           "run_jensen_report", "run_kla_sweep", "run_pareto", "run_sample", "run_validate"]
