"""Benchmark cases, configuration and the command line."""
from .cases import compare_runs, run_case
from .config import CaseConfig, parse_config

__all__ = ["CaseConfig", "compare_runs", "parse_config", "run_case"]
