"""Experiment configuration and seeded end-to-end runs."""

from .config import ExperimentConfig, dump_config, load_config, parse_config
from .experiment import (PreparedRun, RunMetrics, build_data, compare_strategies, export_embeddings,
                         export_stages, prepare_run, run_clients, run_experiment, sweep_k)

__all__ = ["ExperimentConfig", "PreparedRun", "RunMetrics", "build_data", "compare_strategies", "dump_config",
           "export_embeddings", "export_stages", "load_config", "parse_config", "prepare_run", "run_clients",
           "run_experiment", "sweep_k"]
