"""Task data, configuration, evaluation and the end-to-end pipeline."""

from .config import ConfigError, ExperimentConfig, load_config
from .evaluate import evaluate
from .pipeline import Pipeline, StageError, run_pipeline, sweep
from .tasks import TaskDataset, export_jsonl, gen_synthetic_task, ingest_jsonl

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "evaluate",
    "Pipeline",
    "StageError",
    "run_pipeline",
    "sweep",
    "TaskDataset",
    "export_jsonl",
    "gen_synthetic_task",
    "ingest_jsonl",
]
