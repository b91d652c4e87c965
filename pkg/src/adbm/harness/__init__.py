from .config import ExperimentConfig, load_config, override
from .datasets import DATASETS, Dataset, gen_dataset, load_dataset, save_dataset
from .pipeline import PipelineError, run_pipeline
from .report import ReportSchemaError, merge_reports

__all__ = ["ExperimentConfig", "load_config", "override", "DATASETS", "Dataset", "gen_dataset",
           "load_dataset", "save_dataset", "PipelineError", "run_pipeline", "ReportSchemaError",
           "merge_reports"]
