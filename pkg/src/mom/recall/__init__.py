"""Multi-query associative recall: data, model, training and experiments."""
from .config import ExperimentConfig, dump_config, load_config
from .data import RecallDataset, RecallTaskConfig, gen_recall_dataset
from .experiments import RunCache, compare, memory_sweep_configs, routing_imbalance
from .train import RunRecord, evaluate, train, write_run

__all__ = [
    "ExperimentConfig", "dump_config", "load_config",
    "RecallDataset", "RecallTaskConfig", "gen_recall_dataset",
    "RunCache", "compare", "memory_sweep_configs", "routing_imbalance",
    "RunRecord", "evaluate", "train", "write_run",
]
