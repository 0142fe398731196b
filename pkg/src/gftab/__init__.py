"""Semi-supervised tabular classification with geodesic-flow view similarity."""

from .corruption import CategoricalCorruptionCfg, ContinuousCorruptionCfg, categorical_views, permute_mix
from .encoder import EncoderConfig, GFTabEncoder
from .geodesic import DegenerateSubspace, gfk_matrix, gfk_similarity, kernel_from_views
from .harness import RunRecord, ResultsStore, report, run_experiment, win_matrix
from .metrics import WinMatrix, macro_f1
from .tabular import DatasetSchema, SemiSplit, TabularDataset, generate_synthetic, ingest, make_split
from .trainer import GFTabModel, TrainConfig, fit, load_checkpoint, save_checkpoint
from .trees import GbdtConfig, GbdtModel, train_gbdt

__version__ = "0.1.0"

__all__ = [
    "CategoricalCorruptionCfg",
    "ContinuousCorruptionCfg",
    "DatasetSchema",
    "DegenerateSubspace",
    "EncoderConfig",
    "GFTabEncoder",
    "GFTabModel",
    "GbdtConfig",
    "GbdtModel",
    "ResultsStore",
    "RunRecord",
    "SemiSplit",
    "TabularDataset",
    "TrainConfig",
    "WinMatrix",
    "categorical_views",
    "fit",
    "generate_synthetic",
    "gfk_matrix",
    "gfk_similarity",
    "ingest",
    "kernel_from_views",
    "load_checkpoint",
    "macro_f1",
    "make_split",
    "permute_mix",
    "report",
    "run_experiment",
    "save_checkpoint",
    "train_gbdt",
    "win_matrix",
]
