"""Sequential recommendation with decoupled side-information attention, on numpy."""

from .dataset import InteractionDataset, ingest, split_leave_one_out
from .estimator import SequentialRecommender
from .evaluation import EvalReport, evaluate
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .train import fit

__all__ = [
    "EvalReport",
    "InteractionDataset",
    "ModelConfig",
    "SequentialRecommender",
    "evaluate",
    "fit",
    "ingest",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "split_leave_one_out",
]

__version__ = "0.1.0"
