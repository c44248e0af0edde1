from .config import RunConfig
from .runner import evaluate_checkpoint, load_or_train, train

__all__ = ["RunConfig", "evaluate_checkpoint", "load_or_train", "train"]
