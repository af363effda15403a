from .lstm import LstmDetector, StaleCacheError, bce_grad, bce_loss, bce_with_logits, sigmoid
from .optim import OptimizerState, optimizer_step
from .training import Metrics, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "LstmDetector", "StaleCacheError", "bce_grad", "bce_loss", "bce_with_logits", "sigmoid",
    "OptimizerState", "optimizer_step", "Metrics", "evaluate", "load_checkpoint", "save_checkpoint", "train",
]
