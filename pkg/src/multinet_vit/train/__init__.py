from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from .losses import DistillMode, cross_entropy, distillation_loss, kl_soft, one_hot
from .loop import EvalResult, NumericalError, TrainConfig, TrainResult, evaluate, model_loss, seed_streams, train
from .optim import Adam, adam_step

__all__ = [
    "Checkpoint", "CheckpointError", "load_checkpoint", "read_checkpoint", "save_checkpoint", "DistillMode",
    "cross_entropy", "distillation_loss", "kl_soft", "one_hot", "EvalResult", "NumericalError", "TrainConfig",
    "TrainResult", "evaluate", "model_loss", "seed_streams", "train", "Adam", "adam_step",
]
