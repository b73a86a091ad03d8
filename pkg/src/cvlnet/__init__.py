"""Complementary visual-linguistic (CVL) meme classifier on a small numpy autodiff engine."""

from .data_io import MemeBatch, SynthSpec, encode_dataset, synth_generate
from .evaluation import PredictionSet, auroc, ensemble_average, evaluate
from .model import CvlModel, ModelConfig, forward, load_checkpoint, loss, predict, save_checkpoint
from .representation import Vocabulary
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CvlModel", "MemeBatch", "ModelConfig", "PredictionSet", "SynthSpec", "Tensor", "TrainConfig", "Vocabulary",
    "auroc", "encode_dataset", "ensemble_average", "evaluate", "forward", "grad_check", "load_checkpoint", "loss",
    "no_grad", "predict", "save_checkpoint", "synth_generate", "train",
]
