"""A numpy Transformer toolkit for the SCAN compositional generalization benchmark.

Modules: ``autodiff`` (reverse-mode tensors), ``scan`` (grammar, splits, I/O),
``attention`` (gated, convolutional, fixed-span and relative-bias mixers),
``model`` (encoder/decoder and checkpoints), ``training`` (Adam, batching,
grids) and ``evaluation`` (greedy decoding, reports, bias export).
"""

from .autodiff import Tensor, backward, grad_check, no_grad, precision
from .model import ModelConfig, Seq2SeqModel
from .scan import Split, SplitSpec, build_split, interpret
from .training import TrainConfig, fit, grid_run
from .evaluation import evaluate, exact_match_accuracy, export_bias, greedy_decode

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad", "precision",
    "ModelConfig", "Seq2SeqModel",
    "Split", "SplitSpec", "build_split", "interpret",
    "TrainConfig", "fit", "grid_run",
    "evaluate", "exact_match_accuracy", "export_bias", "greedy_decode",
]
