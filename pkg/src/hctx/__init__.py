"""Hybrid chunked-attention language model with a recurrent memory bank.

Submodules: ``tensor`` (numpy reverse-mode autograd), ``rope``,
``attention``, ``memory``, ``model`` and the ``harness`` package
(optimizer, tasks, training, checkpoints, benchmark).
"""

from .model import HybridLM, ModelConfig, lm_loss
from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"
__all__ = ["HybridLM", "ModelConfig", "lm_loss", "GradTape", "Tensor", "backward"]
