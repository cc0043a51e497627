"""Knowledge-fused, gate-controlled, safety-modulated toy language model.

The package trains a small decoder-only character model that answers
questions by copying facts out of retrieved documents, gates how much of a
fused knowledge embedding enters the backbone, and suppresses unsafe
continuations at decode time. Everything runs on a self-contained
reverse-mode tensor core so gradients can be verified against finite
differences end to end.
"""

from .autodiff import Tensor, Tape, finite_difference_check
from .config import ModelConfig
from .text import Vocabulary, Sample

__all__ = [
    "Tensor",
    "Tape",
    "finite_difference_check",
    "ModelConfig",
    "Vocabulary",
    "Sample",
]

__version__ = "0.1.0"
