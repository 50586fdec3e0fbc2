"""Two-stage vision-language ReID training with self-supervision, at desk scale.

Stage 1 learns per-identity prompt tokens against frozen encoders; stage 2
fine-tunes the image encoder against the frozen identity text features. Both
stages add an NT-Xent self-supervised term (masked prompts, erased images).
"""
from ._kernels import backend
from .config import default_config, load_config

__version__ = "0.1.0"

__all__ = ["backend", "default_config", "load_config", "__version__"]
