"""Tri-modal (brain / image / text) masked discrete diffusion on numpy.

Submodules are importable on their own; the most common entry points are
re-exported here for convenience.
"""

from . import diffarray, metrics, schedule
from .config import RunConfig, default_config
from .corruption import MODALITIES, TASKS, get_task
from .denoiser import Denoiser, DenoiserConfig
from .sampler import denoise_loop, reverse_step_distribution
from .synthdata import SynthConfig, generate
from .tasks import Trainer, default_curriculum, run_curriculum, unified_loss
from .tokenizer import BrainTokenizer

__version__ = "0.1.0"

__all__ = [
    "diffarray", "metrics", "schedule",
    "RunConfig", "default_config",
    "MODALITIES", "TASKS", "get_task",
    "Denoiser", "DenoiserConfig",
    "denoise_loop", "reverse_step_distribution",
    "SynthConfig", "generate",
    "Trainer", "default_curriculum", "run_curriculum", "unified_loss",
    "BrainTokenizer",
]
