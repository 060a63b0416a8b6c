"""Continual medical-style image segmentation with low-rank mixture-of-experts.

A numpy autograd core drives a small transformer segmenter whose linear
layers carry per-task low-rank adapters. New tasks (or new classes) append a
fresh expert while every earlier tensor stays frozen, so old predictions are
reproduced bit for bit.
"""

import os as _os

# LOMOE_THREADS caps BLAS worker threads; it must be set before numpy loads.
if "LOMOE_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["LOMOE_THREADS"])

from . import tensor  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .data import TaskSpec, gen_task_dataset  # noqa: E402
from .errors import *  # noqa: E402,F401,F403
from .gating import TaskRegistry, add_expert, classify_task  # noqa: E402
from .model import ModelConfig, SegBackbone, merge_model  # noqa: E402
from .training import RunPlan, StepPlan, run_continual  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "tensor", "load_checkpoint", "save_checkpoint", "TaskSpec", "gen_task_dataset", "TaskRegistry",
    "add_expert", "classify_task", "ModelConfig", "SegBackbone", "merge_model", "RunPlan", "StepPlan",
    "run_continual",
]
