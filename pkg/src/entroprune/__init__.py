"""Entropy-guided attention-layer removal for small vision transformers."""

import os as _os

# ENTROPRUNE_THREADS caps BLAS threads; must be set before numpy loads its backend.
_threads = _os.environ.get("ENTROPRUNE_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .vit import (BlockMode, Mode, ViTConfig, ViTModel, load_checkpoint,  # noqa: E402
                  param_count, save_checkpoint)

__version__ = "0.1.0"

__all__ = ["BlockMode", "Mode", "ViTConfig", "ViTModel", "load_checkpoint", "param_count",
           "save_checkpoint"]
