"""Multi-reference, pose-guided character animation at toy scale (numpy only)."""

import os

# BLAS thread count; one thread keeps every reduction order fixed
_threads = os.environ.get("PROFASHION_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

from .config import ModelConfig, block_plan  # noqa: E402
from .numcore import ConfigError, DimensionError, EvaluationError, ParamStore  # noqa: E402

__all__ = ["ModelConfig", "block_plan", "ConfigError", "DimensionError", "EvaluationError", "ParamStore"]
__version__ = "0.1.0"
