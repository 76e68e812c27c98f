"""Masked-autoencoder pre-training and evaluation for DAS waterfall plots.

Pure-numpy numerics with a reverse-mode autodiff tape; loop-heavy kernels
are JIT-compiled with numba when available (see `dasmae.kernels`).
"""

import os

# DAS_MAE_THREADS caps internal parallelism (default 1 for determinism).
# BLAS pools are configured via env vars, so this must run before numpy
# is imported anywhere in the process; setdefault keeps explicit user
# settings intact.
_threads = os.environ.get("DAS_MAE_THREADS", "1")
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, _threads)
del _threads, _var

from .errors import (  # noqa: E402
    ContractError,
    DasMaeError,
    DegenerateInputError,
    FormatError,
    InputError,
    NumericalDegeneracyError,
    ShapeError,
    StrategyInapplicableError,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DasMaeError",
    "DegenerateInputError",
    "FormatError",
    "InputError",
    "NumericalDegeneracyError",
    "ShapeError",
    "StrategyInapplicableError",
    "__version__",
]
