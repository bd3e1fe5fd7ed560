"""voxelweave: single-image multi-class 3D reconstruction on offset grids."""

import os as _os

# Honor the worker cap before numpy (and its BLAS) first loads; the backends
# read their thread counts once at library load time.
_threads = _os.environ.get("VOXELWEAVE_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ContractError,
    DegenerateProjection,
    DimensionError,
    MeshIntegrityError,
    NumericError,
    PlacementFailure,
    SceneIntegrityError,
    VoxelWeaveError,
)
from .tensor import Tensor, backward, parameter  # noqa: F401
