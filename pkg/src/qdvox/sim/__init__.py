"""2D mass-spring voxel soft-body simulation and the walking task.

The inner loops live in a compiled extension (``_kernels_cy``). If it is not
importable, or ``QDVOX_PURE_PYTHON=1`` is set, the numpy twin in
``_kernels_py`` is used instead. ``BACKEND`` names the active one.
"""
import os

if os.environ.get("QDVOX_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as kernels
    BACKEND = "python"
else:
    try:
        from . import _kernels_cy as kernels
        BACKEND = "cython"
    except ImportError:  # extension not built
        from . import _kernels_py as kernels
        BACKEND = "python"

from .body import (  # noqa: E402
    SoftBody,
    TaskConfig,
    RolloutResult,
    build_body,
    observe,
    reward_step,
    rollout,
    step,
    write_trajectory_csv,
)

__all__ = [
    "BACKEND",
    "SoftBody",
    "TaskConfig",
    "RolloutResult",
    "build_body",
    "observe",
    "reward_step",
    "rollout",
    "step",
    "write_trajectory_csv",
    "kernels",
]
