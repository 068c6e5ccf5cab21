"""Formation analysis and control of autonomous vehicles on a mixed-traffic ring road."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    AccGains,
    FormationSet,
    LinearHdvCoeffs,
    ModelError,
    OvmParams,
    build_acc_closed_loop,
    build_open_loop,
    linearize,
)
from .perf import PerformanceWeights, j1, j2, synthesize  # noqa: E402
from .search import optimal_formation, submodularity_check  # noqa: E402

__all__ = [
    "AccGains",
    "FormationSet",
    "LinearHdvCoeffs",
    "ModelError",
    "OvmParams",
    "PerformanceWeights",
    "build_acc_closed_loop",
    "build_open_loop",
    "j1",
    "j2",
    "linearize",
    "optimal_formation",
    "submodularity_check",
    "synthesize",
]
