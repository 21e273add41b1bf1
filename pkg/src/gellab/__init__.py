"""gellab: numerical laboratory for gelling coagulation dynamics with
product kernels (xy)^(lam/2), 1 < lam < 2."""

from .params import Field, LogGrid, ModelParams, Trajectory
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "Field",
    "LogGrid",
    "ModelParams",
    "Trajectory",
    "BACKEND",
    "__version__",
]
