"""Goal-conditioned flow-matching world model and action expert for planar
manipulation, with multi-scale temporal horizons and online hindsight
self-improvement."""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
