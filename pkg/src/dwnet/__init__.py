"""Multi-wave U-Net surrogates for 2D multi-scale dynamics.

Subpackages: tensor (autodiff core), models (the six architecture families),
training, metrics, solvers (Kolmogorov / Hasegawa-Wakatani generators),
trajectory (binary dataset format), sweep (Pareto harness), cli.
"""

from .tensor import PaddingMode, Tape, Tensor, backward

__all__ = ["PaddingMode", "Tape", "Tensor", "backward"]
__version__ = "0.1.0"
