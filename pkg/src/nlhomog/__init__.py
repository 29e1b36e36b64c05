"""Homogenization toolkit for periodic nonlocal convolution-type operators.

Submodules:

* ``model``   -- jump kernels, torus grids, periodic fields, lattice folds;
* ``cell``    -- cell-problem solvers and the effective diffusion matrix;
* ``homog``   -- resolvent/semigroup scaling-limit studies on truncated grids;
* ``process`` -- jump-process Monte Carlo and invariance-principle statistics;
* ``cli``     -- config-driven batch driver.
"""

from . import errors
from .model import (
    FoldedKernel,
    KernelMoments,
    KernelSpec,
    Medium,
    PeriodicField,
    TorusGrid,
    fold_kernel,
    fold_moment_kernel,
    kernel_moments,
    mass_function,
    validate_coefficients,
)

__version__ = "0.1.0"

__all__ = [
    "errors",
    "FoldedKernel",
    "KernelMoments",
    "KernelSpec",
    "Medium",
    "PeriodicField",
    "TorusGrid",
    "fold_kernel",
    "fold_moment_kernel",
    "kernel_moments",
    "mass_function",
    "validate_coefficients",
    "__version__",
]
