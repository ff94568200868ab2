"""Wasserstein dictionary learning with differentiated Sinkhorn barycenters."""

from .core import (
    CostSpec,
    Grid,
    InstabilityError,
    Kernel,
    ParameterError,
    ValidationError,
    WDLError,
    apply_kernel,
    build_cost,
    build_kernel,
    make_histogram,
    softmax,
    softmax_vjp,
    sqeuclidean_cost,
)

__version__ = "0.1.0"
