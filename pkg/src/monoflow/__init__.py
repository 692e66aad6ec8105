"""Solvers and convex-residual verification for differential inclusions
driven by maximal monotone operators."""

__version__ = "0.1.0"

from . import backward_tree, cli, fitzpatrick, forward_sde, gsp, operators, paths, variational
from .operators import (
    GraphPair,
    OperatorSpec,
    graph_sample,
    linear_monotone,
    monotonicity_certificate,
    normal_cone_ball,
    normal_cone_box,
    operator_sum,
    resolvent,
    scaled_identity,
    subdiff_abs_sum,
    subdiff_indicator_interval,
    yosida,
)
from .paths import BVPath, GridPath, bv_path, grid_path, uniform_grid

__all__ = [
    "backward_tree", "cli", "fitzpatrick", "forward_sde", "gsp", "operators",
    "paths", "variational",
    "GraphPair", "OperatorSpec", "graph_sample", "linear_monotone",
    "monotonicity_certificate", "normal_cone_ball", "normal_cone_box",
    "operator_sum", "resolvent", "scaled_identity", "subdiff_abs_sum",
    "subdiff_indicator_interval", "yosida",
    "BVPath", "GridPath", "bv_path", "grid_path", "uniform_grid",
    "__version__",
]
