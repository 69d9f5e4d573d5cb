"""Residual tensor-train models for multilinear feature interactions."""

from .model import ResTTParams, Topology, forward, forward_batch, init_params, param_count, predict

__all__ = ["ResTTParams", "Topology", "forward", "forward_batch", "init_params", "param_count", "predict"]
__version__ = "0.1.0"
