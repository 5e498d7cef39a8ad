"""Mixed-precision training sandbox.

Simulated narrow float formats, per-tensor precision assignment schemes,
a small rounded-training engine with dynamic loss scaling and
overflow-driven promotion, and an executable reduction showing that
optimal precision assignment under an accuracy/footprint tradeoff
embeds 0/1 knapsack.
"""

from .fpnum import FP32, FpFormat, round_tensor, round_value

__all__ = ["FP32", "FpFormat", "round_value", "round_tensor"]
__version__ = "0.1.0"
