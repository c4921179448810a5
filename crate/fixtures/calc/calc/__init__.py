"""Tiny arithmetic helpers used as a repair fixture."""

from calc.ops import Calculator, range_sum, clamp
from calc.stats import mean, median

__all__ = ["Calculator", "range_sum", "clamp", "mean", "median"]
