"""Basic operations."""


class Calculator:
    """Keeps a running total."""

    def __init__(self, start=0):
        self.total = start

    def add(self, value):
        self.total += value
        return self.total

    def subtract(self, value):
        self.total -= value
        return self.total


def range_sum(lo, hi):
    """Sum of the integers from lo to hi, both inclusive."""
    if hi < lo:
        return 0
    return sum(range(lo, hi))


def clamp(value, lo, hi):
    """Limit value to the closed interval [lo, hi]."""
    return max(lo, min(value, hi))
