from __future__ import annotations

import math

import numpy as np


def ceil_int(x: float, rel_tol: float = 1e-9) -> int:
    """Ceiling that ignores floating-point fuzz: 18 / (1 - 0.9) gives 180, not 181.

    Meant for small schedule integers (epoch counts, epoch lengths); the
    tolerance is relative, so it is too coarse for numbers near 1e9.
    """
    r = round(x)
    if abs(x - r) <= rel_tol * max(1.0, abs(x)):
        return int(r)
    return int(math.ceil(x))


class AuditError(AssertionError):
    """A runtime invariant check failed; ``where`` locates the failure."""

    def __init__(self, message: str, where: dict | None = None):
        super().__init__(message)
        self.where = where or {}


def fmt_cell(x):
    """CSV cell text: blanks for None, lowercase booleans, round-trip reprs for floats."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x
