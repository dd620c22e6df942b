"""Solvers for the implicit relations inside each integration step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit


class NonConvergence(RuntimeError):
    """Fixed-point iteration exhausted ``max_iter`` without meeting ``tol``."""

    def __init__(self, message, iterate=None, residual=float("nan"), iterations=0, step=None):
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, dtype=float)
        self.residual = residual
        self.iterations = iterations
        self.step = step


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-13
    max_iter: int = 100
    damping: float = 1.0

    def __post_init__(self):
        if not (self.tol > 0):
            raise ValueError("tol must be positive")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ValueError("max_iter must be a positive integer")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    final_residual: float
    converged: bool


def solve_fixed_point(map: Callable, guess, settings: SolverSettings = SolverSettings()):
    """Damped fixed-point iteration ``z <- (1 - d) z + d map(z)``.

    The residual is ``|z - map(z)|`` at the iterate *before* the update.
    Returns the updated iterate and a :class:`SolveReport`; raises
    :class:`NonConvergence` after ``settings.max_iter`` iterations or on a
    non-finite residual.
    """
    z = np.array(guess, dtype=float)
    d = settings.damping
    res = float("inf")
    for it in range(1, settings.max_iter + 1):
        mz = np.asarray(map(z), dtype=float)
        res = float(np.linalg.norm(mz - z))
        if not np.isfinite(res):
            break
        z = (1.0 - d) * z + d * mz
        if res <= settings.tol:
            return z, SolveReport(it, res, True)
    raise NonConvergence(
        f"fixed-point iteration did not converge (residual {res:.3e})",
        iterate=z, residual=res, iterations=it,
    )


@njit(cache=True)
def cross(a, b):
    out = np.empty(3)
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]
    return out


@njit(cache=True)
def norm3(a):
    return np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


@njit(cache=True)
def solve_cross_linear(t, r):
    """Solve ``v + t × v = r`` exactly.

    ``v = (r - t × r + (t·r) t) / (1 + |t|^2)``; the system matrix
    ``I + [t]×`` is nonsingular for every ``t``.
    """
    tr = t[0] * r[0] + t[1] * r[1] + t[2] * r[2]
    den = 1.0 + t[0] * t[0] + t[1] * t[1] + t[2] * t[2]
    c = cross(t, r)
    out = np.empty(3)
    for i in range(3):
        out[i] = (r[i] - c[i] + tr * t[i]) / den
    return out
