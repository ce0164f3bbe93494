"""Fixed-step Runge-Kutta integration over the unit flow-time interval.

Fields are evaluated on a shared grid of 2*steps+1 half-step times, so
callers can precompute anything that depends on time alone and look it up
by grid index.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import SolverConfig

FORWARD = "forward"
REVERSE = "reverse"


class DivergenceError(FloatingPointError):
    """Raised when the state stops being finite during stepping."""

    def __init__(self, step: int, where: str = ""):
        self.step = step
        self.where = where
        super().__init__(f"non-finite state at step {step}" + (f" ({where})" if where else ""))


def step_size(direction: str, steps: int) -> float:
    if direction == FORWARD:
        return 1.0 / steps
    if direction == REVERSE:
        return -1.0 / steps
    raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")


def stage_times(direction: str, steps: int) -> np.ndarray:
    """Times visited by RK4; index 2k is the start of step k."""
    h = step_size(direction, steps)
    t0 = 0.0 if direction == FORWARD else 1.0
    return t0 + 0.5 * h * np.arange(2 * steps + 1)


def rk4_indexed(field: Callable, w0: np.ndarray, h: float, steps: int, where: str = ""):
    """RK4 with ``field(w, i)`` evaluated at grid index i."""
    w = w0
    for k in range(steps):
        i = 2 * k
        k1 = field(w, i)
        k2 = field(w + 0.5 * h * k1, i + 1)
        k3 = field(w + 0.5 * h * k2, i + 1)
        k4 = field(w + h * k3, i + 2)
        w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(w).all():
            raise DivergenceError(k, where)
    return w


def rk4_trace_indexed(field: Callable, w0: np.ndarray, h: float, steps: int, where: str = ""):
    """RK4 on the state augmented with the trace integral.

    ``field(w, i)`` returns ``(dw, trace)``. The integral is accumulated with
    positive orientation (over t from 0 to 1) regardless of direction.
    """
    w = w0
    acc = np.zeros(w0.shape[:-1])
    ah = abs(h) / 6.0
    for k in range(steps):
        i = 2 * k
        k1, a1 = field(w, i)
        k2, a2 = field(w + 0.5 * h * k1, i + 1)
        k3, a3 = field(w + 0.5 * h * k2, i + 1)
        k4, a4 = field(w + h * k3, i + 2)
        w = w + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        acc = acc + ah * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        if not (np.isfinite(w).all() and np.isfinite(acc).all()):
            raise DivergenceError(k, where)
    return w, acc


def integrate(dynamics: Callable, w0, score, direction: str = FORWARD,
              solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """Integrate dw/dt = dynamics(w, t, score) across [0, 1].

    ``direction='reverse'`` runs from t=1 back to t=0. The score is held
    fixed while the time argument advances with each stage.
    """
    times = stage_times(direction, solver.steps)
    h = step_size(direction, solver.steps)
    w0 = np.asarray(w0, dtype=np.float64)
    return rk4_indexed(lambda w, i: dynamics(w, times[i], score), w0, h, solver.steps)


def integrate_with_trace(dynamics: Callable, w0, score, direction: str = FORWARD,
                         solver: SolverConfig = SolverConfig()):
    """As :func:`integrate`, with ``dynamics`` returning ``(dw, trace)``."""
    times = stage_times(direction, solver.steps)
    h = step_size(direction, solver.steps)
    w0 = np.asarray(w0, dtype=np.float64)
    return rk4_trace_indexed(lambda w, i: dynamics(w, times[i], score), w0, h, solver.steps)
