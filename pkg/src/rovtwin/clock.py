"""Time bases.

All in-process components share one monotonic wall clock (`now_ns`), which is
what message envelopes are stamped with at publish; one-way delay is
recv_ns - stamp_ns and is meaningful only because everything runs on a single
host. Simulation state carries its own nanosecond clock (`SimClock`) advanced
by the integrator, decoupled from wall time so headless runs can be paced
faster than real time.
"""

from __future__ import annotations

import time


def now_ns() -> int:
    """Shared monotonic wall clock, nanoseconds."""
    return time.monotonic_ns()


class SimClock:
    """Simulation time, advanced in fixed steps of dt seconds."""

    def __init__(self, dt: float, start_ns: int = 0):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self._dt_ns = round(dt * 1e9)
        self._t_ns = int(start_ns)

    @property
    def t_ns(self) -> int:
        return self._t_ns

    @property
    def t(self) -> float:
        return self._t_ns * 1e-9

    def tick(self) -> int:
        self._t_ns += self._dt_ns
        return self._t_ns
