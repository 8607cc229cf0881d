"""Instrumented multiply-accumulate counting for kernel executions.

Two conventions are tracked side by side:

* ``macs``: every multiply the kernel executes, including taps that read
  zero padding (the convention behind the closed-form cost expressions).
* ``interior_macs``: only taps whose input index lands inside the unpadded
  extent. Under valid padding the two counts coincide.
"""

from __future__ import annotations

import threading
from contextvars import ContextVar
from typing import Callable

_ACTIVE: ContextVar["CountingContext | None"] = ContextVar("sep3d_counting", default=None)


class CountingContext:
    """Accumulates executed MACs for kernels run inside a ``with`` block."""

    def __init__(self) -> None:
        self.macs = 0
        self.interior_macs = 0
        self._lock = threading.Lock()
        self._token = None

    def add(self, macs: int, interior_macs: int) -> None:
        with self._lock:
            self.macs += int(macs)
            self.interior_macs += int(interior_macs)

    def __enter__(self) -> "CountingContext":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _ACTIVE.reset(self._token)
        self._token = None


def record(macs: int, interior_macs: int | None = None) -> None:
    """Called by kernels; a no-op unless a context is active."""
    ctx = _ACTIVE.get()
    if ctx is not None:
        ctx.add(macs, macs if interior_macs is None else interior_macs)


def measured_macs(fn: Callable[[], object], interior: bool = False) -> int:
    """Run fn under a fresh counting context and return its MAC count."""
    with CountingContext() as ctx:
        fn()
    return ctx.interior_macs if interior else ctx.macs
