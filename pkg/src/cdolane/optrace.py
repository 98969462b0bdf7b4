"""Lightweight operation tracing.

Instrumented functions call :func:`record` with an operation name. Outside
a :func:`recording` block this is a no-op, so tracing costs one context
variable lookup per call.
"""

from __future__ import annotations

import contextlib
import contextvars

_active: contextvars.ContextVar[list | None] = contextvars.ContextVar("optrace", default=None)


def record(name: str) -> None:
    trace = _active.get()
    if trace is not None:
        trace.append(name)


@contextlib.contextmanager
def recording():
    """Collect the names of all instrumented ops called inside the block."""
    trace: list[str] = []
    token = _active.set(trace)
    try:
        yield trace
    finally:
        _active.reset(token)
