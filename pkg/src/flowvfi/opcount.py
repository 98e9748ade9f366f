"""Multiply-add instrumentation for forward passes.

Counting is opt-in and scoped: ops consult the accumulator bound to the
current context, so concurrent invocations never share counters.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter

_active: contextvars.ContextVar[Counter | None] = contextvars.ContextVar("opcount", default=None)


def record(kind: str, madds: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter[kind] += int(madds)


@contextlib.contextmanager
def counting():
    """Collect multiply-add counts per op kind for the enclosed calls."""
    counter: Counter = Counter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)
