"""Record the discrete choices a forward pass makes.

Piecewise ops (LeakyReLU and abs signs, clamps, window placement, bilinear
cells) note which branch each element took while a recorder is active.
Two forward passes with equal records lie on the same smooth piece, which
is what a finite-difference gradient check needs to be meaningful.
"""

from __future__ import annotations

import contextlib
import contextvars

import numpy as np

_active: contextvars.ContextVar[list | None] = contextvars.ContextVar("branches", default=None)


def active() -> bool:
    return _active.get() is not None


def note(kind: str, choice) -> None:
    rec = _active.get()
    if rec is None:
        return
    arr = np.asarray(choice)
    payload = np.packbits(arr).tobytes() if arr.dtype == bool else np.ascontiguousarray(arr).tobytes()
    rec.append((kind, arr.shape, payload))


@contextlib.contextmanager
def recording():
    """Yield the list of ``(kind, shape, payload)`` notes made inside the block."""
    rec: list = []
    token = _active.set(rec)
    try:
        yield rec
    finally:
        _active.reset(token)
