"""Segment recomputation: keep only segment boundaries, rebuild the inside on backward."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DeterminismError
from .core import Tensor, _grad_enabled, _record, enable_grad, no_grad, run_backward


def checkpoint_segment(fn: Callable[..., Tensor], *inputs: Tensor) -> Tensor:
    """Run ``fn(*inputs)`` without storing its intermediates.

    ``fn`` must be a pure function of its inputs and of state it closes over
    (parameters, recorded noise). Parameters captured by the closure receive
    their gradients during the recomputation. If the recomputed output is not
    bitwise equal to the first run, :class:`DeterminismError` is raised.
    """
    if not _grad_enabled() or not any(t.requires_grad for t in inputs):
        return fn(*inputs)

    with no_grad():
        first = fn(*[t.detach() for t in inputs])
    stored = first.data

    def bw(g):
        replay = [Tensor(t.data, requires_grad=t.requires_grad, dtype=t.dtype) for t in inputs]
        with enable_grad():
            out = fn(*replay)
        if out.data.shape != stored.shape or out.data.tobytes() != stored.tobytes():
            raise DeterminismError("checkpointed segment did not replay identically; "
                                   "draws inside it must come from a recorded tape")
        run_backward(out, g)
        return tuple(
            (r.grad if r.grad is not None else np.zeros_like(r.data)) if r.requires_grad else None
            for r in replay
        )

    return _record(stored, inputs, bw, "checkpoint")
