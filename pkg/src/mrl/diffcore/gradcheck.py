"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    worst: tuple | None = None  # (input index, flat coordinate, analytic, numeric)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-5) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    graph_builder: Callable[[], tuple],
    samples: int = 200,
    eps: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare backward() against central differences on sampled coordinates.

    ``graph_builder()`` must return ``(loss, inputs)`` where ``loss`` is a scalar
    Tensor built from ``inputs`` and every call returns the *same* input
    objects, so perturbing their data changes the next loss. Coordinates are
    drawn uniformly over the concatenation of all inputs (without replacement
    when there are fewer than ``samples`` of them, in which case all are used).

    The relative error denominator is floored at ``floor`` so coordinates whose
    true gradient is ~0 are judged on absolute error.
    """
    loss, inputs = graph_builder()
    for t in inputs:
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        t.grad = None
    loss, inputs = graph_builder()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    sizes = np.array([t.size for t in inputs])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    if total <= samples:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    max_rel = max_abs = 0.0
    worst = None
    for f in flat:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        idx = int(f - offsets[k])
        t = inputs[k]
        view = t.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        plus = graph_builder()[0].item()
        view[idx] = orig - eps
        minus = graph_builder()[0].item()
        view[idx] = orig
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[k].reshape(-1)[idx])
        rel = relative_error(a, numeric, floor)
        max_abs = max(max_abs, abs(a - numeric))
        if rel >= max_rel:
            max_rel = rel
            worst = (k, idx, a, numeric)
    return GradCheckReport(max_rel, max_abs, len(flat), worst)
