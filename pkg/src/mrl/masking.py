"""Velocity-ranked and random joint masking, plus Gaussian corruption."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError

STRATEGIES = ("velocity", "random")


@dataclass
class MaskPlan:
    """``masked[t, j]`` is True where joint j of frame t is hidden.

    Row 0 (the first frame) has no velocity and is never selected.
    ``velocity_mag`` has one row fewer than ``masked``: row i holds the
    displacement from frame i to frame i + 1.
    """

    masked: np.ndarray
    velocity_mag: np.ndarray
    threshold: float
    rate: float
    strategy: str = "velocity"

    @property
    def count(self) -> int:
        return int(self.masked.sum())


def mask_count(rate: float, candidates: int) -> int:
    """round(rate * candidates) with halves rounded up."""
    return int(math.floor(rate * candidates + 0.5))


def joint_velocity(x: np.ndarray) -> np.ndarray:
    """Per-joint displacement magnitude between consecutive frames: (T, J, K) -> (T-1, J)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected frames x joints x coords, got {x.shape}")
    if x.shape[0] < 2:
        raise DataError("velocity needs at least 2 frames")
    return np.linalg.norm(x[1:] - x[:-1], axis=-1)


def build_mask(velocity_mag: np.ndarray, rate: float, strategy: str = "velocity",
               seed: int = 0, invert: bool = False) -> MaskPlan:
    """Pick ``round(rate * (T-1) * J)`` positions among frames 2..T.

    ``velocity`` hides the fastest-moving positions; ties at the threshold are
    broken by ascending (frame, joint) order. ``random`` draws uniformly
    without replacement from the same candidates. ``invert`` hides the
    complement of the selection within frames 2..T instead.
    """
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"mask rate must lie in [0, 1], got {rate}")
    if strategy not in STRATEGIES:
        raise DataError(f"unknown mask strategy {strategy!r}")
    vel = np.asarray(velocity_mag, dtype=np.float64)
    steps, joints = vel.shape
    n = steps * joints
    k = mask_count(rate, n)
    flat = vel.reshape(-1)
    if strategy == "velocity":
        chosen = np.argsort(-flat, kind="stable")[:k]
    else:
        chosen = np.random.default_rng(seed).choice(n, size=k, replace=False)
    selected = np.zeros(n, dtype=bool)
    selected[chosen] = True
    threshold = float(flat[chosen].min()) if k else math.inf
    if invert:
        selected = ~selected
    masked = np.zeros((steps + 1, joints), dtype=bool)
    masked[1:] = selected.reshape(steps, joints)
    return MaskPlan(masked, vel, threshold, float(rate), strategy)


def apply_mask(x: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Zero every coordinate of the hidden (frame, joint) positions."""
    x = np.asarray(x)
    if x.shape[:2] != plan.masked.shape:
        raise ShapeError(f"mask grid {plan.masked.shape} does not match sequence {x.shape[:2]}")
    out = x.copy()
    out[plan.masked] = 0
    return out


def add_noise(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise DataError("noise sigma must be non-negative")
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=x.shape)
    return (x + noise).astype(x.dtype, copy=False)


def mask_sequence(x: np.ndarray, rate: float, strategy: str = "velocity", seed: int = 0,
                  invert: bool = False) -> tuple:
    """Convenience: velocity -> plan -> masked copy. Returns (masked, plan)."""
    plan = build_mask(joint_velocity(x), rate, strategy, seed, invert)
    return apply_mask(x, plan), plan
