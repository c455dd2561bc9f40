"""Distortion metrics and the fixed/adaptive/hybrid rate trade-off schedules."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .field_core import ContractError

MODES = ("fixed", "adaptive", "hybrid")
HYBRID_WINDOW = 100


@dataclass(frozen=True)
class LambdaSchedule:
    """``lam`` weights the rate in fixed and hybrid modes, ``lam_bar`` scales
    it in adaptive mode and ``threshold`` is the hybrid switch level."""

    mode: str = "fixed"
    lam: float | None = 0.0
    lam_bar: float | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown lambda mode {self.mode!r}")
        need = {"fixed": ("lam",), "adaptive": ("lam_bar",), "hybrid": ("lam", "threshold")}[self.mode]
        for name in need:
            value = getattr(self, name)
            if value is None:
                raise ContractError(f"{self.mode} schedule needs {name}")
            if value < 0 or not math.isfinite(value):
                raise ContractError(f"{name} must be finite and non-negative, got {value}")
        if self.mode == "hybrid" and self.threshold <= 0:
            raise ContractError("hybrid threshold must be positive")

    @property
    def strength(self) -> float:
        """The scalar a sweep varies: lam_bar for adaptive, lam otherwise."""
        return self.lam_bar if self.mode == "adaptive" else self.lam


@dataclass
class HybridState:
    """One-way switch from loss-tracking to fixed lambda.

    The switch fires once the moving average of the RGB loss over the last
    ``window`` steps has stayed at or below the threshold for ``window``
    consecutive steps.
    """

    window: int = HYBRID_WINDOW
    history: deque = field(default_factory=deque)
    below: int = 0
    switched: bool = False
    switch_step: int | None = None
    steps: int = 0

    def observe(self, l_rgb: float, threshold: float) -> None:
        self.steps += 1
        if self.switched:
            return
        self.history.append(l_rgb)
        if len(self.history) > self.window:
            self.history.popleft()
        avg = sum(self.history) / len(self.history)
        self.below = self.below + 1 if avg <= threshold else 0
        if self.below >= self.window:
            self.switched = True
            self.switch_step = self.steps


class GlobalLoss(NamedTuple):
    loss: float
    lambda_eff: float
    d_rgb: float  # d loss / d L_rgb
    d_rate: float  # d loss / d R


def rgb_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error per color channel."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float(np.mean((pred - target) ** 2))


def rgb_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(pred) - np.asarray(target)) / np.size(pred)


def psnr(mse: float) -> float:
    if mse < 0:
        raise ContractError(f"mse must be non-negative, got {mse}")
    if mse == 0:
        return math.inf
    return -10.0 * math.log10(mse)


def global_loss(l_rgb: float, rate: float, schedule: LambdaSchedule,
                state: HybridState | None = None) -> GlobalLoss:
    """Combine distortion and rate; also returns the partial derivatives.

    In hybrid mode without a ``state`` the switch is evaluated on the
    instantaneous loss.
    """
    if schedule.mode == "fixed":
        lam = schedule.lam
        return GlobalLoss(l_rgb + lam * rate, lam, 1.0, lam)
    if schedule.mode == "adaptive":
        lb = schedule.lam_bar
        return GlobalLoss(l_rgb * (1.0 + lb * rate), lb * l_rgb, 1.0 + lb * rate, lb * l_rgb)
    switched = state.switched if state is not None else l_rgb <= schedule.threshold
    lam = schedule.lam if switched else l_rgb
    return GlobalLoss(l_rgb + lam * rate, lam, 1.0, lam)
