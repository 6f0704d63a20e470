"""TLU, ABS and the adaptively parametric activation module (APAM)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, DimensionError, abs_, clamp, concat_channels, floor_at, global_avg_pool,
    linear, min_with_zero, relu, scalar_mul, sigmoid,
)


def tlu(x: Tensor, T: float = 3.0) -> Tensor:
    """Truncated linear unit: clamp to [-T, T]."""
    if not T > 0:
        raise ValueError(f"TLU threshold must be positive, got {T}")
    return clamp(x, -T, T)


def abs_layer(x: Tensor) -> Tensor:
    return abs_(x)


def f_ap(x: Tensor, alpha: Tensor) -> Tensor:
    """Keep values above ``-alpha`` (per sample and channel), clamp the rest.

    With ``alpha == 0`` this is exactly ReLU.
    """
    if x.ndim != 4 or alpha.shape != x.shape[:2]:
        raise DimensionError(f"f_ap: alpha {alpha.shape} does not match input {x.shape}")
    return floor_at(x, scalar_mul(alpha, -1.0))


@dataclass
class ApamParams:
    """Excitation weights mapping the pooled [pos | neg] vector to thresholds."""

    w1: Tensor  # [2C, C]
    b1: Tensor  # [C]
    w2: Tensor  # [C, C]
    b2: Tensor  # [C]

    @property
    def channels(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str = "apam") -> "ApamParams":
        c = channels
        bound = 1.0 / np.sqrt(2 * c)
        return cls(
            Tensor(rng.uniform(-bound, bound, size=(2 * c, c)), True, f"{prefix}.w1"),
            Tensor(np.zeros(c), True, f"{prefix}.b1"),
            Tensor(rng.uniform(-bound, bound, size=(c, c)), True, f"{prefix}.w2"),
            Tensor(np.zeros(c), True, f"{prefix}.b2"),
        )

    @classmethod
    def zeros(cls, channels: int) -> "ApamParams":
        c = channels
        return cls(Tensor(np.zeros((2 * c, c)), True), Tensor(np.zeros(c), True),
                   Tensor(np.zeros((c, c)), True), Tensor(np.zeros(c), True))

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def apam_alpha(x: Tensor, params: ApamParams) -> Tensor:
    """Per-sample, per-channel thresholds in (0, 1)."""
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise DimensionError(f"apam: input channels {x.shape} do not match params ({params.channels})")
    pos = global_avg_pool(relu(x))
    neg = global_avg_pool(min_with_zero(x))
    hidden = relu(linear(concat_channels(pos, neg), params.w1, params.b1))
    return sigmoid(linear(hidden, params.w2, params.b2))


def apam_forward(x: Tensor, params: ApamParams) -> tuple[Tensor, Tensor]:
    alpha = apam_alpha(x, params)
    return f_ap(x, alpha), alpha
