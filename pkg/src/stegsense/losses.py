"""Cross-entropy, pair-wise contrastive loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor, add, binary_cross_entropy, concat_channels, contrastive_pairs, reshape, scalar_mul,
)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 3.0
    lam: float = 0.05

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class PairingPlan:
    """Pairs over a batch laid out as [c0, s0, c1, s1, ...]; y=1 joins cover and stego."""

    a: np.ndarray
    b: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def triples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.a.tolist(), self.b.tolist(), self.y.tolist()))


def make_pairs(n_pairs: int) -> PairingPlan:
    """Ring pairing: B cover/stego pairs, B cover/cover and B stego/stego pairs."""
    if n_pairs < 2:
        raise ValueError(f"pairing needs at least 2 cover/stego pairs per batch, got {n_pairs}")
    i = np.arange(n_pairs)
    nxt = (i + 1) % n_pairs
    cover, stego = 2 * i, 2 * i + 1
    a = np.concatenate([cover, cover, stego])
    b = np.concatenate([stego, 2 * nxt, 2 * nxt + 1])
    y = np.concatenate([np.ones(n_pairs), np.zeros(2 * n_pairs)]).astype(np.int64)
    return PairingPlan(a, b, y)


def cross_entropy(p: Tensor, labels) -> Tensor:
    return binary_cross_entropy(p, labels)


def contrastive(f1: Tensor, f2: Tensor, y: int, margin: float) -> Tensor:
    """Single-pair loss between two feature vectors of equal length."""
    if f1.shape != f2.shape or f1.ndim != 1:
        raise ValueError(f"contrastive: feature shapes differ or are not 1-D ({f1.shape}, {f2.shape})")
    if not margin > 0:
        raise ValueError("margin must be positive")
    d = f1.shape[0]
    stacked = reshape(concat_channels(reshape(f1, (1, d)), reshape(f2, (1, d))), (2, d))
    return contrastive_pairs(stacked, [0], [1], [y], margin)


def combined_loss(p: Tensor, labels, features: Tensor, cfg: LossConfig,
                  plan: PairingPlan | None = None) -> Tensor:
    """``cross_entropy + lam * mean contrastive`` over the batch pairing plan."""
    ce = cross_entropy(p, labels)
    if cfg.lam == 0:
        return ce
    if plan is None:
        plan = make_pairs(features.shape[0] // 2)
    con = contrastive_pairs(features, plan.a, plan.b, plan.y, cfg.margin)
    return add(ce, scalar_mul(con, cfg.lam))
