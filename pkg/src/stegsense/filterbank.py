"""SRM high-pass filter bank and its support-constrained projection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor, centered_conv2d, pad2d

CTR = 2
SIZE = 5
DEGENERATE_SUM = 1e-8

CLASS_NAMES = ("first_order", "second_order", "third_order", "edge3", "square3", "edge5", "square5")
CONSTRAINTS = ("ours", "direction", "none")

# 8 compass directions as (row, col) steps, clockwise from "up"
_DIRS8 = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]

_SQUARE3 = np.array([[-1, 2, -1], [2, -4, 2], [-1, 2, -1]], dtype=np.float64)
_EDGE3 = np.array([[-1, 2, -1], [2, -4, 2], [0, 0, 0]], dtype=np.float64)
_SQUARE5 = np.array([
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
], dtype=np.float64)


def _embed3(k3: np.ndarray) -> np.ndarray:
    k = np.zeros((SIZE, SIZE))
    k[1:4, 1:4] = k3
    return k


def _first_order(d) -> np.ndarray:
    k = np.zeros((SIZE, SIZE))
    k[CTR, CTR] = -1
    k[CTR + d[0], CTR + d[1]] = 1
    return k


def _second_order(d) -> np.ndarray:
    k = np.zeros((SIZE, SIZE))
    k[CTR, CTR] = -2
    k[CTR + d[0], CTR + d[1]] = 1
    k[CTR - d[0], CTR - d[1]] = 1
    return k


def _third_order(d) -> np.ndarray:
    k = np.zeros((SIZE, SIZE))
    k[CTR + 2 * d[0], CTR + 2 * d[1]] = -1
    k[CTR + d[0], CTR + d[1]] = 3
    k[CTR, CTR] = -3
    k[CTR - d[0], CTR - d[1]] = 1
    return k


def build_seed_bank() -> tuple[np.ndarray, list[str]]:
    """The 30 SRM linear kernels at integer weights, each embedded in 5x5.

    Returns ``(kernels[30, 5, 5], class_ids)``. Order: 8 first-order,
    4 second-order, 8 third-order, 4 EDGE3x3, 1 SQUARE3x3, 4 EDGE5x5,
    1 SQUARE5x5.
    """
    kernels: list[np.ndarray] = []
    classes: list[str] = []

    def put(k, name):
        kernels.append(k)
        classes.append(name)

    for d in _DIRS8:
        put(_first_order(d), "first_order")
    for d in [(-1, 0), (0, 1), (-1, 1), (1, 1)]:
        put(_second_order(d), "second_order")
    for d in _DIRS8:
        put(_third_order(d), "third_order")
    for r in range(4):
        put(_embed3(np.rot90(_EDGE3, -r)), "edge3")
    put(_embed3(_SQUARE3), "square3")
    edge5 = _SQUARE5.copy()
    edge5[3:] = 0
    for r in range(4):
        put(np.rot90(edge5, -r).copy(), "edge5")
    put(_SQUARE5.copy(), "square5")

    bank = np.stack(kernels)
    bank.setflags(write=False)
    return bank, classes


def derive_masks(seed: np.ndarray) -> np.ndarray:
    """Binary support masks: 1 where the seed is non-zero, plus the center."""
    masks = (seed != 0).astype(np.float64)
    masks[:, CTR, CTR] = 1.0
    return masks


def _offcenter_fsum(w: np.ndarray) -> float:
    flat = w.reshape(-1)
    c = CTR * SIZE + CTR
    return math.fsum(flat[:c].tolist() + flat[c + 1:].tolist())


def _pin_sum(w: np.ndarray, support: np.ndarray) -> None:
    """Nudge one support entry so the correctly rounded off-center sum is 1.0.

    Division by the sum leaves a residual error of a few ulps; pinning it makes
    a second projection divide by exactly 1.0, which is what makes the
    projection bit-idempotent.
    """
    for _ in range(8):
        s = _offcenter_fsum(w)
        if s == 1.0:
            return
        cand = np.where(support & (w != 0), np.abs(w), np.inf)
        cand[CTR, CTR] = np.inf
        i, j = np.unravel_index(np.argmin(cand), cand.shape)
        if not np.isfinite(cand[i, j]):
            return
        w[i, j] += 1.0 - s


def normalized_seed(seed: np.ndarray) -> np.ndarray:
    """Seed kernels scaled so off-center weights sum to 1 and the center is -1."""
    out = np.empty(seed.shape)
    for k in range(seed.shape[0]):
        w = seed[k].copy()
        w[CTR, CTR] = 0.0
        w /= _offcenter_fsum(w)
        _pin_sum(w, w != 0)
        w[CTR, CTR] = -1.0
        out[k] = w
    return out


def project(kernels: np.ndarray, masks: np.ndarray, seed: np.ndarray,
            constraint: str = "ours") -> tuple[np.ndarray, int]:
    """Project kernels onto their support masks with normalized off-center sum.

    Per filter: mask the support, zero the center, divide by the off-center
    sum (falling back to the normalized seed when ``|sum| < 1e-8``), then set
    the center to -1. ``constraint="direction"`` additionally zeroes entries
    whose sign disagrees with the seed and also falls back when the sum is
    negative; ``"none"`` skips masking and only normalizes. Returns ``(projected[30,1,5,5], n_degenerate_resets)``.
    """
    if constraint not in CONSTRAINTS:
        raise ValueError(f"unknown constraint {constraint!r}; expected one of {CONSTRAINTS}")
    squeeze = kernels.ndim == 4
    ks = kernels.reshape(-1, SIZE, SIZE)
    out = np.empty_like(ks)
    fallback = None
    resets = 0
    for k in range(ks.shape[0]):
        w = ks[k].copy()
        if constraint != "none":
            w *= masks[k]
            if constraint == "direction":
                w[np.sign(w) != np.sign(seed[k])] = 0.0
            support = masks[k] != 0
        else:
            support = np.ones((SIZE, SIZE), dtype=bool)
        w[CTR, CTR] = 0.0
        s = _offcenter_fsum(w)
        # sign-preserving mode cannot divide by a negative sum without
        # flipping every sign, so that case is degenerate as well
        ok = s >= DEGENERATE_SUM if constraint == "direction" else abs(s) >= DEGENERATE_SUM
        if ok:
            if s != 1.0:
                w /= s
                _pin_sum(w, support)
        else:
            if fallback is None:
                fallback = normalized_seed(seed)
            w = fallback[k].copy()
            resets += 1
        w[CTR, CTR] = -1.0
        w[w == 0] = 0.0  # no negative zeros, so equal kernels are equal bytes
        out[k] = w
    if squeeze:
        out = out.reshape(kernels.shape)
    return out, resets


@dataclass
class FilterBank:
    """Trainable residual filters with their fixed supports.

    ``kernels`` is the live parameter tensor [30, 1, 5, 5]; ``seed`` and
    ``masks`` never change after construction.
    """

    kernels: Tensor
    masks: np.ndarray
    seed: np.ndarray
    class_ids: list[str]
    constraint: str = "ours"
    resets: int = 0
    projections: int = field(default=0)

    @classmethod
    def from_seed(cls, constraint: str = "ours") -> "FilterBank":
        seed, classes = build_seed_bank()
        masks = derive_masks(seed)
        projected, _ = project(seed.reshape(30, 1, SIZE, SIZE).astype(np.float64), masks, seed, constraint)
        return cls(Tensor(projected, requires_grad=True, name="srm.kernels"), masks, seed, classes, constraint)

    def project_(self) -> int:
        """Re-project the live kernels in place; returns degenerate resets."""
        new, resets = project(self.kernels.data, self.masks, self.seed, self.constraint)
        self.kernels.data = new
        self.resets += resets
        self.projections += 1
        return resets


def compute_residuals(images: Tensor, bank: FilterBank | Tensor) -> Tensor:
    """30 residual planes per image, same spatial size as the input.

    Projected kernels have center -1 and off-center sum 1, so the
    correlation is evaluated as ``sum_t w_t * (I[. + t] - I[.])``; a
    constant image then gives exactly zero. Borders are replicate-padded
    by 2 so that holds at the edges too.
    """
    kernels = bank.kernels if isinstance(bank, FilterBank) else bank
    return centered_conv2d(pad2d(images, 2, mode="edge"), kernels)


def format_filters(bank: FilterBank) -> str:
    """Kernels as text blocks headed ``# filter <k> class <name>``."""
    lines = []
    ks = bank.kernels.data.reshape(-1, SIZE, SIZE)
    for k, w in enumerate(ks):
        lines.append(f"# filter {k} class {bank.class_ids[k]}")
        for row in w:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def export_filters(bank: FilterBank, path) -> None:
    Path(path).write_text(format_filters(bank), encoding="utf-8", newline="\n")


def read_filters(path) -> tuple[np.ndarray, list[str]]:
    """Inverse of :func:`export_filters`."""
    kernels, classes, rows = [], [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# filter"):
            classes.append(line.split()[-1])
            continue
        if line.strip():
            rows.append([float(v) for v in line.split()])
            if len(rows) == SIZE:
                kernels.append(rows)
                rows = []
    if rows or len(kernels) != len(classes):
        raise ValueError(f"{path}: malformed filter dump")
    return np.array(kernels), classes
