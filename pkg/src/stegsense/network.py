"""Detector assembly: residual stage, eight feature blocks, classifier head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .activations import ApamParams, abs_layer, apam_forward, tlu
from .filterbank import CONSTRAINTS, FilterBank, compute_residuals
from .tensor import (
    Tensor, add_channel_bias, avg_pool2d, batch_norm, conv2d, global_avg_pool, linear, relu, reshape, sigmoid,
)

N_BLOCKS = 8
DEFAULT_CHANNELS = (30, 30, 30, 64, 64, 128, 128, 256)
DEFAULT_POOLS = ("none", "none", "avg", "none", "avg", "none", "avg", "none")
DEFAULT_ACTIVATIONS = ("apam", "relu", "relu", "apam", "apam", "apam", "apam", "apam")
ALL_RELU = ("relu",) * N_BLOCKS


class ConfigError(ValueError):
    """An invalid network, loss, optimizer or run configuration."""


@dataclass(frozen=True)
class NetworkConfig:
    block_channels: tuple[int, ...] = DEFAULT_CHANNELS
    kernel_size: int = 3
    pool_schedule: tuple[str, ...] = DEFAULT_POOLS
    activation_schedule: tuple[str, ...] = DEFAULT_ACTIVATIONS
    tlu_T: float = 3.0
    use_batch_norm: bool = True
    constraint: str = "ours"

    def __post_init__(self):
        for name in ("block_channels", "pool_schedule", "activation_schedule"):
            seq = tuple(getattr(self, name))
            object.__setattr__(self, name, seq)
            if len(seq) != N_BLOCKS:
                raise ConfigError(f"{name} needs exactly {N_BLOCKS} entries, got {len(seq)}")
        if any(int(c) < 1 for c in self.block_channels):
            raise ConfigError("block channel counts must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd int, got {self.kernel_size}")
        bad = set(self.pool_schedule) - {"none", "avg"}
        if bad:
            raise ConfigError(f"unknown pool entries {sorted(bad)}")
        if self.pool_schedule[0] != "none" or self.pool_schedule[1] != "none":
            raise ConfigError("blocks 1 and 2 must not pool")
        bad = set(self.activation_schedule) - {"apam", "relu"}
        if bad:
            raise ConfigError(f"unknown activation entries {sorted(bad)}")
        if not self.tlu_T > 0:
            raise ConfigError(f"tlu_T must be positive, got {self.tlu_T}")
        if self.constraint not in CONSTRAINTS:
            raise ConfigError(f"constraint must be one of {CONSTRAINTS}, got {self.constraint!r}")

    @property
    def feature_dim(self) -> int:
        return int(self.block_channels[-1])

    def min_input_size(self) -> int:
        return 2 ** sum(p == "avg" for p in self.pool_schedule)

    def check_input(self, h: int, w: int) -> None:
        m = self.min_input_size()
        if h < m or w < m:
            raise ConfigError(f"input {h}x{w} underflows {m // 2 if m > 1 else 0} pooling stages (need >= {m})")


@dataclass
class Block:
    conv: Tensor
    bias: Tensor | None
    gamma: Tensor | None
    beta: Tensor | None
    running_mean: np.ndarray | None
    running_var: np.ndarray | None
    apam: ApamParams | None
    pool: bool


@dataclass
class ModelState:
    config: NetworkConfig
    bank: FilterBank
    blocks: list[Block]
    fc_w: Tensor
    fc_b: Tensor
    training: bool = field(default=False)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("srm.kernels", self.bank.kernels)]
        for i, b in enumerate(self.blocks, start=1):
            out.append((f"block{i}.conv", b.conv))
            if b.bias is not None:
                out.append((f"block{i}.bias", b.bias))
            if b.gamma is not None:
                out.append((f"block{i}.bn_gamma", b.gamma))
                out.append((f"block{i}.bn_beta", b.beta))
            if b.apam is not None:
                for tag, t in zip(("w1", "b1", "w2", "b2"), b.apam.tensors()):
                    out.append((f"block{i}.apam_{tag}", t))
        out.append(("fc.w", self.fc_w))
        out.append(("fc.b", self.fc_b))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, b in enumerate(self.blocks, start=1):
            if b.running_mean is not None:
                out.append((f"block{i}.bn_mean", b.running_mean))
                out.append((f"block{i}.bn_var", b.running_var))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def train(self) -> "ModelState":
        self.training = True
        return self

    def eval(self) -> "ModelState":
        self.training = False
        return self


def init_model(cfg: NetworkConfig, seed: int) -> ModelState:
    """Seeded initialization; the filter bank is the projected SRM seed bank."""
    rng = np.random.default_rng(seed)
    bank = FilterBank.from_seed(cfg.constraint)
    blocks = []
    cin = 30
    k = cfg.kernel_size
    for i, (cout, pool, act) in enumerate(
            zip(cfg.block_channels, cfg.pool_schedule, cfg.activation_schedule), start=1):
        cout = int(cout)
        bound = np.sqrt(6.0 / (cin * k * k))
        conv = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), True, f"block{i}.conv")
        if cfg.use_batch_norm:
            bias = None
            gamma = Tensor(np.ones(cout), True, f"block{i}.bn_gamma")
            beta = Tensor(np.zeros(cout), True, f"block{i}.bn_beta")
            rmean, rvar = np.zeros(cout), np.ones(cout)
        else:
            bias = Tensor(np.zeros(cout), True, f"block{i}.bias")
            gamma = beta = rmean = rvar = None
        apam = ApamParams.init(cout, rng, prefix=f"block{i}.apam") if act == "apam" else None
        blocks.append(Block(conv, bias, gamma, beta, rmean, rvar, apam, pool == "avg"))
        cin = cout
    d = cfg.feature_dim
    fc_bound = 1.0 / np.sqrt(d)
    fc_w = Tensor(rng.uniform(-fc_bound, fc_bound, size=(d, 1)), True, "fc.w")
    fc_b = Tensor(np.zeros(1), True, "fc.b")
    return ModelState(cfg, bank, blocks, fc_w, fc_b)


def forward(images, model: ModelState, taps: dict | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(p[N], features[N, feature_dim])`` for raw-pixel images [N,1,H,W].

    If ``taps`` is a dict, it receives ``"residuals"`` and per-block
    ``"block<i>_pre_act"`` tensors and ``"block<i>_alpha"`` thresholds.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 4 or x.shape[1] != 1:
        raise ConfigError(f"expected grayscale images [N,1,H,W], got {x.shape}")
    cfg = model.config
    cfg.check_input(x.shape[2], x.shape[3])

    r = compute_residuals(x, model.bank)
    if taps is not None:
        taps["residuals"] = r
    h = abs_layer(tlu(r, cfg.tlu_T))
    pad = cfg.kernel_size // 2
    for i, blk in enumerate(model.blocks, start=1):
        h = conv2d(h, blk.conv, stride=1, padding=pad)
        if blk.gamma is not None:
            h = batch_norm(h, blk.gamma, blk.beta, blk.running_mean, blk.running_var, model.training)
        else:
            h = add_channel_bias(h, blk.bias)
        if taps is not None:
            taps[f"block{i}_pre_act"] = h
        if blk.apam is not None:
            h, alpha = apam_forward(h, blk.apam)
            if taps is not None:
                taps[f"block{i}_alpha"] = alpha
        else:
            h = relu(h)
        if blk.pool:
            h = avg_pool2d(h, 2)
    features = global_avg_pool(h)
    logit = linear(features, model.fc_w, model.fc_b)
    p = reshape(sigmoid(logit), (x.shape[0],))
    return p, features
