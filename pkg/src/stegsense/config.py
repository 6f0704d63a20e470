"""Flat ``key=value`` run configuration and the ablation presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .losses import LossConfig
from .network import DEFAULT_ACTIVATIONS, DEFAULT_CHANNELS, DEFAULT_POOLS, ConfigError, NetworkConfig
from .trainer import OptimConfig

PRESETS = ("origin", "apam", "constraint", "contrastive", "apam+constraint",
           "apam+contrastive", "constraint+contrastive", "full")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    cover_dir: str = "covers"
    out_dir: str = "run"
    payload: float = 0.4
    data_seed: int = 0
    split_train: float = 0.4
    split_val: float = 0.1
    split_test: float = 0.5
    block_channels: tuple[int, ...] = DEFAULT_CHANNELS
    kernel_size: int = 3
    pool_schedule: tuple[str, ...] = DEFAULT_POOLS
    activation_schedule: tuple[str, ...] = DEFAULT_ACTIVATIONS
    tlu_T: float = 3.0
    use_batch_norm: bool = True
    constraint: str = "ours"
    margin: float = 3.0
    lam: float = 0.05
    rho: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 5e-4
    lr_scale: float = 1.0
    step_epochs: int = 50
    step_factor: float = 0.8
    epochs: int = 300
    pairs_per_batch: int = 16
    converge_window: int = 20
    converge_tol: float = 1e-3
    init_from: str = ""

    def __post_init__(self):
        # building the component configs runs their validation
        try:
            self.network()
            self.loss()
            self.optim()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.payload <= 1:
            raise ConfigError(f"payload must be in (0, 1] bpp, got {self.payload}")
        ratios = (self.split_train, self.split_val, self.split_test)
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")

    def network(self) -> NetworkConfig:
        return NetworkConfig(self.block_channels, self.kernel_size, self.pool_schedule,
                             self.activation_schedule, self.tlu_T, self.use_batch_norm, self.constraint)

    def loss(self) -> LossConfig:
        return LossConfig(self.margin, self.lam)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.rho, self.eps, self.weight_decay, self.lr_scale, self.step_epochs,
                           self.step_factor, self.epochs, self.seed, self.pairs_per_batch,
                           self.converge_window, self.converge_tol)

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Canonical text: every key, in declaration order."""
        return "".join(f"{_key(f.name)}={_format(getattr(self, f.name))}\n" for f in fields(self))


# "lambda" is a Python keyword, so the field is named lam
def _key(name: str) -> str:
    return "lambda" if name == "lam" else name


def _field_name(key: str) -> str:
    return "lam" if key == "lambda" else key


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(int(x) for x in items) if isinstance(default[0], int) else tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {_key(name)}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    changes: dict = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _field_name(key)
        if name not in known:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if name in changes:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        changes[name] = _parse_value(name, raw, getattr(base, name))
    return dataclasses.replace(base, **changes)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return resources.files("stegsense.presets").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def ablation_variants(cfg: RunConfig | None = None) -> dict[str, RunConfig]:
    """The eight component ablations applied on top of ``cfg``."""
    cfg = cfg or RunConfig()
    return {name: parse_config(preset_text(name), cfg) for name in PRESETS}

