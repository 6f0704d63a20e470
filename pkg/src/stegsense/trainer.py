"""AdaDelta training with per-step filter projection, evaluation and checkpoints."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import DataError, interleave, make_batches
from .losses import LossConfig, combined_loss, cross_entropy, make_pairs
from .network import ModelState, forward
from .tensor import NonFiniteError, Tensor, backward, no_grad

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,lr_scale,proj_resets"
CKPT_MAGIC = b"STEGSENSE-CKPT\n"
CKPT_VERSION = 1


@dataclass(frozen=True)
class OptimConfig:
    rho: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 5e-4
    lr_scale: float = 1.0
    step_epochs: int = 50
    step_factor: float = 0.8
    epochs: int = 300
    seed: int = 0
    pairs_per_batch: int = 16
    converge_window: int = 20
    converge_tol: float = 1e-3

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if not 0 < self.step_factor <= 1:
            raise ValueError(f"step_factor must lie in (0, 1], got {self.step_factor}")
        if self.step_epochs < 1 or self.epochs < 0 or self.pairs_per_batch < 2:
            raise ValueError("step_epochs >= 1, epochs >= 0 and pairs_per_batch >= 2 are required")

    def lr_at(self, epoch: int) -> float:
        return self.lr_scale * self.step_factor ** (epoch // self.step_epochs)


@dataclass
class TrainState:
    eg: dict[str, np.ndarray] = field(default_factory=dict)
    edx: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    lr_scale: float = 1.0
    steps: int = 0
    projections: int = 0
    proj_resets: int = 0
    best_val_acc: float = -1.0
    best_epoch: int = -1
    train_acc_history: list[float] = field(default_factory=list)

    def converged(self, window: int, tol: float) -> bool:
        h = self.train_acc_history
        if len(h) <= window:
            return False
        recent = h[-(window + 1):]
        return max(recent) - min(recent) < tol


def adadelta_step(params: list[tuple[str, Tensor]], state: TrainState, cfg: OptimConfig,
                  lr_scale: float | None = None) -> None:
    """One AdaDelta update with additive L2 weight decay, scaled by ``lr_scale``."""
    scale = state.lr_scale if lr_scale is None else lr_scale
    rho, eps, wd = cfg.rho, cfg.eps, cfg.weight_decay
    for name, t in params:
        g = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {name}")
        if wd:
            g = g + wd * t.data
        eg = state.eg.get(name)
        if eg is None:
            eg = state.eg[name] = np.zeros_like(t.data)
            state.edx[name] = np.zeros_like(t.data)
        edx = state.edx[name]
        eg *= rho
        eg += (1 - rho) * g * g
        dx = -(np.sqrt(edx + eps) / np.sqrt(eg + eps)) * g * scale
        edx *= rho
        edx += (1 - rho) * dx * dx
        t.data = t.data + dx
    state.steps += 1


def predict_stego(p: np.ndarray) -> np.ndarray:
    """Decision rule: stego iff p >= 0.5 (ties go to stego)."""
    return (np.asarray(p) >= 0.5).astype(np.int64)


def train_epoch(model: ModelState, covers: np.ndarray, stegos: np.ndarray, loss_cfg: LossConfig,
                optim_cfg: OptimConfig, state: TrainState,
                on_step: Callable[[ModelState, TrainState], None] | None = None) -> dict:
    """One pass over shuffled training pairs.

    Each batch: forward, combined loss, backward, AdaDelta step, then the
    filter bank projection.
    """
    model.train()
    params = model.named_parameters()
    plan = make_pairs(optim_cfg.pairs_per_batch)
    losses, correct, seen = [], 0, 0
    for batch in make_batches(covers, stegos, optim_cfg.pairs_per_batch, optim_cfg.seed, state.epoch):
        model.zero_grad()
        p, feats = forward(batch.images, model)
        loss = combined_loss(p, batch.labels, feats, loss_cfg, plan)
        if not np.isfinite(loss.data):
            raise NonFiniteError(f"non-finite loss at epoch {state.epoch}, step {state.steps}")
        backward(loss)
        adadelta_step(params, state, optim_cfg)
        state.proj_resets += model.bank.project_()
        state.projections += 1
        losses.append(float(loss.data))
        correct += int((predict_stego(p.data) == batch.labels).sum())
        seen += len(batch.labels)
        if on_step is not None:
            on_step(model, state)
    if seen == 0:
        raise DataError(f"no full batch of {optim_cfg.pairs_per_batch} pairs in {len(covers)} training pairs")
    return {"train_loss": float(np.mean(losses)), "train_acc": correct / seen}


def predict(model: ModelState, images: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and features for raw-pixel images [N,1,H,W]."""
    was_training = model.training
    model.eval()
    ps, fs = [], []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                p, f = forward(images[start:start + batch_size], model)
                ps.append(p.data)
                fs.append(f.data)
    finally:
        model.training = was_training
    return np.concatenate(ps), np.concatenate(fs)


def evaluate(model: ModelState, covers: np.ndarray, stegos: np.ndarray, batch_size: int = 32) -> dict:
    """Accuracy, cross-entropy and per-class error rates on cover/stego pairs."""
    if len(covers) == 0:
        raise DataError("evaluation set is empty")
    images, labels = interleave(covers, stegos)
    p, _ = predict(model, images, batch_size)
    pred = predict_stego(p)
    loss = float(cross_entropy(Tensor(p), labels).data)
    covers_mask = labels == 0
    return {
        "accuracy": float((pred == labels).mean()),
        "loss": loss,
        "false_alarm": float(pred[covers_mask].mean()),
        "miss": float(1 - pred[~covers_mask].mean()),
        "n": int(len(labels)),
    }


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint."""


_STATE_KEYS = ("epoch", "lr_scale", "steps", "projections", "proj_resets", "best_val_acc",
               "best_epoch", "bank_resets", "bank_projections")


def _state_text(model: ModelState, state: TrainState) -> str:
    vals = {
        "epoch": state.epoch, "lr_scale": repr(float(state.lr_scale)), "steps": state.steps,
        "projections": state.projections, "proj_resets": state.proj_resets,
        "best_val_acc": repr(float(state.best_val_acc)), "best_epoch": state.best_epoch,
        "bank_resets": model.bank.resets, "bank_projections": model.bank.projections,
    }
    return "".join(f"{k}={vals[k]}\n" for k in _STATE_KEYS)


def _pack_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def save_checkpoint(path, model: ModelState, state: TrainState, config_text: str) -> None:
    """Binary container: magic, version, config echo, state echo, named float64 arrays."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, t in model.named_parameters():
        arrays.append((f"param.{name}", t.data))
    for name, b in model.named_buffers():
        arrays.append((f"buffer.{name}", b))
    for name, _ in model.named_parameters():
        if name in state.eg:
            arrays.append((f"opt.eg.{name}", state.eg[name]))
            arrays.append((f"opt.edx.{name}", state.edx[name]))
    arrays.append(("history.train_acc", np.asarray(state.train_acc_history, dtype=np.float64)))

    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    _pack_str(buf, config_text)
    _pack_str(buf, _state_text(model, state))
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        _pack_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


@dataclass
class Checkpoint:
    config_text: str
    state: dict[str, str]
    arrays: dict[str, np.ndarray]


def read_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    def take_str() -> str:
        (n,) = struct.unpack("<I", take(4))
        return bytes(take(n)).decode("utf-8")

    if bytes(take(len(CKPT_MAGIC))) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a stegsense checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    config_text = take_str()
    state = dict(line.split("=", 1) for line in take_str().splitlines() if line)
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        name = take_str()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(config_text, state, arrays)


def restore(model: ModelState, ckpt: Checkpoint, state: TrainState | None = None,
            params_only: bool = False) -> TrainState:
    """Load arrays into ``model`` (and optimizer/progress into a fresh state)."""
    for name, t in model.named_parameters():
        key = f"param.{name}"
        if key not in ckpt.arrays or ckpt.arrays[key].shape != t.shape:
            raise CheckpointError(f"checkpoint lacks a matching {key} (model shape {t.shape})")
        t.data = ckpt.arrays[key].copy()
    for name, b in model.named_buffers():
        key = f"buffer.{name}"
        if key not in ckpt.arrays or ckpt.arrays[key].shape != b.shape:
            raise CheckpointError(f"checkpoint lacks a matching {key}")
        b[...] = ckpt.arrays[key]
    state = state or TrainState()
    if params_only:
        return state
    for name, _ in model.named_parameters():
        if f"opt.eg.{name}" in ckpt.arrays:
            state.eg[name] = ckpt.arrays[f"opt.eg.{name}"].copy()
            state.edx[name] = ckpt.arrays[f"opt.edx.{name}"].copy()
    s = ckpt.state
    state.epoch = int(s["epoch"])
    state.lr_scale = float(s["lr_scale"])
    state.steps = int(s["steps"])
    state.projections = int(s["projections"])
    state.proj_resets = int(s["proj_resets"])
    state.best_val_acc = float(s["best_val_acc"])
    state.best_epoch = int(s["best_epoch"])
    model.bank.resets = int(s["bank_resets"])
    model.bank.projections = int(s["bank_projections"])
    state.train_acc_history = ckpt.arrays["history.train_acc"].tolist()
    return state


def check_config_echo(expected: str, found: str, ignore: tuple[str, ...] = ()) -> None:
    """Reject a checkpoint whose config differs (outside ``ignore`` keys)."""
    def strip(text):
        return [ln for ln in text.splitlines() if ln and not ln.startswith("#")
                and ln.split("=", 1)[0].strip() not in ignore]

    if strip(expected) != strip(found):
        raise CheckpointError(
            "checkpoint config does not match\n--- expected ---\n" + expected
            + "--- checkpoint ---\n" + found
        )


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

def format_metrics_row(epoch: int, tr: dict, va: dict, lr: float, resets: int) -> str:
    return (f"{epoch},{tr['train_loss']!r},{tr['train_acc']!r},{va['loss']!r},"
            f"{va['accuracy']!r},{lr!r},{resets}")


def fit(model: ModelState, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        loss_cfg: LossConfig, optim_cfg: OptimConfig, state: TrainState | None = None,
        out_dir=None, config_text: str = "") -> TrainState:
    """Train until the epoch budget or until train accuracy stops moving.

    With ``out_dir`` set, appends one row per epoch to ``metrics.csv`` and
    keeps ``last.ckpt`` and ``best.ckpt`` (best validation accuracy).
    """
    state = state or TrainState(lr_scale=optim_cfg.lr_scale)
    out = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        if state.epoch == 0 or not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n", encoding="utf-8", newline="\n")
    while state.epoch < optim_cfg.epochs:
        if state.converged(optim_cfg.converge_window, optim_cfg.converge_tol):
            log.info("train accuracy converged at epoch %d", state.epoch)
            break
        epoch = state.epoch
        state.lr_scale = optim_cfg.lr_at(epoch)
        tr = train_epoch(model, train[0], train[1], loss_cfg, optim_cfg, state)
        va = evaluate(model, val[0], val[1])
        state.train_acc_history.append(tr["train_acc"])
        state.epoch = epoch + 1
        improved = va["accuracy"] > state.best_val_acc
        if improved:
            state.best_val_acc = va["accuracy"]
            state.best_epoch = epoch
        log.info("epoch %d loss %.4f acc %.4f val_acc %.4f", epoch, tr["train_loss"], tr["train_acc"],
                 va["accuracy"])
        if out is not None:
            with open(metrics_path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(format_metrics_row(epoch, tr, va, state.lr_scale, state.proj_resets) + "\n")
            if improved:
                save_checkpoint(out / "best.ckpt", model, state, config_text)
            save_checkpoint(out / "last.ckpt", model, state, config_text)
    return state
