"""White-dot analysis plus residual and feature exports for inspection."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_pgm, write_pgm
from .filterbank import FilterBank, compute_residuals
from .network import ModelState, forward
from .tensor import DimensionError, Tensor, no_grad

REPORT_HEADER = "pair_id,pos_fraction,neg_fraction,threshold,degenerate"


@dataclass(frozen=True)
class DiagnosticReport:
    pos_fraction: float
    neg_fraction: float
    threshold: float
    white_pos: int
    pos_total: int
    white_neg: int
    neg_total: int
    degenerate: bool = False

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return (self.white_pos, self.pos_total, self.white_neg, self.neg_total)


def white_dot_analysis(feat_cover, feat_stego) -> DiagnosticReport:
    """Share of above-mean differences inside the positive and negative cover regions.

    The difference is absolute and its mean over the whole map is the
    threshold. Locations where the cover feature is exactly zero belong to
    neither region.
    """
    fc = np.asarray(feat_cover.data if isinstance(feat_cover, Tensor) else feat_cover, dtype=np.float64)
    fs = np.asarray(feat_stego.data if isinstance(feat_stego, Tensor) else feat_stego, dtype=np.float64)
    if fc.shape != fs.shape:
        raise DimensionError(f"white_dot_analysis: cover {fc.shape} vs stego {fs.shape}")
    if fc.size == 0:
        raise DimensionError("white_dot_analysis: empty feature maps")
    diff = np.abs(fc - fs)
    t = float(diff.mean())
    white = diff > t
    pos, neg = fc > 0, fc < 0
    counts = [int(np.count_nonzero(white & pos)), int(np.count_nonzero(pos)),
              int(np.count_nonzero(white & neg)), int(np.count_nonzero(neg))]
    wp, pt, wn, nt = counts
    return DiagnosticReport(wp / pt if pt else 0.0, wn / nt if nt else 0.0, t, wp, pt, wn, nt,
                            degenerate=(pt == 0 and nt == 0))


@dataclass(frozen=True)
class BatchReport:
    pos_fraction: float
    neg_fraction: float
    n_used: int
    n_degenerate: int
    reports: tuple[DiagnosticReport, ...]


def batch_white_dot(pairs) -> BatchReport:
    """Mean per-pair fractions over ``(feat_cover, feat_stego)`` pairs; degenerate pairs are skipped."""
    reports = tuple(white_dot_analysis(c, s) for c, s in pairs)
    if not reports:
        raise ValueError("batch_white_dot needs at least one pair")
    used = [r for r in reports if not r.degenerate]
    if used:
        pos = float(np.mean([r.pos_fraction for r in used]))
        neg = float(np.mean([r.neg_fraction for r in used]))
    else:
        pos = neg = 0.0
    return BatchReport(pos, neg, len(used), len(reports) - len(used), reports)


def block1_activation_inputs(model: ModelState, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Block 1 feature maps just before its activation, in eval mode: [N,C,H,W]."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                taps: dict = {}
                x = np.asarray(images[start:start + batch_size], dtype=np.float64)
                forward(x[:, None] if x.ndim == 3 else x, model, taps)
                out.append(taps["block1_pre_act"].data.copy())
    finally:
        model.training = was_training
    return np.concatenate(out)


def diagnose(model: ModelState, covers: np.ndarray, stegos: np.ndarray, path=None) -> BatchReport:
    """Run the white-dot analysis on each cover/stego pair and optionally write the CSV report."""
    if len(covers) != len(stegos):
        raise DimensionError(f"{len(covers)} covers vs {len(stegos)} stegos")
    fc = block1_activation_inputs(model, covers)
    fs = block1_activation_inputs(model, stegos)
    batch = batch_white_dot(zip(fc, fs))
    if path is not None:
        write_report(batch.reports, path)
    return batch


def write_report(reports, path) -> None:
    lines = [REPORT_HEADER]
    for i, r in enumerate(reports):
        lines.append(f"{i},{r.pos_fraction!r},{r.neg_fraction!r},{r.threshold!r},{int(r.degenerate)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_residuals(image: np.ndarray, bank: FilterBank, out_dir) -> list[Path]:
    """Write one min-max normalized PGM per residual plane plus a ``plane,min,max`` sidecar.

    A flat plane (min == max) is written as all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"export_residuals expects a single [H,W] image, got {img.shape}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        res = compute_residuals(Tensor(img[None, None]), bank).data[0]
    paths, rows = [], ["plane,min,max"]
    for k, plane in enumerate(res):
        lo, hi = float(plane.min()), float(plane.max())
        if hi > lo:
            px = np.rint((plane - lo) / (hi - lo) * 255.0)
        else:
            px = np.zeros_like(plane)
        p = out / f"residual_{k:02d}.pgm"
        write_pgm(px.astype(np.uint8), p)
        paths.append(p)
        rows.append(f"{k},{lo!r},{hi!r}")
    (out / "residuals.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return paths


def load_residuals(out_dir) -> np.ndarray:
    """Invert :func:`export_residuals` up to quantization: [30,H,W]."""
    out = Path(out_dir)
    lines = (out / "residuals.csv").read_text(encoding="utf-8").splitlines()[1:]
    planes = []
    for line in lines:
        k, lo, hi = line.split(",")
        px = read_pgm(out / f"residual_{int(k):02d}.pgm").astype(np.float64)
        planes.append(float(lo) + px / 255.0 * (float(hi) - float(lo)))
    return np.stack(planes)


def export_features(model: ModelState, covers: np.ndarray, stegos: np.ndarray, path,
                    batch_size: int = 32) -> int:
    """CSV of pooled features, one row per image with cover label 0 and stego label 1."""
    if len(covers) != len(stegos):
        raise DimensionError(f"{len(covers)} covers vs {len(stegos)} stegos")
    was_training = model.training
    model.eval()
    rows = []
    try:
        with no_grad():
            for label, imgs in ((0, covers), (1, stegos)):
                for start in range(0, len(imgs), batch_size):
                    x = np.asarray(imgs[start:start + batch_size], dtype=np.float64)
                    _, feats = forward(x[:, None] if x.ndim == 3 else x, model)
                    rows.extend((label, f) for f in feats.data)
    finally:
        model.training = was_training
    d = model.config.feature_dim
    buf = io.StringIO()
    buf.write("label," + ",".join(f"f{j}" for j in range(d)) + "\n")
    for label, f in rows:
        buf.write(f"{label}," + ",".join(format(v, ".17g") for v in f) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return len(rows)
