"""Covers, PGM I/O, LSB-matching embedding and paired dataset splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import uniform_filter

TEXTURES = {
    # blur width, amplitude (gray levels, std of the texture field)
    "smooth": (9, 18.0),
    "mixed": (5, 14.0),
    "busy": (1, 10.0),
}
DEFAULT_RATIOS = (0.4, 0.1, 0.5)


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


class DataError(RuntimeError):
    """Missing or unusable data (empty directory, empty split, ...)."""


# --------------------------------------------------------------------------
# PGM
# --------------------------------------------------------------------------

def write_pgm(img: np.ndarray, path) -> None:
    img = as_image8(img)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError(f"unexpected end of header at byte {start}")
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM into a uint8 array of shape (height, width)."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise PGMError(f"{path}: bad magic {buf[:2]!r} at byte 0 (expected b'P5')")
    pos = 2
    values = []
    for what in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise PGMError(f"{path}: invalid {what} {tok!r} at byte {start}")
        values.append(int(tok))
    w, h, maxval = values
    if maxval != 255:
        raise PGMError(f"{path}: maxval {maxval} unsupported (only 255) near byte {pos}")
    if w < 1 or h < 1:
        raise PGMError(f"{path}: empty image {w}x{h}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMError(f"{path}: missing whitespace after header at byte {pos}")
    pos += 1
    need = w * h
    have = len(buf) - pos
    if have < need:
        raise PGMError(f"{path}: truncated pixel data at byte {len(buf)} ({have} of {need} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()


def as_image8(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise ValueError("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


# --------------------------------------------------------------------------
# covers
# --------------------------------------------------------------------------

def synthesize_cover(w: int, h: int, seed: int, texture: str = "mixed") -> np.ndarray:
    """Seeded synthetic grayscale cover.

    A white-noise field is box-blurred to a texture-dependent correlation
    length, scaled, added to a random low-frequency gradient and quantized.
    """
    if w < 16 or h < 16:
        raise ValueError(f"covers must be at least 16x16, got {w}x{h}")
    if texture not in TEXTURES:
        raise ValueError(f"unknown texture {texture!r}; expected one of {sorted(TEXTURES)}")
    width, amp = TEXTURES[texture]
    rng = np.random.default_rng(seed)
    field_ = rng.normal(size=(h, w))
    if width > 1:
        field_ = uniform_filter(field_, size=width, mode="reflect")
        field_ = uniform_filter(field_, size=width, mode="reflect")
    field_ *= amp / field_.std()
    yy, xx = np.mgrid[0:h, 0:w]
    gx, gy = rng.uniform(-40, 40, size=2)
    base = rng.uniform(70, 185)
    grad = gx * (xx / (w - 1) - 0.5) + gy * (yy / (h - 1) - 0.5)
    return np.clip(np.rint(base + grad + field_), 0, 255).astype(np.uint8)


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resampling (align-corners) of an 8-bit image, rounded back to uint8."""
    src = np.asarray(img, dtype=np.float64)
    sh, sw = src.shape
    ys = np.linspace(0, sh - 1, h)
    xs = np.linspace(0, sw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return np.clip(np.rint(top * (1 - fy) + bot * fy), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# embedding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EmbedSpec:
    payload_bpp: float
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.payload_bpp <= 1:
            raise ValueError(f"payload must be in (0, 1] bpp, got {self.payload_bpp}")

    def n_secret(self, width: int, height: int) -> int:
        return int(math.floor(self.payload_bpp * width * height + 0.5))


def embed_lsb_matching(cover: np.ndarray, spec: EmbedSpec, return_log: bool = False):
    """Simulate LSB matching at ``spec.payload_bpp``.

    Positions are drawn without replacement; a pixel whose LSB differs from
    its message bit moves by +1 or -1 at random (+1 forced at 0, -1 at 255).
    With ``return_log`` also returns an int array of ``(x, y, delta)`` rows,
    one per message bit.
    """
    cover = as_image8(cover)
    h, w = cover.shape
    n = spec.n_secret(w, h)
    rng = np.random.default_rng(spec.seed)
    pos = rng.choice(h * w, size=n, replace=False)
    bits = rng.integers(0, 2, size=n)
    signs = rng.integers(0, 2, size=n) * 2 - 1
    flat = cover.reshape(-1).astype(np.int16)
    vals = flat[pos]
    change = (vals & 1) != bits
    delta = np.where(change, signs, 0)
    delta[change & (vals == 0)] = 1
    delta[change & (vals == 255)] = -1
    out = flat.copy()
    out[pos] += delta
    stego = out.astype(np.uint8).reshape(h, w)
    if return_log:
        log = np.stack([pos % w, pos // w, delta], axis=1).astype(np.int64)
        return stego, log
    return stego


def write_position_log(log: np.ndarray, path) -> None:
    Path(path).write_text("".join(f"{x} {y} {d}\n" for x, y, d in log.tolist()), encoding="ascii")


def read_position_log(path) -> np.ndarray:
    rows = [list(map(int, line.split())) for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def payload_from_log(log: np.ndarray, width: int, height: int) -> float:
    return len(log) / (width * height)


# --------------------------------------------------------------------------
# splits and batches
# --------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list[tuple[str, str]]
    val: list[tuple[str, str]]
    test: list[tuple[str, str]]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0

    def part(self, name: str) -> list[tuple[str, str]]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def manifest_text(self) -> str:
        lines = []
        for name in ("train", "val", "test"):
            lines += [f"{name}\t{c}\t{s}\n" for c, s in self.part(name)]
        return "".join(lines)


def split_counts(n: int, ratios=DEFAULT_RATIOS) -> tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(math.floor(n * ratios[0] + 0.5))
    n_val = int(math.floor(n * ratios[1] + 0.5))
    return n_train, n_val, n - n_train - n_val


def list_covers(cover_dir) -> list[Path]:
    d = Path(cover_dir)
    if not d.is_dir():
        raise DataError(f"cover directory {d} does not exist")
    return sorted(d.glob("*.pgm"))


def build_split(cover_dir, payload: float, out_dir, ratios=DEFAULT_RATIOS, seed: int = 0,
                audit: bool = False) -> DatasetSplit:
    """Embed every cover, partition the pairs and write ``manifest.tsv``.

    Each cover lands in exactly one part, so no cover identity is shared
    between train, val and test.
    """
    covers = list_covers(cover_dir)
    if not covers:
        raise DataError(f"no .pgm covers in {cover_dir}")
    if len(covers) < 10:
        raise DataError(f"need at least 10 covers, found {len(covers)} in {cover_dir}")
    out = Path(out_dir)
    stego_dir = out / "stego"
    stego_dir.mkdir(parents=True, exist_ok=True)
    pairs = []
    for idx, cpath in enumerate(covers):
        spath = stego_dir / cpath.name
        esed = derive_seed(seed, idx)
        result = embed_lsb_matching(read_pgm(cpath), EmbedSpec(payload, esed), return_log=audit)
        if audit:
            stego, log = result
            write_position_log(log, stego_dir / (cpath.stem + ".log"))
        else:
            stego = result
        write_pgm(stego, spath)
        pairs.append((str(cpath.resolve()), str(spath.resolve())))
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train, n_val, _ = split_counts(len(pairs), ratios)
    shuffled = [pairs[i] for i in order]
    split = DatasetSplit(shuffled[:n_train], shuffled[n_train:n_train + n_val],
                         shuffled[n_train + n_val:], tuple(ratios), seed)
    (out / "manifest.tsv").write_text(split.manifest_text(), encoding="utf-8", newline="\n")
    return split


def read_manifest(path, ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetSplit:
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    p = Path(path)
    if not p.exists():
        raise DataError(f"manifest {p} not found")
    for n, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[0] not in parts:
            raise DataError(f"{p}:{n}: malformed manifest line")
        parts[fields[0]].append((fields[1], fields[2]))
    return DatasetSplit(parts["train"], parts["val"], parts["test"], tuple(ratios), seed)


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def load_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    """Read (cover, stego) PGM paths into two uint8 stacks [P, H, W]."""
    if not pairs:
        raise DataError("no pairs to load")
    covers = np.stack([read_pgm(c) for c, _ in pairs])
    stegos = np.stack([read_pgm(s) for _, s in pairs])
    if covers.shape != stegos.shape:
        raise DataError("cover and stego stacks differ in shape")
    return covers, stegos


@dataclass
class PairBatch:
    """Images laid out [c0, s0, c1, s1, ...] with labels 0 (cover) / 1 (stego)."""

    images: np.ndarray  # [2B, 1, H, W] float64, raw pixel values
    labels: np.ndarray  # [2B]
    pair_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_pairs(self) -> int:
        return len(self.labels) // 2


def interleave(covers: np.ndarray, stegos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p, h, w = covers.shape
    images = np.empty((2 * p, 1, h, w))
    images[0::2, 0] = covers
    images[1::2, 0] = stegos
    labels = np.tile(np.array([0, 1], dtype=np.int64), p)
    return images, labels


def epoch_order(n_pairs: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_pairs)


def make_batches(covers: np.ndarray, stegos: np.ndarray, pairs_per_batch: int = 16,
                 seed: int = 0, epoch: int = 0) -> Iterator[PairBatch]:
    """Per-epoch seeded shuffle of pairs; the final short batch is dropped."""
    n = len(covers)
    if n == 0:
        raise DataError("training split is empty")
    order = epoch_order(n, seed, epoch)
    for start in range(0, n - pairs_per_batch + 1, pairs_per_batch):
        ids = order[start:start + pairs_per_batch]
        images, labels = interleave(covers[ids], stegos[ids])
        yield PairBatch(images, labels, ids)
