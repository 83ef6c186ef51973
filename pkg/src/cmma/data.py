"""Synthetic attribute -> glyph dataset, its rule-based attribute oracle, and I/O.

Each image is an ``s x s`` canvas holding one shape whose appearance is fully
determined by eight attribute bits:

====  =============  ==========================================
bit   attribute      0 / 1
====  =============  ==========================================
0     shape          filled square / filled disc
1     size           r = round(0.19 s) / round(0.31 s)
2     horizontal     cx = round(0.31 s) / round(0.63 s)
3     vertical       cy = round(0.31 s) / round(0.63 s)
4     intensity      v = 0.5 / 1.0
5     frame          1-pixel canvas border at v / 2
6     haze           +0.1 on every pixel
7     hollow         1-pixel outline of the shape only
====  =============  ==========================================

Images are stored row-major with row index = vertical coordinate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MagicError, RangeError, ShapeError, TruncatedError
from .gaussian import make_rng

N_ATTRS = 8
ATTR_NAMES = ("shape", "size", "hpos", "vpos", "intensity", "frame", "haze", "hollow")
MAGIC = b"CMMADS1\n"
HAZE = 0.1
LIT = 0.25  # haze-corrected value above which a pixel belongs to the shape


def _round(v: float) -> int:
    return int(np.floor(v + 0.5))


@dataclass(frozen=True)
class GlyphConfig:
    side: int = 16
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.side < 8:
            raise ValueError("image side must be at least 8")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("pixel noise must lie in [0, 0.5)")

    @property
    def pixels(self) -> int:
        return self.side * self.side

    @property
    def radii(self) -> tuple[int, int]:
        return _round(0.19 * self.side), _round(0.31 * self.side)

    @property
    def centers(self) -> tuple[int, int]:
        return _round(0.31 * self.side), _round(0.63 * self.side)


def _as_bits(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (N_ATTRS,) or not np.all((y == 0) | (y == 1)):
        raise ValueError(f"attributes must be {N_ATTRS} binary values, got {y.tolist()}")
    return y.astype(int)


def shape_mask(y, side: int = 16) -> np.ndarray:
    """Boolean mask of the glyph's lit pixels (before intensity/frame/haze)."""
    b = _as_bits(y)
    cfg = GlyphConfig(side=side, noise=0.0)
    r = cfg.radii[b[1]]
    cx, cy = cfg.centers[b[2]], cfg.centers[b[3]]
    rows, cols = np.mgrid[0:side, 0:side]
    dx, dy = cols - cx, rows - cy
    if b[0]:
        mask = dx * dx + dy * dy <= r * r
    else:
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= r
    if b[7]:
        p = np.pad(mask, 1)
        interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
        mask = mask & ~interior
    return mask


def render_glyph(y, config: GlyphConfig = GlyphConfig(), rng: np.random.Generator | None = None) -> np.ndarray:
    """Render attribute bits to a flat image of ``side * side`` pixels in [0, 1]."""
    b = _as_bits(y)
    s = config.side
    v = 1.0 if b[4] else 0.5
    img = np.zeros((s, s))
    if b[5]:
        img[0, :] = img[-1, :] = img[:, 0] = img[:, -1] = v / 2
    img[shape_mask(b, s)] = v
    if b[6]:
        img += HAZE
    if rng is not None and config.noise > 0:
        img += rng.normal(0.0, config.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).reshape(-1)


def _conf(stat: float, threshold: float, scale: float) -> float:
    if scale <= 0:  # attribute not resolvable at this side length
        return 0.0
    return float(min(1.0, abs(stat - threshold) / scale))


def attribute_oracle(x) -> tuple[np.ndarray, np.ndarray]:
    """Read the eight attribute bits back off an image.

    Accepts one flat image or a batch of them; returns ``(bits, confidence)``
    with matching leading shape.  Rules work on the haze-corrected image, and
    shape statistics use only the interior (border excluded so the frame
    cannot leak into them).
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        pairs = [attribute_oracle(row) for row in arr]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
    m = arr.size
    s = int(round(np.sqrt(m)))
    if s * s != m:
        raise ShapeError(f"image of {m} pixels is not square")
    img = arr.reshape(s, s)
    bits = np.zeros(N_ATTRS)
    conf = np.zeros(N_ATTRS)

    inner = img[1:-1, 1:-1]

    # haze: median of interior pixels too dark to be glyph
    dark = inner[inner <= LIT + HAZE]
    background = float(np.median(dark)) if dark.size else 0.0
    bits[6] = background > HAZE / 2
    conf[6] = _conf(background, HAZE / 2, HAZE / 2)
    img = img - HAZE * bits[6]
    inner = img[1:-1, 1:-1]

    border = np.concatenate([img[0, :], img[-1, :], img[1:-1, 0], img[1:-1, -1]])
    edge = float(np.median(border))
    bits[5] = edge > 0.125
    conf[5] = _conf(edge, 0.125, 0.125)

    peak = float(inner.max())
    bits[4] = peak > 0.75
    conf[4] = _conf(peak, 0.75, 0.25)
    lit = inner > LIT
    if not lit.any():
        return bits, conf

    # geometry from the bounding box of the lit interior; large glyphs touch the
    # border, so the box is clipped there but stays on the correct side
    rows, cols = np.nonzero(lit)
    rows, cols = rows + 1, cols + 1
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    near, far = GlyphConfig(side=s).centers
    mid = (near + far) / 2
    cx, cy = (c0 + c1) / 2, (r0 + r1) / 2
    bits[2] = cx > mid
    bits[3] = cy > mid
    conf[2] = _conf(cx, mid, (far - near) / 2)
    conf[3] = _conf(cy, mid, (far - near) / 2)

    span = max(r1 - r0, c1 - c0) + 1
    small, large = (2 * r + 1 for r in GlyphConfig(side=s).radii)
    size_thr = (small + large) / 2
    bits[1] = span > size_thr
    conf[1] = _conf(span, size_thr, (large - small) / 2)

    corner_lit = sum(img[r, c] > LIT for r, c in ((r0, c0), (r0, c1), (r1, c0), (r1, c1)))
    bits[0] = corner_lit < 2
    conf[0] = abs(corner_lit - 2) / 2

    center = img[_round(cy), _round(cx)]
    ref = max(peak, LIT)
    bits[7] = center < ref / 2
    conf[7] = _conf(center / ref, 0.5, 0.5)
    return bits, conf


@dataclass
class MultimodalDataset:
    X: np.ndarray  # (n, m) float32 in [0, 1]
    Y: np.ndarray  # (n, A) float32 in {0, 1}
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        n = self.X.shape[0]
        if self.Y.shape[0] != n:
            raise ShapeError(f"X has {n} rows but Y has {self.Y.shape[0]}")
        idx = np.concatenate([self.train, self.validation, self.test])
        if idx.size != n or not np.array_equal(np.sort(idx), np.arange(n)):
            raise RangeError("splits must be disjoint and cover every row exactly once")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def x_dim(self) -> int:
        return self.X.shape[1]

    @property
    def y_dim(self) -> int:
        return self.Y.shape[1]

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.x_dim)))

    def indices(self, split: str) -> np.ndarray:
        if split not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """Float64 copies of (X, Y) restricted to a split."""
        idx = self.indices(name)
        return self.X[idx].astype(np.float64), self.Y[idx].astype(np.float64)

    def pixel_variance(self) -> float:
        return float(np.var(self.X.astype(np.float64)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalDataset):
            return NotImplemented
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in [
                (self.X, other.X),
                (self.Y, other.Y),
                (self.train, other.train),
                (self.validation, other.validation),
                (self.test, other.test),
            ]
        )


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = (8 * n) // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def generate_dataset(n: int, config: GlyphConfig = GlyphConfig()) -> MultimodalDataset:
    if n < 10:
        raise ValueError("need at least 10 examples")
    rng = make_rng(config.seed)
    Y = rng.integers(0, 2, size=(n, N_ATTRS)).astype(np.float64)
    X = np.stack([render_glyph(y, config, rng) for y in Y])
    n_train, n_val, _ = split_sizes(n)
    idx = np.arange(n, dtype=np.int64)
    return MultimodalDataset(
        X.astype(np.float32),
        Y.astype(np.float32),
        idx[:n_train],
        idx[n_train : n_train + n_val],
        idx[n_train + n_val :],
    )


# -- persistence ------------------------------------------------------------------


def save_dataset(d: MultimodalDataset, path) -> None:
    n, m = d.X.shape
    parts = [MAGIC, struct.pack("<III", n, m, d.y_dim)]
    parts.append(np.ascontiguousarray(d.X, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(d.Y, dtype="<f4").tobytes())
    for idx in (d.train, d.validation, d.test):
        parts.append(struct.pack("<I", idx.size))
        parts.append(np.ascontiguousarray(idx, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, nbytes: int, what: str) -> bytes:
        end = self.pos + nbytes
        if end > len(self.buf):
            raise TruncatedError(f"file ends while reading {what}")
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        raw = self.take(np.dtype(dtype).itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype).copy()


def load_dataset(path) -> MultimodalDataset:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    n, m, a = struct.unpack("<III", r.take(12, "header"))
    X = r.array("<f4", n * m, "images").reshape(n, m).astype(np.float32)
    Y = r.array("<f4", n * a, "attributes").reshape(n, a).astype(np.float32)
    splits = []
    for name in ("train", "validation", "test"):
        (count,) = struct.unpack("<I", r.take(4, f"{name} count"))
        splits.append(r.array("<u4", count, f"{name} indices").astype(np.int64))
    if r.pos != len(r.buf):
        raise TruncatedError(f"{len(r.buf) - r.pos} trailing bytes after the test split")
    if not np.all((X >= 0) & (X <= 1)):
        raise RangeError("image values must lie in [0, 1]")
    if not np.all((Y == 0) | (Y == 1)):
        raise RangeError("attribute values must be binary")
    if any(np.any(s >= n) for s in splits):
        raise RangeError("split index out of range")
    return MultimodalDataset(X, Y, *splits)


def write_pgm(path, image, side: int | None = None) -> None:
    """Binary PGM (P5), maxval 255, pixel = round(255 * value)."""
    img = np.asarray(image, dtype=np.float64).reshape(-1)
    side = side or int(round(np.sqrt(img.size)))
    if side * side != img.size:
        raise ShapeError(f"cannot lay out {img.size} pixels as a {side}x{side} image")
    pix = np.floor(255.0 * np.clip(img, 0.0, 1.0) + 0.5).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{side} {side}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`; returns flat values in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise MagicError(f"not a binary PGM: {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    data = buf[pos : pos + w * h]
    if len(data) != w * h:
        raise TruncatedError("PGM pixel data is truncated")
    return np.frombuffer(data, dtype=np.uint8).astype(np.float64) / maxval
