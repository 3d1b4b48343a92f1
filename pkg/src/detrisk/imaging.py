"""Image I/O and the chest-image preparation pipeline.

Storage format is binary PGM (P5) with maxval 65535, two bytes per sample,
big-endian.  Preprocessing: strip all-zero border rows/columns, clip the
core at its 1st/99th intensity percentiles, min-max normalize to [0, 1],
center-crop to the largest square, and bilinearly rescale to a fixed side.
Augmentation is flip / rotate / translate with bilinear resampling and zero
fill, fully determined by (seed, draw_index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PGM_MAXVAL = 65535
_MAX_COMMENT_BYTES = 1024


class ImageFormatError(ValueError):
    pass


class BlankImageError(ValueError):
    pass


def read_pgm(path):
    """Read a 16-bit binary PGM into a uint16 (H, W) array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] != b"P5":
        raise ImageFormatError(f"{path}: not a binary PGM (magic {blob[:2]!r})")
    pos = 2
    fields = []
    comment_bytes = 0
    while len(fields) < 3:
        if pos >= len(blob):
            raise ImageFormatError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            end = blob.find(b"\n", pos)
            if end == -1:
                raise ImageFormatError(f"{path}: unterminated comment")
            comment_bytes += end - pos
            if comment_bytes > _MAX_COMMENT_BYTES:
                raise ImageFormatError(f"{path}: header comments exceed {_MAX_COMMENT_BYTES} bytes")
            pos = end + 1
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end:end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise ImageFormatError(f"{path}: unexpected header byte {ch!r}")
    width, height, maxval = fields
    if maxval != PGM_MAXVAL:
        raise ImageFormatError(f"{path}: maxval {maxval}, expected {PGM_MAXVAL}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    pos += 1  # single whitespace after maxval
    need = width * height * 2
    raw = blob[pos:pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=">u2").reshape(height, width).astype(np.uint16)


def write_pgm(path, pixels):
    """Write a uint16 (H, W) array as binary big-endian PGM."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ImageFormatError(f"write_pgm: expected 2-d array, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        if np.any(arr < 0) or np.any(arr > PGM_MAXVAL):
            raise ImageFormatError("write_pgm: values outside [0, 65535]")
        arr = arr.astype(np.uint16)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def _strip_zero_border(img):
    rows = np.flatnonzero(img.any(axis=1))
    cols = np.flatnonzero(img.any(axis=0))
    return img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def bilinear_resize(img, out_h, out_w):
    """Bilinear rescale with half-pixel-center alignment; identity at scale 1."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ry = np.arange(out_h, dtype=np.float64)
    rx = np.arange(out_w, dtype=np.float64)
    sy = np.clip((ry + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((rx + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def preprocess(raw, side, clip_percentiles=(1.0, 99.0)):
    """Raw intensities -> normalized square float image in [0, 1].

    The zero border is found on raw pixels and percentile statistics are
    computed on the surviving core, so padding an image with zeros does not
    change the result.  A degenerate intensity range yields all zeros; a
    fully blank image is an error.
    """
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"preprocess: expected 2-d image, got shape {img.shape}")
    if side < 1:
        raise ValueError(f"preprocess: bad output side {side}")
    if not img.any():
        raise BlankImageError("preprocess: blank image")
    core = _strip_zero_border(img)
    # lower order statistic: the clipped mass then sits exactly at the
    # percentile pixels, which makes a second pass a no-op
    lo, hi = np.percentile(core, clip_percentiles, method="lower")
    if hi > lo:
        core = (np.clip(core, lo, hi) - lo) / (hi - lo)
    else:
        core = np.zeros_like(core)
    h, w = core.shape
    s = min(h, w)
    r0 = (h - s) // 2
    c0 = (w - s) // 2
    return bilinear_resize(core[r0:r0 + s, c0:c0 + s], side, side)


@dataclass(frozen=True)
class AugmentPolicy:
    """Deterministic augmentation family keyed by (seed, draw_index)."""

    flip_probability: float = 0.5
    rotation_degrees: tuple = (-45.0, 45.0)
    max_translation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability {self.flip_probability} outside [0, 1]")
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise ValueError(f"rotation range {self.rotation_degrees} inverted")
        if self.max_translation_fraction < 0.0:
            raise ValueError("max_translation_fraction must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


IDENTITY_POLICY = AugmentPolicy(flip_probability=0.0, rotation_degrees=(0.0, 0.0), max_translation_fraction=0.0)


def augment(img, policy, draw_index):
    """Flip, rotate, translate; one bilinear resample, zero fill outside.

    Draws come from default_rng((policy.seed, draw_index)) in a fixed order,
    so the same (seed, index) always produces the same image.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"augment: expected square 2-d image, got {img.shape}")
    if draw_index < 0:
        raise ValueError("augment: draw_index must be nonnegative")
    rng = np.random.default_rng((policy.seed, draw_index))
    u_flip = rng.random()
    angle = np.deg2rad(rng.uniform(*policy.rotation_degrees))
    side = img.shape[0]
    tmax = policy.max_translation_fraction * side
    ty = rng.uniform(-tmax, tmax)
    tx = rng.uniform(-tmax, tmax)
    out = img[:, ::-1].copy() if u_flip < policy.flip_probability else img.copy()
    if angle == 0.0 and ty == 0.0 and tx == 0.0:
        return out
    c = (side - 1) / 2.0
    rows = np.arange(side, dtype=np.float64)
    gy, gx = np.meshgrid(rows, rows, indexing="ij")
    # invert translate-then-rotate about the center
    dy = gy - c - ty
    dx = gx - c - tx
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    sy = cos_a * dy + sin_a * dx + c
    sx = -sin_a * dy + cos_a * dx + c
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0

    def gather(yy, xx):
        valid = (yy >= 0) & (yy < side) & (xx >= 0) & (xx < side)
        vals = np.zeros_like(sy)
        vals[valid] = out[yy[valid], xx[valid]]
        return vals

    res = (gather(y0, x0) * (1 - fy) * (1 - fx)
           + gather(y0, x0 + 1) * (1 - fy) * fx
           + gather(y0 + 1, x0) * fy * (1 - fx)
           + gather(y0 + 1, x0 + 1) * fy * fx)
    return res


def tta_average(predict_fn, img, policy, n=10):
    """Mean of predict_fn over n augmentation draws (indices 0..n-1)."""
    if n < 1:
        raise ValueError("tta_average: n must be >= 1")
    preds = [np.asarray(predict_fn(augment(img, policy, i)), dtype=np.float64) for i in range(n)]
    return np.mean(preds, axis=0)
