"""Segmentation samples: netpbm codec, manifests, synthetic corpus, augmentation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .functional import IGNORE_INDEX, interp_matrix


@dataclass
class SegmentationSample:
    image: np.ndarray  # float32, 3 x H x W, values in [0, 1]
    mask: np.ndarray  # uint8, H x W, class ids or IGNORE_INDEX

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 2 or self.image.shape[1:] != self.mask.shape:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} sizes differ")


# ---------------------------------------------------------------------------
# netpbm


def _read_header(buf, magic):
    if len(buf) < 2:
        raise FormatError("file too short for a netpbm header", 0)
    if buf[:2] != magic:
        raise FormatError(f"bad magic {bytes(buf[:2])!r}, expected {magic!r}", 0)
    pos, fields = 2, []
    while len(fields) < 3:
        # whitespace and comments between tokens
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header field", start)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("header must end with a single whitespace byte", pos)
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid dimensions {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"maxval must be 255, got {maxval}", pos)
    return width, height, pos + 1


def decode_ppm(buf):
    """Binary P6 bytes -> float32 ``3 x H x W`` image in [0, 1]."""
    buf = bytes(buf)
    w, h, start = _read_header(buf, b"P6")
    need = w * h * 3
    payload = buf[start : start + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}", start + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255).astype(np.float32)


def decode_pgm(buf):
    """Binary P5 bytes -> uint8 ``H x W`` label grid (raw byte is the class id)."""
    buf = bytes(buf)
    w, h, start = _read_header(buf, b"P5")
    need = w * h
    payload = buf[start : start + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(payload)}", start + len(payload))
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def decode_image(buf, kind):
    if kind in ("P6", "ppm"):
        return decode_ppm(buf)
    if kind in ("P5", "pgm"):
        return decode_pgm(buf)
    raise ConfigError(f"unknown netpbm kind {kind!r}")


def encode_ppm(image):
    """Float ``3 x H x W`` image in [0, 1] -> P6 bytes (rounded to nearest byte)."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        raw = image
    else:
        raw = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    _, h, w = raw.shape
    return f"P6\n{w} {h}\n255\n".encode() + raw.transpose(1, 2, 0).tobytes()


def encode_pgm(mask):
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise DataError("mask values must fit in one byte")
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode() + mask.astype(np.uint8).tobytes()


# ---------------------------------------------------------------------------
# manifests


def read_manifest(path):
    """Parse ``image<TAB>mask`` lines; relative paths resolve against the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask'")
            img, msk = (p if os.path.isabs(p) else os.path.join(base, p) for p in parts)
            for p in (img, msk):
                if not os.path.exists(p):
                    raise DataError(f"{path}:{lineno}: missing file {p}")
            pairs.append((img, msk))
    if not pairs:
        raise DataError(f"{path}: manifest lists no samples")
    return pairs


def load_sample(image_path, mask_path):
    with open(image_path, "rb") as fh:
        image = decode_ppm(fh.read())
    with open(mask_path, "rb") as fh:
        mask = decode_pgm(fh.read())
    return SegmentationSample(image, mask)


def load_dataset(manifest_path, num_classes=None):
    samples = [load_sample(i, m) for i, m in read_manifest(manifest_path)]
    if num_classes is not None:
        for s in samples:
            check_mask(s.mask, num_classes)
    return samples


def check_mask(mask, num_classes):
    bad = (mask >= num_classes) & (mask != IGNORE_INDEX)
    if bad.any():
        raise DataError(f"mask label {int(mask[bad][0])} outside [0, {num_classes}) and not IGNORE")


def write_dataset(samples, out_dir):
    """Write samples as PPM/PGM pairs plus ``manifest.tsv``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img, msk = f"img_{i:04d}.ppm", f"mask_{i:04d}.pgm"
        with open(os.path.join(out_dir, img), "wb") as fh:
            fh.write(encode_ppm(s.image))
        with open(os.path.join(out_dir, msk), "wb") as fh:
            fh.write(encode_pgm(s.mask))
        lines.append(f"{img}\t{msk}\n")
    path = os.path.join(out_dir, "manifest.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# image\tmask\n")
        fh.writelines(lines)
    return path


# ---------------------------------------------------------------------------
# synthetic corpus


def class_palette(num_classes):
    """Distinct RGB colors on a regular grid inside [0.15, 0.85]^3."""
    levels = max(2, math.ceil(num_classes ** (1 / 3)))
    grid = np.linspace(0.15, 0.85, levels)
    colors = [(r, g, b) for r in grid for g in grid for b in grid]
    return np.array(colors[:num_classes], dtype=np.float32)


def synth_sample(rng, h, w, num_classes, noise=0.05):
    mask = np.zeros((h, w), dtype=np.uint8)
    n_shapes = int(rng.integers(1, min(5, num_classes - 1) + 1))
    classes = rng.choice(np.arange(1, num_classes), size=n_shapes, replace=False)
    yy, xx = np.mgrid[0:h, 0:w]
    lo = max(h, w) // 6
    hi = max(h, w) // 2
    for cls in classes:
        if rng.random() < 0.5:
            sh, sw = rng.integers(lo, hi + 1, size=2)
            y0 = int(rng.integers(0, h - sh + 1))
            x0 = int(rng.integers(0, w - sw + 1))
            mask[y0 : y0 + sh, x0 : x0 + sw] = cls
        else:
            r = rng.uniform(lo / 2, hi / 2)
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    palette = class_palette(num_classes)
    image = palette[mask].transpose(2, 0, 1)
    if noise > 0:
        image = image + rng.normal(0, noise, size=image.shape)
    image = np.clip(image, 0, 1).astype(np.float32)
    return SegmentationSample(image, mask)


def synth_generate(seed, n, h, w, num_classes, noise=0.05):
    """Deterministic corpus of rectangles and discs over background class 0."""
    if num_classes < 2:
        raise ConfigError("synthetic corpus needs at least 2 classes")
    if h < 32 or w < 32:
        raise ConfigError("synthetic images must be at least 32x32")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, h, w, num_classes, noise) for _ in range(n)]


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentPolicy:
    crop_size: tuple = (64, 64)
    hflip_prob: float = 0.5
    scale_range: tuple = (0.5, 2.0)
    image_pad: float = 0.0
    mask_pad: int = IGNORE_INDEX

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigError(f"invalid scale range {self.scale_range}")
        if min(self.crop_size) < 1:
            raise ConfigError(f"invalid crop size {self.crop_size}")
        if not 0 <= self.hflip_prob <= 1:
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")


def resize_image(image, h, w):
    ah = interp_matrix(image.shape[1], h, np.float64)
    aw = interp_matrix(image.shape[2], w, np.float64)
    return (ah @ image.astype(np.float64) @ aw.T).astype(np.float32)


def resize_mask(mask, h, w):
    """Nearest-neighbor resize using half-pixel centers."""
    rows = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(np.intp), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(np.intp), mask.shape[1] - 1)
    return mask[rows[:, None], cols[None, :]]


def hflip(sample):
    return SegmentationSample(sample.image[:, :, ::-1].copy(), sample.mask[:, ::-1].copy())


def augment(sample, rng, policy):
    """Random scale, pad, crop and horizontal flip; output is ``policy.crop_size``."""
    image, mask = sample.image, sample.mask
    lo, hi = policy.scale_range
    u = lo if lo == hi else float(rng.uniform(lo, hi))
    h, w = mask.shape
    nh, nw = max(1, int(round(h * u))), max(1, int(round(w * u)))
    if (nh, nw) != (h, w):
        image, mask = resize_image(image, nh, nw), resize_mask(mask, nh, nw)
    ch, cw = policy.crop_size
    ph, pw = max(ch - nh, 0), max(cw - nw, 0)
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), constant_values=policy.image_pad)
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=policy.mask_pad)
    y0 = int(rng.integers(0, image.shape[1] - ch + 1))
    x0 = int(rng.integers(0, image.shape[2] - cw + 1))
    out = SegmentationSample(
        np.ascontiguousarray(image[:, y0 : y0 + ch, x0 : x0 + cw]),
        np.ascontiguousarray(mask[y0 : y0 + ch, x0 : x0 + cw]),
    )
    if rng.random() < policy.hflip_prob:
        out = hflip(out)
    return out
