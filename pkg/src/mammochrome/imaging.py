"""Grayscale PNG ingest, background removal, ROI cropping, resize/normalize,
and encoded-image export.

Input mammograms arrive as 8- or 16-bit grayscale PNGs. The cleanup chain is
Otsu thresholding, largest 4-connected foreground component, tight crop,
aspect-preserving bilinear rescale, centered zero padding, and division by
the bit-depth maximum. Everything is deterministic and pure over owned
buffers, so images can be processed in parallel freely.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage


class ImagingError(Exception):
    """Base class for image-contract violations."""


class NotGrayscaleError(ImagingError):
    """PNG exists and decodes but is not single-channel grayscale."""


class CorruptImageError(ImagingError):
    """File is not a decodable PNG stream."""


class DegenerateImageError(ImagingError):
    """Operation undefined on this input (e.g. constant image)."""


class NoForegroundError(ImagingError):
    """Thresholding left no foreground pixels to crop."""


@dataclass
class BBox:
    """Bounding box in original image coordinates, x/y top-left."""
    x: int
    y: int
    w: int
    h: int

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @staticmethod
    def from_dict(d: dict) -> "BBox":
        return BBox(d["x"], d["y"], d["w"], d["h"])


@dataclass
class RawImage:
    """Integer grayscale image straight from disk."""
    width: int
    height: int
    bit_depth: int
    pixels: np.ndarray  # (height, width) unsigned integers

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        self.pixels = np.asarray(self.pixels)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(f"pixel grid {self.pixels.shape} != ({self.height}, {self.width})")
        if self.pixels.size and int(self.pixels.max()) > self.max_value:
            raise ValueError("pixel value exceeds bit depth")

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1


@dataclass
class PreprocessedImage:
    """Float image in [0, 1] at the uniform network input size."""
    values: np.ndarray  # (height, width) float64 in [0, 1]
    source_crop: BBox

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-d grid")
        if self.values.size and (self.values.min() < 0.0 or self.values.max() > 1.0):
            raise ValueError("values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------


def load_png16(path) -> RawImage:
    """Losslessly decode an 8- or 16-bit grayscale PNG."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.asarray(im)
    except UnidentifiedImageError as e:
        raise CorruptImageError(f"not a decodable image: {path}") from e
    except OSError as e:
        raise CorruptImageError(f"truncated or corrupt image: {path}") from e
    if mode == "L":
        bit_depth = 8
        pixels = arr.astype(np.uint8)
    elif mode in ("I", "I;16"):
        bit_depth = 16
        pixels = arr.astype(np.uint16)
    else:
        raise NotGrayscaleError(f"expected grayscale PNG, got mode {mode!r}: {path}")
    h, w = pixels.shape
    return RawImage(width=w, height=h, bit_depth=bit_depth, pixels=pixels)


def write_gray_png(image: RawImage, path) -> None:
    """Write a RawImage back to disk at its own bit depth."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.bit_depth == 8:
        Image.fromarray(image.pixels.astype(np.uint8), mode="L").save(path)
    else:
        Image.fromarray(image.pixels.astype(np.uint16)).save(path)


def quantize(values: np.ndarray, bit_depth: int) -> np.ndarray:
    """Map [0,1] floats to integers by round-half-up at the given depth."""
    maxval = (1 << bit_depth) - 1
    q = np.floor(np.clip(values, 0.0, 1.0) * maxval + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def write_rgb_png(channels: np.ndarray, path, bit_depth: int = 8) -> None:
    """Write a (3, h, w) float image in [0,1] as an RGB PNG.

    8-bit goes through Pillow; 16-bit RGB is not writable with Pillow, so a
    minimal encoder emits it directly (color type 2, filter 0 rows,
    big-endian samples per the PNG byte order).
    """
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 3 or channels.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) channels, got {channels.shape}")
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = quantize(channels, bit_depth)
    hwc = np.ascontiguousarray(np.moveaxis(q, 0, 2))
    if bit_depth == 8:
        Image.fromarray(hwc, mode="RGB").save(path)
        return
    _write_png_raw(path, hwc.astype(">u2"), bit_depth=16, color_type=2)


def _write_png_raw(path: Path, hwc_be: np.ndarray, bit_depth: int, color_type: int) -> None:
    h, w = hwc_be.shape[:2]
    raw = bytearray()
    row_bytes = hwc_be.tobytes()
    stride = len(row_bytes) // h
    for r in range(h):
        raw.append(0)  # filter type 0
        raw.extend(row_bytes[r * stride:(r + 1) * stride])

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    data = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(bytes(raw), 9)) + chunk(b"IEND", b""))
    path.write_bytes(data)


def read_rgb_png(path) -> tuple[np.ndarray, int]:
    """Decode an RGB PNG to integer (3, h, w) plus its bit depth.

    8-bit files go through Pillow. 16-bit files are parsed directly
    (filter-0 rows only, which is what write_rgb_png emits).
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise CorruptImageError(f"not a PNG: {path}")
    # Peek at IHDR for the real stored depth; Pillow silently narrows 16-bit RGB.
    w, h, depth, color_type = struct.unpack(">IIBB", data[16:26])
    if color_type != 2:
        raise ValueError(f"expected RGB (color type 2), got {color_type}")
    if depth == 8:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
        return np.moveaxis(arr, 2, 0).astype(np.uint8), 8
    if depth != 16:
        raise ValueError(f"unsupported bit depth {depth}")
    idat = bytearray()
    off = 8
    while off < len(data):
        (length,) = struct.unpack(">I", data[off:off + 4])
        tag = data[off + 4:off + 8]
        if tag == b"IDAT":
            idat.extend(data[off + 8:off + 8 + length])
        off += 12 + length
    raw = zlib.decompress(bytes(idat))
    stride = w * 3 * 2
    rows = []
    for r in range(h):
        base = r * (stride + 1)
        if raw[base] != 0:
            raise ValueError("only filter type 0 rows are supported")
        rows.append(np.frombuffer(raw, dtype=">u2", count=w * 3, offset=base + 1))
    arr = np.stack(rows).reshape(h, w, 3).astype(np.uint16)
    return np.moveaxis(arr, 2, 0), 16


# ---------------------------------------------------------------------------
# background removal and cropping
# ---------------------------------------------------------------------------


def otsu_threshold(image: RawImage) -> int:
    """Smallest threshold maximizing between-class variance.

    Foreground is pixels > t. The scan covers every representable intensity;
    thresholds leaving either class empty score zero variance.
    """
    levels = image.max_value + 1
    counts = np.bincount(image.pixels.reshape(-1).astype(np.int64), minlength=levels)
    if np.count_nonzero(counts) < 2:
        raise DegenerateImageError("constant image has no Otsu threshold")
    total = counts.sum()
    intensities = np.arange(levels, dtype=np.float64)
    cum_n = np.cumsum(counts)                      # pixels <= t
    cum_sum = np.cumsum(counts * intensities)      # intensity mass <= t
    w0 = cum_n / total
    w1 = 1.0 - w0
    grand = cum_sum[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = cum_sum / cum_n
        mu1 = (grand - cum_sum) / (total - cum_n)
        var = w0 * w1 * (mu0 - mu1) ** 2
    var = np.where((cum_n == 0) | (cum_n == total), 0.0, var)
    return int(np.argmax(var))


def crop_to_roi(image: RawImage, threshold: int) -> tuple[RawImage, BBox]:
    """Tight crop of the largest 4-connected foreground component."""
    mask = image.pixels > threshold
    if not mask.any():
        raise NoForegroundError(f"no pixels above threshold {threshold}")
    four_conn = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, n = ndimage.label(mask, structure=four_conn)
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    keep = int(np.argmax(sizes))  # ties resolve to the first-scanned component
    ys, xs = np.nonzero(labels == keep)
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    crop = image.pixels[y0:y1 + 1, x0:x1 + 1].copy()
    box = BBox(x=x0, y=y0, w=x1 - x0 + 1, h=y1 - y0 + 1)
    out = RawImage(width=box.w, height=box.h, bit_depth=image.bit_depth, pixels=crop)
    return out, box


# ---------------------------------------------------------------------------
# resize / pad / normalize
# ---------------------------------------------------------------------------


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-center alignment."""
    in_h, in_w = values.shape
    if out_h == in_h and out_w == in_w:
        return values.astype(np.float64).copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    v = values.astype(np.float64)
    top = v[y0][:, x0] * (1 - wx) + v[y0][:, x1] * wx
    bot = v[y1][:, x0] * (1 - wx) + v[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def resize_pad_normalize(image: RawImage, target_h: int, target_w: int,
                         source_crop: BBox | None = None) -> PreprocessedImage:
    """Aspect-preserving rescale, centered zero padding, [0,1] normalize."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    if image.width < 1 or image.height < 1:
        raise ValueError("input dimensions must be >= 1")
    values = image.pixels.astype(np.float64) / image.max_value
    # The tighter-fitting axis lands exactly on the target extent.
    if target_h * image.width <= target_w * image.height:
        out_h = target_h
        out_w = max(1, round(image.width * target_h / image.height))
    else:
        out_w = target_w
        out_h = max(1, round(image.height * target_w / image.width))
    content = bilinear_resize(values, out_h, out_w)
    canvas = np.zeros((target_h, target_w))
    oy = (target_h - out_h) // 2
    ox = (target_w - out_w) // 2
    canvas[oy:oy + out_h, ox:ox + out_w] = content
    crop = source_crop or BBox(0, 0, image.width, image.height)
    return PreprocessedImage(values=canvas, source_crop=crop)


def preprocess(image: RawImage, target_h: int, target_w: int) -> PreprocessedImage:
    """Full chain: Otsu background removal, ROI crop, resize/pad/normalize."""
    t = otsu_threshold(image)
    cropped, box = crop_to_roi(image, t)
    return resize_pad_normalize(cropped, target_h, target_w, source_crop=box)
