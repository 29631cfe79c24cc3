"""Image and mask data model, file formats, and the synthetic scene generator.

Rasters are multi-channel float32 images stored channel-major (C, H, W).
Supported on-disk formats:

* PGM (P5) and PPM (P6), binary, maxval 255.  Samples are divided by 255
  on load, so loaded rasters live in [0, 1].
* VCAT, a bit-exact little-endian tensor container used for anything that
  must round-trip losslessly (multi-channel rasters, probability maps,
  weight maps).

Computed rasters (gradient magnitudes etc.) may carry values outside
[0, 1]; the range guarantee applies to file loads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

# Ground resolution of the 0.31 m/pixel RGB band; used when a file format
# carries no resolution metadata.
DEFAULT_PIXEL_SIZE_M = 0.31

VCAT_MAGIC = b"VCAT"
VCAT_VERSION = 1


class FormatError(ValueError):
    """Unreadable, malformed, or unsupported image file."""


@dataclass
class Raster:
    """Multi-channel floating-point image, data shaped (channels, height, width)."""

    width: int
    height: int
    channels: int
    data: np.ndarray
    pixel_size_m: float | None = DEFAULT_PIXEL_SIZE_M

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != (self.channels, self.height, self.width):
            raise ValueError(
                f"raster data shape {self.data.shape} does not match "
                f"(channels={self.channels}, height={self.height}, width={self.width})"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("raster contains non-finite samples")
        if self.pixel_size_m is not None and self.pixel_size_m <= 0:
            raise ValueError("pixel_size_m must be positive")

    @classmethod
    def from_array(cls, data: np.ndarray, pixel_size_m: float | None = DEFAULT_PIXEL_SIZE_M) -> "Raster":
        """Wrap a (C, H, W) or (H, W) array as a Raster."""
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None, :, :]
        if arr.ndim != 3:
            raise ValueError(f"expected 2-D or 3-D array, got shape {arr.shape}")
        c, h, w = arr.shape
        return cls(width=w, height=h, channels=c, data=arr, pixel_size_m=pixel_size_m)

    def mean_channel(self) -> np.ndarray:
        """Per-pixel mean over channels, shape (H, W) float64."""
        return self.data.mean(axis=0, dtype=np.float64)


@dataclass
class LabelMask:
    """Per-pixel class indices in {0, ..., n_classes-1}, shape (H, W)."""

    width: int
    height: int
    labels: np.ndarray
    n_classes: int = 2

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.shape != (self.height, self.width):
            raise ValueError(
                f"label shape {self.labels.shape} does not match (height={self.height}, width={self.width})"
            )
        if self.n_classes < 2:
            raise ValueError("a label mask needs at least 2 classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside {0..n_classes-1}")

    @classmethod
    def from_array(cls, labels: np.ndarray, n_classes: int = 2) -> "LabelMask":
        arr = np.asarray(labels, dtype=np.int32)
        return cls(width=arr.shape[1], height=arr.shape[0], labels=arr, n_classes=n_classes)


@dataclass
class BinaryMask:
    """Per-pixel {0, 1} bits, shape (H, W)."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if self.bits.shape != (self.height, self.width):
            raise ValueError(
                f"mask shape {self.bits.shape} does not match (height={self.height}, width={self.width})"
            )
        if self.bits.size and not np.isin(self.bits, (0, 1)).all():
            raise ValueError("binary mask values must be 0 or 1")

    @classmethod
    def from_array(cls, bits: np.ndarray) -> "BinaryMask":
        arr = np.asarray(bits)
        arr = (arr != 0).astype(np.uint8)
        return cls(width=arr.shape[1], height=arr.shape[0], bits=arr)


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _read_pnm_tokens(raw: bytes, count: int, start: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integer tokens, honoring '#' comments.

    Returns the tokens and the offset of the byte right after the final
    token's single trailing whitespace byte.
    """
    tokens: list[int] = []
    i = start
    n = len(raw)
    while len(tokens) < count:
        while i < n and raw[i : i + 1].isspace():
            i += 1
        if i < n and raw[i] == ord("#"):
            while i < n and raw[i] != ord("\n"):
                i += 1
            continue
        j = i
        while j < n and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PNM header")
        try:
            tokens.append(int(raw[i:j]))
        except ValueError as exc:
            raise FormatError(f"bad PNM header token {raw[i:j]!r}") from exc
        i = j
    if i >= n or not raw[i : i + 1].isspace():
        raise FormatError("PNM header not followed by whitespace")
    return tokens, i + 1


def _load_pnm(raw: bytes, pixel_size_m: float | None) -> Raster:
    magic = raw[:2]
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise FormatError(f"unsupported PNM magic {magic!r}")
    (width, height, maxval), offset = _read_pnm_tokens(raw, 3, 2)
    if width <= 0 or height <= 0:
        raise FormatError("non-positive PNM dimensions")
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}")
    need = width * height * channels
    body = raw[offset : offset + need]
    if len(body) < need:
        raise FormatError(f"PNM body truncated: expected {need} bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float32) / 255.0
    arr = arr.reshape(height, width, channels).transpose(2, 0, 1)
    return Raster(width=width, height=height, channels=channels, data=arr, pixel_size_m=pixel_size_m)


def _save_pnm(r: Raster, path: str):
    if r.channels not in (1, 3):
        raise FormatError(f"PGM/PPM require 1 or 3 channels, raster has {r.channels}")
    magic = b"P5" if r.channels == 1 else b"P6"
    samples = np.clip(np.rint(r.data * 255.0), 0, 255).astype(np.uint8)
    body = samples.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{r.width} {r.height}\n255\n".encode())
        f.write(body)


# ---------------------------------------------------------------------------
# VCAT tensor container
# ---------------------------------------------------------------------------


def write_vcat(path: str, array: np.ndarray):
    """Write an N-D float32 tensor: magic, u32 version, u32 ndim, dims, values (all LE)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(VCAT_MAGIC)
        f.write(struct.pack("<II", VCAT_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_vcat(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    return _parse_vcat(raw)


def _parse_vcat(raw: bytes) -> np.ndarray:
    if raw[:4] != VCAT_MAGIC:
        raise FormatError("not a VCAT file")
    if len(raw) < 12:
        raise FormatError("VCAT header truncated")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VCAT_VERSION:
        raise FormatError(f"unsupported VCAT version {version}")
    if len(raw) < 12 + 4 * ndim:
        raise FormatError("VCAT dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", raw, 12)
    count = int(np.prod(dims)) if ndim else 1
    body = raw[12 + 4 * ndim :]
    if len(body) < 4 * count:
        raise FormatError(f"VCAT body truncated: expected {4 * count} bytes, got {len(body)}")
    values = np.frombuffer(body[: 4 * count], dtype="<f4")
    return values.reshape(dims).copy()


# ---------------------------------------------------------------------------
# Load / save dispatch
# ---------------------------------------------------------------------------


def load_raster(path: str, pixel_size_m: float | None = DEFAULT_PIXEL_SIZE_M) -> Raster:
    """Load a PGM/PPM/VCAT file; 8-bit samples are normalized by 255."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if raw[:4] == VCAT_MAGIC:
        arr = _parse_vcat(raw)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise FormatError(f"VCAT raster must be 2-D or 3-D, got {arr.ndim}-D")
        if not np.isfinite(arr).all():
            raise FormatError("VCAT raster contains non-finite samples")
        c, h, w = arr.shape
        return Raster(width=w, height=h, channels=c, data=arr, pixel_size_m=pixel_size_m)
    if raw[:2] in (b"P5", b"P6"):
        return _load_pnm(raw, pixel_size_m)
    raise FormatError(f"unrecognized image format in {path}")


def save_raster(r: Raster, path: str):
    """Save by extension: .pgm (P5, 1ch), .ppm (P6, 3ch), .vcat (lossless any-ch)."""
    lower = path.lower()
    if lower.endswith(".vcat"):
        write_vcat(path, r.data)
    elif lower.endswith(".pgm") or lower.endswith(".ppm"):
        _save_pnm(r, path)
    else:
        raise FormatError(f"unknown raster extension for {path} (use .pgm/.ppm/.vcat)")


def save_mask(m: BinaryMask, path: str):
    """Serialize a binary mask as P5 with samples {0, 255}."""
    as_raster = Raster.from_array(m.bits.astype(np.float32), pixel_size_m=None)
    _save_pnm(as_raster, path)


def load_mask(path: str) -> BinaryMask:
    """Load a P5 mask; any nonzero sample becomes 1."""
    r = load_raster(path)
    if r.channels != 1:
        raise FormatError("masks must be single-channel")
    return BinaryMask.from_array(r.data[0] > 0)


# ---------------------------------------------------------------------------
# Synthetic blob scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float


def sample_ellipses(seed: int, width: int, height: int, n_blobs: int) -> list[Ellipse]:
    """Draw the ellipse parameters used by generate_blob_scene for this seed.

    Exposed so tests can re-rasterize the same ellipses independently.
    """
    rng = np.random.default_rng(seed)
    return _draw_ellipses(rng, width, height, n_blobs)


def _draw_ellipses(rng: np.random.Generator, width: int, height: int, n_blobs: int) -> list[Ellipse]:
    out = []
    scale = min(width, height)
    for _ in range(n_blobs):
        cx = rng.uniform(0.12 * width, 0.88 * width)
        cy = rng.uniform(0.12 * height, 0.88 * height)
        a = rng.uniform(0.05, 0.14) * scale
        b = rng.uniform(0.05, 0.14) * scale
        theta = rng.uniform(0.0, math.pi)
        out.append(Ellipse(cx=cx, cy=cy, a=a, b=b, theta=theta))
    return out


def _ellipse_mask(e: Ellipse, width: int, height: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    dx = xs - e.cx
    dy = ys - e.cy
    c = math.cos(e.theta)
    s = math.sin(e.theta)
    u = dx * c + dy * s
    v = dy * c - dx * s
    return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0


def generate_blob_scene(
    seed: int, width: int, height: int, n_blobs: int, pixel_size_m: float | None = DEFAULT_PIXEL_SIZE_M
) -> tuple[Raster, LabelMask]:
    """Render random textured ellipses ("vegetation", label 1) over a noise background.

    Deterministic for a given seed; the label mask marks exactly the pixels
    inside any sampled ellipse.
    """
    if width < 32 or height < 32:
        raise ValueError("scene must be at least 32x32")
    if n_blobs < 0:
        raise ValueError("n_blobs must be non-negative")
    rng = np.random.default_rng(seed)
    ellipses = _draw_ellipses(rng, width, height, n_blobs)

    fg = np.zeros((height, width), dtype=bool)
    for e in ellipses:
        fg |= _ellipse_mask(e, width, height)

    bg_mean = np.array([0.34, 0.30, 0.26], dtype=np.float32)
    veg_mean = np.array([0.24, 0.66, 0.30], dtype=np.float32)
    bg_noise = rng.normal(0.0, 0.05, size=(3, height, width)).astype(np.float32)
    veg_noise = rng.normal(0.0, 0.05, size=(3, height, width)).astype(np.float32)

    data = bg_mean[:, None, None] + bg_noise
    veg = veg_mean[:, None, None] + veg_noise
    data[:, fg] = veg[:, fg]
    data = np.clip(data, 0.0, 1.0)

    raster = Raster(width=width, height=height, channels=3, data=data, pixel_size_m=pixel_size_m)
    labels = LabelMask.from_array(fg.astype(np.int32), n_classes=2)
    return raster, labels
