"""U-Net assembly: contracting and expanding paths built from the autodiff ops.

The contracting path applies two 3x3 conv+ReLU blocks per scale and a 2x2
max pool between scales; channel counts double at each pool.  The
expanding path mirrors it with an up-convolution (2x nearest upsample and
a channel-halving 2x2 conv), a centered crop-and-concat of the matching
skip connection, and two more conv+ReLU blocks.  A 1x1 convolution maps
the final feature maps to class logits.  At the nominal depth-4/base-64
configuration this is 23 convolution layers.

``same`` padding keeps logits aligned with input pixels (the pipeline
default); ``valid`` mode reproduces the unpadded shrink-and-crop
arithmetic and is exercised in tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TilingError


@dataclass
class UNetConfig:
    in_channels: int = 3
    n_classes: int = 2
    depth: int = 3
    base_channels: int = 16
    padding: str = "same"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be at least 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.padding not in ("same", "valid"):
            raise ValueError("padding must be 'same' or 'valid'")

    def channels_at(self, scale: int) -> int:
        return self.base_channels * (2**scale)


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def conv_layer_count(self) -> int:
        """3x3 double-conv blocks on both paths, plus up-convs and the 1x1 head."""
        d = self.config.depth
        return 2 * (d + 1) + d + 2 * d + 1

    def named_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: tuple(t.values.shape) for name, t in self.params.items()}


def _layer_shapes(config: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in build order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for s in range(config.depth + 1):
        c_in = config.in_channels if s == 0 else config.channels_at(s - 1)
        c_out = config.channels_at(s)
        shapes.append((f"enc{s}_conv1_w", (c_out, c_in, 3, 3)))
        shapes.append((f"enc{s}_conv1_b", (c_out,)))
        shapes.append((f"enc{s}_conv2_w", (c_out, c_out, 3, 3)))
        shapes.append((f"enc{s}_conv2_b", (c_out,)))
    for s in reversed(range(config.depth)):
        c_hi = config.channels_at(s + 1)
        c_lo = config.channels_at(s)
        shapes.append((f"up{s}_w", (c_lo, c_hi, 2, 2)))
        shapes.append((f"up{s}_b", (c_lo,)))
        shapes.append((f"dec{s}_conv1_w", (c_lo, 2 * c_lo, 3, 3)))
        shapes.append((f"dec{s}_conv1_b", (c_lo,)))
        shapes.append((f"dec{s}_conv2_w", (c_lo, c_lo, 3, 3)))
        shapes.append((f"dec{s}_conv2_b", (c_lo,)))
    shapes.append(("head_w", (config.n_classes, config.base_channels, 1, 1)))
    shapes.append(("head_b", (config.n_classes,)))
    return shapes


def build(config: UNetConfig, seed: int, dtype=np.float32) -> UNetModel:
    """Initialize all conv weights ~ N(0, 2/fan_in) and biases to zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _layer_shapes(config):
        if name.endswith("_b"):
            params[name] = ad.zeros_init(shape, dtype=dtype)
        else:
            params[name] = ad.gaussian_init(shape, rng, dtype=dtype)
    return UNetModel(config=config, params=params)


def check_tiling(config: UNetConfig, height: int, width: int) -> str | None:
    """Verify every pre-pool feature map has even spatial dims (and, in
    valid mode, that crops stay centered).  Returns None when ok."""
    valid = config.padding == "valid"
    h, w = height, width
    skips: list[tuple[int, int]] = []
    for s in range(config.depth):
        if valid:
            h -= 4
            w -= 4
        if h < 2 or w < 2:
            return f"feature map exhausted before pooling at scale {s} ({h}x{w})"
        if h % 2 or w % 2:
            return f"pooling at scale {s + 1} would see odd dims {h}x{w}"
        skips.append((h, w))
        h //= 2
        w //= 2
    if valid:
        h -= 4
        w -= 4
    if h < 1 or w < 1:
        return f"bottleneck feature map exhausted ({h}x{w})"
    for s in reversed(range(config.depth)):
        h *= 2
        w *= 2
        sh, sw = skips[s]
        if sh < h or sw < w:
            return f"skip {sh}x{sw} smaller than upsampled map {h}x{w} at scale {s}"
        if (sh - h) % 2 or (sw - w) % 2:
            return f"crop parity mismatch at scale {s}: skip {sh}x{sw} vs {h}x{w}"
        if valid:
            h -= 4
            w -= 4
        if h < 1 or w < 1:
            return f"decoder feature map exhausted at scale {s}"
    return None


def output_shape(config: UNetConfig, height: int, width: int) -> tuple[int, int]:
    """Spatial dims of the logits for an input of the given size."""
    violation = check_tiling(config, height, width)
    if violation:
        raise TilingError(violation)
    if config.padding == "same":
        return height, width
    h, w = height, width
    for _ in range(config.depth):
        h = (h - 4) // 2
        w = (w - 4) // 2
    h -= 4
    w -= 4
    for _ in range(config.depth):
        h = 2 * h - 4
        w = 2 * w - 4
    return h, w


def forward(model: UNetModel, x) -> Tensor:
    """Run the network on a (C, H, W) input, returning (K, H', W') logits."""
    x = ad.as_tensor(x)
    cfg = model.config
    if x.values.ndim != 3 or x.values.shape[0] != cfg.in_channels:
        raise ad.ShapeError(f"input must be ({cfg.in_channels}, H, W), got {x.values.shape}")
    violation = check_tiling(cfg, x.values.shape[1], x.values.shape[2])
    if violation:
        raise TilingError(violation)
    p = model.params
    pad = cfg.padding

    skips: list[Tensor] = []
    h = x
    for s in range(cfg.depth + 1):
        h = ad.relu(ad.conv2d(h, p[f"enc{s}_conv1_w"], p[f"enc{s}_conv1_b"], padding=pad))
        h = ad.relu(ad.conv2d(h, p[f"enc{s}_conv2_w"], p[f"enc{s}_conv2_b"], padding=pad))
        if s < cfg.depth:
            skips.append(h)
            h = ad.maxpool2(h)
    for s in reversed(range(cfg.depth)):
        h = ad.upconv2(h, p[f"up{s}_w"], p[f"up{s}_b"])
        h = ad.crop_concat(skips[s], h)
        h = ad.relu(ad.conv2d(h, p[f"dec{s}_conv1_w"], p[f"dec{s}_conv1_b"], padding=pad))
        h = ad.relu(ad.conv2d(h, p[f"dec{s}_conv2_w"], p[f"dec{s}_conv2_b"], padding=pad))
    return ad.conv2d(h, p["head_w"], p["head_b"], padding=pad)


def param_count(model: UNetModel) -> int:
    return sum(t.values.size for t in model.params.values())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

VCAM_MAGIC = b"VCAM"
VCAM_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or version-incompatible checkpoint file."""


def save_checkpoint(model: UNetModel, path: str):
    """Bit-exact model container: config JSON plus named float32 tensors."""
    config_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(VCAM_MAGIC)
        f.write(struct.pack("<II", VCAM_VERSION, len(config_json)))
        f.write(config_json)
        f.write(struct.pack("<I", len(model.params)))
        for name, tensor in model.params.items():
            raw_name = name.encode()
            arr = np.ascontiguousarray(tensor.values, dtype="<f4")
            f.write(struct.pack("<I", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> UNetModel:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != VCAM_MAGIC:
        raise CheckpointError("not a VCAM checkpoint")
    version, config_len = struct.unpack_from("<II", raw, 4)
    if version != VCAM_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    config = UNetConfig(**json.loads(raw[offset : offset + config_len].decode()))
    offset += config_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{ndim}I", raw, offset)
        offset += 4 * ndim
        size = int(np.prod(dims))
        values = np.frombuffer(raw[offset : offset + 4 * size], dtype="<f4").reshape(dims).copy()
        offset += 4 * size
        params[name] = Tensor(values, requires_grad=True)
    expected = {name for name, _ in _layer_shapes(config)}
    if set(params) != expected:
        raise CheckpointError("checkpoint parameters do not match its config")
    return UNetModel(config=config, params=params)
