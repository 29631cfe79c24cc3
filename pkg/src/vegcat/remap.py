"""Remapping-based augmentation and the half-positive patch sampler.

A remap sends every output pixel to a source pixel, out(x, y) =
src(h(x, y)).  The grid bijections used here are horizontal/vertical
flips and exact 90-degree rotations; together they generate the eight
elements of the dihedral group D4, so labels and weights can follow an
image through any transform without interpolation.

The horizontal flip uses x' = width - 1 - x (the inclusive mirror), and
rot90(1) rotates counterclockwise.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .raster import LabelMask, Raster
from .weightmap import WeightMap


class PatchSizeError(ValueError):
    """Requested patch does not fit inside the source image."""


@dataclass(frozen=True)
class Dihedral:
    """A D4 element: rotate counterclockwise by 90*rot degrees, then
    horizontally flip if `flip`.  Acts on the last two axes of an array."""

    rot: int = 0
    flip: bool = False

    def __post_init__(self):
        object.__setattr__(self, "rot", self.rot % 4)

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, self.rot, axes=(-2, -1))
        if self.flip:
            out = np.flip(out, axis=-1)
        return np.ascontiguousarray(out)

    def map_point(self, x: int, y: int, width: int, height: int) -> tuple[int, int]:
        """Source coordinates h(x, y) read by output pixel (x, y).

        `width`/`height` are the SOURCE dimensions; for odd rotations the
        output grid is height x width.  Implemented by transforming the
        source index grids, so out(x, y) == src(h(x, y)) holds by
        construction.
        """
        src_x = np.broadcast_to(np.arange(width), (height, width))
        src_y = np.broadcast_to(np.arange(height)[:, None], (height, width))
        return int(self.apply(src_x)[y, x]), int(self.apply(src_y)[y, x])

    def compose(self, other: "Dihedral") -> "Dihedral":
        """Element equal to applying `other` first, then self."""
        if not other.flip:
            return Dihedral((self.rot + other.rot) % 4, self.flip)
        return Dihedral((other.rot - self.rot) % 4, not self.flip)

    def inverse(self) -> "Dihedral":
        if self.flip:
            return self
        return Dihedral((-self.rot) % 4, False)


IDENTITY = Dihedral(0, False)
HFLIP = Dihedral(0, True)
VFLIP = Dihedral(2, True)
ROT90 = Dihedral(1, False)
ROT180 = Dihedral(2, False)
ROT270 = Dihedral(3, False)

D4 = (
    IDENTITY,
    ROT90,
    ROT180,
    ROT270,
    HFLIP,
    Dihedral(1, True),
    VFLIP,
    Dihedral(3, True),
)


def remap(src: Raster, h: Dihedral) -> Raster:
    """Resample src through a grid bijection: out(x, y) = src(h(x, y))."""
    data = h.apply(src.data)
    _, new_h, new_w = data.shape
    return Raster(width=new_w, height=new_h, channels=src.channels, data=data, pixel_size_m=src.pixel_size_m)


def hflip(src: Raster) -> Raster:
    return remap(src, HFLIP)


def vflip(src: Raster) -> Raster:
    return remap(src, VFLIP)


def rot90(src: Raster, k: int = 1) -> Raster:
    return remap(src, Dihedral(k % 4, False))


def color_blur(src: Raster, sigma: float, seed: int) -> Raster:
    """Clamped zero-mean Gaussian jitter per channel sample."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return Raster(
            width=src.width,
            height=src.height,
            channels=src.channels,
            data=src.data.copy(),
            pixel_size_m=src.pixel_size_m,
        )
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=src.data.shape).astype(np.float32)
    data = np.clip(src.data + noise, 0.0, 1.0)
    return Raster(width=src.width, height=src.height, channels=src.channels, data=data, pixel_size_m=src.pixel_size_m)


@dataclass
class Patch:
    """Co-located image/label/weight crops of size S x S taken at `origin`."""

    image: Raster
    label: LabelMask
    weight: WeightMap
    origin: tuple[int, int]

    def __post_init__(self):
        if not (self.image.width == self.label.width == self.weight.width):
            raise ValueError("patch crops must share width")
        if not (self.image.height == self.label.height == self.weight.height):
            raise ValueError("patch crops must share height")

    @property
    def size(self) -> int:
        return self.image.width

    def has_positive(self) -> bool:
        return bool((self.label.labels > 0).any())


def _crop(img: Raster, labels: LabelMask, weights: WeightMap, x: int, y: int, s: int) -> Patch:
    sub_img = Raster(
        width=s,
        height=s,
        channels=img.channels,
        data=img.data[:, y : y + s, x : x + s].copy(),
        pixel_size_m=img.pixel_size_m,
    )
    sub_lab = LabelMask(width=s, height=s, labels=labels.labels[y : y + s, x : x + s].copy(), n_classes=labels.n_classes)
    sub_w = WeightMap(width=s, height=s, w=weights.w[y : y + s, x : x + s].copy())
    return Patch(image=sub_img, label=sub_lab, weight=sub_w, origin=(x, y))


def sample_patches(
    img: Raster,
    labels: LabelMask,
    weights: WeightMap,
    S: int,
    n: int,
    seed: int,
) -> list[Patch]:
    """Sample n random S x S patches; at least ceil(n/2) contain positive pixels.

    The guarantee holds whenever the source has any positive pixel.  A source
    with no positives falls back to unconstrained sampling and emits a warning.
    """
    if S > min(img.width, img.height):
        raise PatchSizeError(f"patch size {S} exceeds source {img.width}x{img.height}")
    if labels.width != img.width or labels.height != img.height:
        raise ValueError("label mask dimensions differ from image")
    if weights.width != img.width or weights.height != img.height:
        raise ValueError("weight map dimensions differ from image")
    if n == 0:
        return []

    rng = np.random.default_rng(seed)
    max_x = img.width - S
    max_y = img.height - S
    pos_ys, pos_xs = np.nonzero(labels.labels > 0)
    have_positive = pos_ys.size > 0
    n_positive = (n + 1) // 2
    if not have_positive:
        warnings.warn("source has no positive pixels; sampling unconstrained patches", stacklevel=2)
        n_positive = 0

    patches: list[Patch] = []
    for i in range(n):
        if i < n_positive:
            patch = None
            for _ in range(64):
                x = int(rng.integers(0, max_x + 1))
                y = int(rng.integers(0, max_y + 1))
                cand = _crop(img, labels, weights, x, y, S)
                if cand.has_positive():
                    patch = cand
                    break
            if patch is None:
                # Center the crop on a random positive pixel; always succeeds.
                j = int(rng.integers(0, pos_ys.size))
                x = int(np.clip(pos_xs[j] - S // 2, 0, max_x))
                y = int(np.clip(pos_ys[j] - S // 2, 0, max_y))
                patch = _crop(img, labels, weights, x, y, S)
            patches.append(patch)
        else:
            x = int(rng.integers(0, max_x + 1))
            y = int(rng.integers(0, max_y + 1))
            patches.append(_crop(img, labels, weights, x, y, S))
    return patches


@dataclass(frozen=True)
class AugmentPlan:
    """One independently sampled draw per available augmentation."""

    hflip: bool
    vflip: bool
    rot_k: int
    blur: bool
    blur_seed: int

    @property
    def transform(self) -> Dihedral:
        t = IDENTITY
        if self.hflip:
            t = HFLIP.compose(t)
        if self.vflip:
            t = VFLIP.compose(t)
        return Dihedral(self.rot_k, False).compose(t)


def sample_augment_plan(rng: np.random.Generator) -> AugmentPlan:
    return AugmentPlan(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        rot_k=int(rng.integers(0, 4)),
        blur=bool(rng.random() < 0.5),
        blur_seed=int(rng.integers(0, 2**31)),
    )


def apply_augment_plan(p: Patch, plan: AugmentPlan, blur_sigma: float = 0.02) -> Patch:
    transform = plan.transform
    img = remap(p.image, transform)
    lab = LabelMask(
        width=p.label.width,
        height=p.label.height,
        labels=transform.apply(p.label.labels),
        n_classes=p.label.n_classes,
    )
    wgt = WeightMap(width=p.weight.width, height=p.weight.height, w=transform.apply(p.weight.w))
    if plan.blur and blur_sigma > 0:
        img = color_blur(img, blur_sigma, seed=plan.blur_seed)
    return Patch(image=img, label=lab, weight=wgt, origin=p.origin)


def augment(p: Patch, seed: int, blur_sigma: float = 0.02) -> Patch:
    """Randomly flip/rotate/jitter a patch, deterministically for a seed.

    Geometric transforms apply identically to image, label, and weight
    crops; the photometric jitter touches only the image.
    """
    plan = sample_augment_plan(np.random.default_rng(seed))
    return apply_augment_plan(p, plan, blur_sigma)
