"""Watershed region proposals: sort pixels by level, then flood with a FIFO queue.

The gradient magnitude of a blurred image turns edges into ridges and
uniform areas into valleys; flooding the valleys yields candidate regions
so sliding-window inference can skip empty ground.

Flooding semantics, per quantized level h from low to high:

1. Pixels at level h are reached by a breadth-first wave expansion from
   everything labeled at lower levels (basins and watershed lines alike).
2. A pixel reached at wave d looks at the basin labels of its qualifying
   neighbors (pre-level labels at wave 1, wave d-1 assignments after):
   exactly one distinct basin -> it joins that basin; two or more -> it
   becomes watershed line (label 0); none (only watershed-line neighbors)
   -> it also becomes watershed line.
3. Level-h plateaus the wave never reaches touch no lower pixel, so they
   are exactly the regional minima; each becomes a fresh basin, numbered
   in raster-scan order.

The outcome is independent of intra-wave processing order; pixels are
still enqueued in raster-scan order so any future tie-break change stays
deterministic.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .raster import Raster
from .weightmap import neighbor_offsets

_INIT = -2
_MASK = -1
_WSHED = 0


@dataclass
class BasinLabels:
    """Per-pixel basin ids (0 = watershed line, 1..n_basins = basins)."""

    width: int
    height: int
    labels: np.ndarray
    n_basins: int

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int32)
        if self.labels.shape != (self.height, self.width):
            raise ValueError("basin label shape mismatch")


@dataclass(frozen=True)
class RegionProposal:
    """Axis-aligned bbox (x, y, w, h) around one basin."""

    bbox: tuple[int, int, int, int]
    basin_id: int
    area: int


def gaussian_blur(r: Raster, sigma: float) -> Raster:
    """Separable Gaussian filter, kernel radius ceil(3*sigma), edge-clamped."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return Raster(
            width=r.width, height=r.height, channels=r.channels, data=r.data.copy(), pixel_size_m=r.pixel_size_m
        )
    radius = math.ceil(3 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2 * sigma**2))
    kernel /= kernel.sum()

    data = r.data.astype(np.float64)
    padded = np.pad(data, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    rows = np.zeros_like(data)
    for i, kv in enumerate(kernel):
        rows += kv * padded[:, i : i + r.height, :]
    padded = np.pad(rows, ((0, 0), (0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(data)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, :, i : i + r.width]
    return Raster(
        width=r.width,
        height=r.height,
        channels=r.channels,
        data=out.astype(np.float32),
        pixel_size_m=r.pixel_size_m,
    )


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def gradient_magnitude(r: Raster) -> Raster:
    """Sobel magnitude of the channel-mean image, edge-clamped.

    Output values are raw magnitudes (not rescaled to [0, 1]).
    """
    gray = r.mean_channel()
    padded = np.pad(gray, 1, mode="edge")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for di in range(3):
        for dj in range(3):
            window = padded[di : di + r.height, dj : dj + r.width]
            gx += _SOBEL_X[di, dj] * window
            gy += _SOBEL_Y[di, dj] * window
    mag = np.sqrt(gx**2 + gy**2)
    return Raster(
        width=r.width, height=r.height, channels=1, data=mag[None].astype(np.float32), pixel_size_m=r.pixel_size_m
    )


def quantize_levels(values: np.ndarray, n_levels: int = 256) -> np.ndarray:
    """Min-max scale to integer levels 0..n_levels-1 (constant input -> all 0)."""
    vmin = float(values.min())
    vmax = float(values.max())
    if vmax <= vmin:
        return np.zeros(values.shape, dtype=np.int32)
    scaled = (values.astype(np.float64) - vmin) / (vmax - vmin) * (n_levels - 1)
    return np.rint(scaled).astype(np.int32)


def vincent_watershed(g: Raster, connectivity: int = 4) -> BasinLabels:
    """Flood the quantized gradient image; see the module docstring for the
    exact wave semantics."""
    if g.channels != 1:
        raise ValueError("watershed input must be single-channel (reduce with mean first)")
    offsets = neighbor_offsets(connectivity)
    levels = quantize_levels(g.data[0])
    h, w = levels.shape
    labels = np.full((h, w), _INIT, dtype=np.int32)
    wave = np.zeros((h, w), dtype=np.int32)
    n_basins = 0

    order = np.argsort(levels.ravel(), kind="stable")
    flat_levels = levels.ravel()
    start = 0
    while start < order.size:
        level = flat_levels[order[start]]
        stop = start
        while stop < order.size and flat_levels[order[stop]] == level:
            stop += 1
        pixels = [(int(i) // w, int(i) % w) for i in order[start:stop]]
        start = stop

        queue: deque[tuple[int, int]] = deque()
        for y, x in pixels:
            labels[y, x] = _MASK
            wave[y, x] = 0
        for y, x in pixels:
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] >= 0:
                    wave[y, x] = 1
                    queue.append((y, x))
                    break

        while queue:
            y, x = queue.popleft()
            d = wave[y, x]
            basins: set[int] = set()
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w):
                    continue
                lab = labels[ny, nx]
                if lab < 1:
                    continue
                if levels[ny, nx] != level:
                    if d == 1:
                        basins.add(int(lab))
                elif wave[ny, nx] == d - 1 and d > 1:
                    basins.add(int(lab))
            labels[y, x] = basins.pop() if len(basins) == 1 else _WSHED
            for dy, dx in offsets:
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] == _MASK and wave[ny, nx] == 0:
                    wave[ny, nx] = d + 1
                    queue.append((ny, nx))

        for y, x in pixels:
            if labels[y, x] != _MASK:
                continue
            n_basins += 1
            labels[y, x] = n_basins
            fill = deque([(y, x)])
            while fill:
                fy, fx = fill.popleft()
                for dy, dx in offsets:
                    ny, nx = fy + dy, fx + dx
                    if 0 <= ny < h and 0 <= nx < w and labels[ny, nx] == _MASK:
                        labels[ny, nx] = n_basins
                        fill.append((ny, nx))

    return BasinLabels(width=w, height=h, labels=labels, n_basins=n_basins)


def propose_regions(img: Raster, blur_sigma: float = 2.0, min_area: int = 0, connectivity: int = 4) -> list[RegionProposal]:
    """Blur, take the gradient, flood, and emit per-basin bounding boxes
    (area-filtered, largest first)."""
    gray = Raster(width=img.width, height=img.height, channels=1, data=img.mean_channel()[None].astype(np.float32),
                  pixel_size_m=img.pixel_size_m)
    blurred = gaussian_blur(gray, blur_sigma)
    grad = gradient_magnitude(blurred)
    basins = vincent_watershed(grad, connectivity)

    proposals = []
    for basin_id in range(1, basins.n_basins + 1):
        ys, xs = np.nonzero(basins.labels == basin_id)
        if ys.size == 0:
            continue
        area = int(ys.size)
        if area < min_area:
            continue
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        proposals.append(RegionProposal(bbox=(x0, y0, x1 - x0 + 1, y1 - y0 + 1), basin_id=basin_id, area=area))
    proposals.sort(key=lambda p: (-p.area, p.basin_id))
    return proposals
