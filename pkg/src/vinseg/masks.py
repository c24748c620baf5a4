"""Label-map algebra: components, boundaries, disk erosion, flips, tiling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

FLIP_MODES = ("none", "h", "v", "hv")

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def connected_components(mask: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Label maximal foreground regions 1..K in row-major first-encounter order."""
    if connectivity not in _STRUCTURE:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, k = ndimage.label(mask > 0, structure=_STRUCTURE[connectivity])
    if k == 0:
        return labels.astype(np.int32)
    return relabel_first_encounter(labels)


def relabel_first_encounter(labels: np.ndarray) -> np.ndarray:
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first, kind="stable")]
    lut = np.zeros(int(flat.max()) + 1, dtype=np.int32)
    lut[order] = np.arange(1, order.size + 1, dtype=np.int32)
    return lut[labels]


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Map ids to 0..K preserving their sorted order (0 stays background)."""
    labels = np.asarray(labels)
    if labels.size and labels.min() < 0:
        raise ValueError("instance ids must be non-negative")
    ids = np.unique(labels)
    ids = ids[ids != 0]
    out = np.zeros(labels.shape, dtype=np.int32)
    if ids.size:
        out[labels != 0] = np.searchsorted(ids, labels[labels != 0]) + 1
    return out


def num_instances(labels: np.ndarray) -> int:
    ids = np.unique(labels)
    return int((ids != 0).sum())


def _neighbor_views(padded: np.ndarray, h: int, w: int, radius: int = 1):
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy or dx:
                yield padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]


def instance_boundaries(labels: np.ndarray, dilate_r: int = 0) -> np.ndarray:
    """Foreground pixels with an 8-neighbour of a different id (border = 0).

    ``dilate_r`` thickens the result by a Chebyshev (square) dilation.
    """
    labels = np.asarray(labels)
    if dilate_r < 0:
        raise ValueError("dilate_r must be non-negative")
    h, w = labels.shape
    padded = np.pad(labels, 1, constant_values=0)
    edge = np.zeros((h, w), dtype=bool)
    for view in _neighbor_views(padded, h, w):
        edge |= view != labels
    edge &= labels > 0
    if dilate_r:
        edge = ndimage.maximum_filter(edge, size=2 * dilate_r + 1, mode="constant", cval=0)
    return edge.astype(np.uint8)


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    """Offsets (dy, dx) with dy^2 + dx^2 <= radius^2, row-major."""
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def erode_instances(labels: np.ndarray, radius: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Per-instance erosion by a closed disk, plus the pixels to ignore.

    A foreground pixel survives iff every disk offset stays inside the image on
    the same id. Ignored pixels are eroded-away foreground and background
    within the disk of any instance. Surviving pixels keep their ids.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    labels = np.asarray(labels)
    h, w = labels.shape
    fg = labels > 0
    if radius == 0:
        return labels.copy(), np.zeros((h, w), dtype=bool)
    padded = np.pad(labels, radius, constant_values=-1)
    survive = fg.copy()
    near_fg = np.zeros((h, w), dtype=bool)
    for dy, dx in disk_offsets(radius):
        view = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
        survive &= view == labels
        near_fg |= view > 0
    eroded = np.where(survive, labels, 0).astype(labels.dtype)
    ignore = (fg & ~survive) | (~fg & near_fg)
    return eroded, ignore


@dataclass
class Sample:
    """Extent-aligned image and instance map; y and b are derived on demand."""

    image: np.ndarray  # (h, w, 3) uint8
    labels: np.ndarray  # (h, w) int32, 0 = background
    boundary_dilate: int = 0

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape:
            raise ValueError(f"image {self.image.shape[:2]} and labels {self.labels.shape} are not aligned")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def seg(self) -> np.ndarray:
        return (self.labels > 0).astype(np.uint8)

    @property
    def boundary(self) -> np.ndarray:
        return instance_boundaries(self.labels, self.boundary_dilate)

    @property
    def count(self) -> int:
        return num_instances(self.labels)


def flip_array(arr: np.ndarray, mode: str) -> np.ndarray:
    if mode not in FLIP_MODES:
        raise ValueError(f"flip mode must be one of {FLIP_MODES}, got {mode!r}")
    if "h" in mode:
        arr = arr[:, ::-1]
    if "v" in mode:
        arr = arr[::-1]
    return np.ascontiguousarray(arr)


def flip_augment(sample: Sample, mode: str) -> Sample:
    """Apply the same flip to the image and the instance map (hence y and b)."""
    return Sample(flip_array(sample.image, mode), flip_array(sample.labels, mode), sample.boundary_dilate)


def expand_with_flips(samples: list, modes=FLIP_MODES) -> list:
    return [flip_augment(s, m) for s in samples for m in modes]


def tile_origins(h: int, w: int, size: int, stride: int) -> list[tuple[int, int]]:
    """Grid origins; the last row/column is clamped to end at the image edge."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride > size:
        raise ValueError(f"stride {stride} > tile size {size} would leave uncovered gaps")
    if size > h or size > w:
        raise ValueError(f"tile size {size} exceeds image {h}x{w}")

    def axis(n):
        starts = list(range(0, n - size + 1, stride))
        if starts[-1] != n - size:
            starts.append(n - size)
        return starts

    return [(y, x) for y in axis(h) for x in axis(w)]


def tile(sample: Sample, size: int = 256, stride: Optional[int] = None) -> list[tuple[tuple[int, int], Sample]]:
    stride = size if stride is None else stride
    h, w = sample.shape
    out = []
    for y, x in tile_origins(h, w, size, stride):
        out.append(((y, x), Sample(
            sample.image[y:y + size, x:x + size].copy(),
            sample.labels[y:y + size, x:x + size].copy(),
            sample.boundary_dilate,
        )))
    return out
