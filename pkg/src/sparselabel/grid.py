"""Dense pixel grids, patch extraction, rescaling, and image I/O.

An image grid is a numpy float64 array of shape ``(height, width, channels)``,
row-major with the channel axis last.  Images load as reals in [0, 1]; label
maps are {0, 1} indicators, one channel per class.  Patch columns flatten an
``m x m x c`` window in ``(dy, dx, channel)`` row-major order, so a window
reshape round-trips exactly.

Patches that overlap the image border replicate the edge pixels
(clamp-to-border).  ``insert_patch`` is the exact adjoint of that clamped
read: out-of-bounds slots accumulate onto the clamped border pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image


class GridError(ValueError):
    """Raised for malformed grids, geometry mismatches, or bad arguments."""


@dataclass(frozen=True)
class PatchGeometry:
    """Square patch shape: odd side ``m`` and channel count ``c``."""

    side: int
    channels: int

    def __post_init__(self):
        if self.side < 1 or self.side % 2 == 0:
            raise GridError(f"patch side must be odd and >= 1, got {self.side}")
        if self.channels < 1:
            raise GridError(f"channels must be >= 1, got {self.channels}")

    @property
    def dim(self) -> int:
        return self.side * self.side * self.channels

    @property
    def radius(self) -> int:
        return self.side // 2


@dataclass
class PatchMatrix:
    """A bank of patch columns, one length ``m*m*c`` column per patch.

    ``origins`` optionally records ``(image_id, x, y)`` provenance per column.
    """

    geometry: PatchGeometry
    columns: np.ndarray
    origins: list[tuple[int, int, int]] | None = field(default=None)

    def __post_init__(self):
        self.columns = np.ascontiguousarray(self.columns, dtype=np.float64)
        if self.columns.ndim != 2 or self.columns.shape[0] != self.geometry.dim:
            raise GridError(
                f"columns must be ({self.geometry.dim}, n), got {self.columns.shape}"
            )
        if self.origins is not None and len(self.origins) != self.columns.shape[1]:
            raise GridError("origins length must match column count")

    @property
    def count(self) -> int:
        return self.columns.shape[1]


def as_grid(data, channels: int | None = None) -> np.ndarray:
    """Validate and return ``data`` as a float64 ``(h, w, c)`` grid.

    2-D input is promoted to a single channel.  Rejects NaN/Inf values and,
    when ``channels`` is given, any other channel count.
    """
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise GridError(f"grid must be 2-D or 3-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise GridError(f"grid dimensions must be >= 1, got {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise GridError(f"expected {channels} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise GridError("grid contains non-finite values")
    return arr


def extract_patch(img: np.ndarray, center: tuple[int, int], geom: PatchGeometry) -> np.ndarray:
    """Copy the ``m x m`` window centered at ``(x, y)`` into a flat column.

    Window positions outside the grid replicate the nearest edge pixel.
    """
    img = as_grid(img, channels=geom.channels)
    h, w = img.shape[:2]
    x, y = center
    if not (0 <= x < w and 0 <= y < h):
        raise GridError(f"center out of bounds: ({x}, {y}) for {w}x{h} grid")
    r = geom.radius
    ys = np.clip(np.arange(y - r, y + r + 1), 0, h - 1)
    xs = np.clip(np.arange(x - r, x + r + 1), 0, w - 1)
    return img[np.ix_(ys, xs)].reshape(-1)


def insert_patch(img: np.ndarray, center: tuple[int, int], patch: np.ndarray,
                 geom: PatchGeometry) -> np.ndarray:
    """Add a patch column into ``img`` at ``center`` (adjoint of extraction).

    Slots whose window position falls outside the grid are accumulated onto
    the clamped border pixel, mirroring the replicated read.  Mutates and
    returns ``img``.
    """
    img = as_grid(img, channels=geom.channels)
    h, w = img.shape[:2]
    x, y = center
    if not (0 <= x < w and 0 <= y < h):
        raise GridError(f"center out of bounds: ({x}, {y}) for {w}x{h} grid")
    r = geom.radius
    block = np.asarray(patch, dtype=np.float64).reshape(geom.side, geom.side, geom.channels)
    ys = np.clip(np.arange(y - r, y + r + 1), 0, h - 1)
    xs = np.clip(np.arange(x - r, x + r + 1), 0, w - 1)
    # clamped targets can repeat, so scatter with np.add.at semantics
    for dy in range(geom.side):
        np.add.at(img, (ys[dy], xs), block[dy])
    return img


def extract_all_patches(img: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Extract the centered patch of every pixel as a ``(dim, h*w)`` matrix.

    Column order is row-major over pixels (y outer, x inner).  Equivalent to
    calling :func:`extract_patch` per pixel, but vectorized.
    """
    img = as_grid(img, channels=geom.channels)
    h, w, c = img.shape
    r = geom.radius
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (geom.side, geom.side), axis=(0, 1))
    # win: (h, w, c, m, m) -> columns in (dy, dx, channel) order
    cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, geom.dim)
    return np.ascontiguousarray(cols.T)


def zero_mean_patch(patch: np.ndarray, geom: PatchGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the per-channel mean from a patch column.

    Returns ``(centered, means)`` where adding ``means`` back channel-wise
    reproduces the input.
    """
    col = np.asarray(patch, dtype=np.float64).reshape(geom.side * geom.side, geom.channels)
    means = col.mean(axis=0)
    return (col - means).reshape(-1), means


def zero_mean_columns(columns: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Per-channel mean removal applied to every column of a patch matrix."""
    cols = np.asarray(columns, dtype=np.float64)
    stacked = cols.reshape(geom.side * geom.side, geom.channels, -1)
    return (stacked - stacked.mean(axis=0, keepdims=True)).reshape(cols.shape)


def rescale(img: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear downscale by ``factor`` in (0, 1].

    Output dims are ``round(dim * factor)`` (at least 1).  Output pixel
    centers sample the input at ``(i + 0.5) / out * in - 0.5``, which is the
    identity for factor 1 and exact on constant images.
    """
    img = as_grid(img)
    if not factor > 0:
        raise GridError(f"rescale factor must be positive, got {factor}")
    if factor > 1:
        raise GridError(f"rescale only shrinks; factor {factor} > 1")
    h, w = img.shape[:2]
    oh = max(1, int(np.floor(h * factor + 0.5)))
    ow = max(1, int(np.floor(w * factor + 0.5)))
    if (oh, ow) == (h, w):
        return img.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    # all sample points are interior when shrinking, but guard the reshape case
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def upsample_nearest(grid: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Nearest-neighbor replication onto a target grid of equal or larger size.

    Target pixel ``(x, y)`` copies source pixel
    ``(floor(x * w / target_w), floor(y * h / target_h))``.
    """
    grid = as_grid(grid)
    h, w = grid.shape[:2]
    if target_w < w or target_h < h:
        raise GridError(f"target {target_w}x{target_h} smaller than source {w}x{h}")
    ys = (np.arange(target_h) * h) // target_h
    xs = (np.arange(target_w) * w) // target_w
    return grid[np.ix_(ys, xs)]


def upsample_map_index(src_len: int, dst_len: int) -> np.ndarray:
    """Index map used by nearest-neighbor upsampling along one axis."""
    return (np.arange(dst_len) * src_len) // dst_len


def patch_cover_counts(h: int, w: int, side: int) -> np.ndarray:
    """Number of in-grid patch centers whose ``side`` window covers each pixel.

    Equals ``side**2`` in the interior and shrinks toward corners; used to
    normalize overlapping patch superpositions.
    """
    r = side // 2
    iy = np.arange(h)
    ix = np.arange(w)
    cy = np.minimum(iy + r, h - 1) - np.maximum(iy - r, 0) + 1
    cx = np.minimum(ix + r, w - 1) - np.maximum(ix - r, 0) + 1
    return cy[:, None] * cx[None, :]


# ---------------------------------------------------------------------------
# image file I/O


def read_image(path) -> np.ndarray:
    """Load a PNG/PGM/PPM image as an (h, w, c) grid with values in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("1", "I", "I;16", "F"):
            im = im.convert("L")
        elif im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_grid(arr)


def write_image(path, img: np.ndarray) -> None:
    """Write a grid as an 8-bit PNG after linear scaling to [0, 255].

    Values are clipped to [0, 1] first; single-channel grids write grayscale.
    """
    img = as_grid(img)
    arr = np.clip(img, 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.shape[2] == 1:
        Image.fromarray(data[:, :, 0], mode="L").save(path)
    elif data.shape[2] == 3:
        Image.fromarray(data, mode="RGB").save(path)
    else:
        raise GridError(f"PNG output supports 1 or 3 channels, got {data.shape[2]}")


def read_label_map(path, channels: int) -> np.ndarray:
    """Load a ground-truth label map as {0, 1} indicators, one channel per class.

    Paletted (or grayscale) files are read as class indices: pixel value k
    sets channel k.  RGB files are read channel-split: each color channel is
    its own indicator, thresholded at 0.5.
    """
    with Image.open(path) as im:
        if im.mode == "P" or (im.mode == "L" and channels > 1):
            idx = np.asarray(im if im.mode == "P" else im, dtype=np.int64)
            if idx.max() >= channels:
                raise GridError(
                    f"label index {idx.max()} exceeds channel count {channels}"
                )
            out = np.zeros(idx.shape + (channels,), dtype=np.float64)
            for k in range(channels):
                out[:, :, k] = idx == k
            return out
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L",) else im,
                         dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] < channels:
        raise GridError(f"label map has {arr.shape[2]} channels, need {channels}")
    return (arr[:, :, :channels] > 0.5).astype(np.float64)
