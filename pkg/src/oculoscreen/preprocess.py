"""Eye-region detection, crop normalization, and sector-grid partitioning.

The detector is deliberately modest: production data ships bounding boxes in
the manifest, and the heuristic (horizontal-gradient plus redness saliency)
only has to cope with plain eye photos such as the synthetic corpus.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .capture_protocol import GazeAngle
from .errors import DegenerateBoxError, NoEyeFoundError

# Normalized crop geometry; eye regions are wide, so W > H.
DEFAULT_CROP_H = 32
DEFAULT_CROP_W = 64
DEFAULT_CELL_SIZE = 16


class EyeSide(Enum):
    LEFT_EYE = "LEFT_EYE"
    RIGHT_EYE = "RIGHT_EYE"


@dataclass(frozen=True)
class BoundingBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("bounding box must have positive extent")

    def clip(self, width: int, height: int) -> "BoundingBox | None":
        """Intersect with an image of the given size; None if empty."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, width), min(self.y + self.h, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


class GridMode(Enum):
    RECT = "RECT"
    SECTOR = "SECTOR"


@dataclass(frozen=True)
class GridSpec:
    mode: GridMode = GridMode.RECT
    rows: int = 2
    cols: int = 4
    n_sectors: int = 8

    def __post_init__(self):
        if self.mode is GridMode.RECT and (self.rows < 1 or self.cols < 1):
            raise ValueError("RECT grid needs rows >= 1 and cols >= 1")
        if self.mode is GridMode.SECTOR and self.n_sectors < 1:
            raise ValueError("SECTOR grid needs n_sectors >= 1")

    @property
    def g(self) -> int:
        if self.mode is GridMode.RECT:
            return self.rows * self.cols
        return self.n_sectors

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "rows": self.rows,
            "cols": self.cols,
            "n_sectors": self.n_sectors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            mode=GridMode(d.get("mode", "RECT")),
            rows=int(d.get("rows", 2)),
            cols=int(d.get("cols", 4)),
            n_sectors=int(d.get("n_sectors", 8)),
        )


@dataclass
class EyeCrop:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    source_box: BoundingBox
    side: EyeSide | None = None
    angle: GazeAngle | None = None


@dataclass
class SectorGrid:
    cells: np.ndarray  # (G, cell, cell, 3) float32
    spec: GridSpec
    provenance: EyeCrop | None = None


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers.

    Same-size input is returned bit-identically (sample points land exactly
    on the source grid).
    """
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if h == out_h and w == out_w:
        out = img.copy()
        return out[:, :, 0] if squeeze else out
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    top = tl + (tr - tl) * fx
    bot = bl + (br - bl) * fx
    out = (top + (bot - top) * fy).astype(img.dtype, copy=False)
    return out[:, :, 0] if squeeze else out


def _box_blur(a: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter with a (2r+1)^2 window via an integral image."""
    h, w = a.shape
    pad = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(a, axis=0), axis=1, out=pad[1:, 1:])
    y0 = np.clip(np.arange(h) - radius, 0, h)
    y1 = np.clip(np.arange(h) + radius + 1, 0, h)
    x0 = np.clip(np.arange(w) - radius, 0, w)
    x1 = np.clip(np.arange(w) + radius + 1, 0, w)
    area = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    s = pad[np.ix_(y1, x1)] - pad[np.ix_(y0, x1)] - pad[np.ix_(y1, x0)] + pad[np.ix_(y0, x0)]
    return s / area


def _runs(flags: np.ndarray, max_gap: int) -> list[tuple[int, int]]:
    """Contiguous True runs (start, end exclusive), merging gaps <= max_gap."""
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return []
    runs = []
    start = prev = int(idx[0])
    for i in idx[1:]:
        i = int(i)
        if i - prev - 1 > max_gap:
            runs.append((start, prev + 1))
            start = i
        prev = i
    runs.append((start, prev + 1))
    return runs


def detect_eyes(
    image: np.ndarray,
    hints: list | None = None,
    *,
    min_peak: float = 0.02,
) -> list[tuple[BoundingBox, EyeSide]]:
    """Locate up to two eye regions in a decoded image.

    With ``hints`` (boxes, or (box, side) pairs, e.g. from a manifest), each
    hint is clipped to the image and passed through. Without hints a
    horizontal-gradient + redness saliency scan proposes boxes; a flat image
    yields NO_EYE_FOUND. Sides are assigned by horizontal position when the
    hint does not carry one.
    """
    height, width = image.shape[:2]

    if hints is not None:
        out: list[tuple[BoundingBox, EyeSide]] = []
        for hint in hints:
            if isinstance(hint, BoundingBox):
                box, side = hint, None
            else:
                box, side = hint
            clipped = box.clip(width, height)
            if clipped is None:
                continue
            out.append((clipped, side))
        return _assign_sides(out, width)

    # Denoise before differentiating so pixel noise stays below the gates.
    luma = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    luma_s = _box_blur(luma, 2)
    hgrad = np.zeros_like(luma_s)
    hgrad[:, 1:] = np.abs(np.diff(luma_s, axis=1))
    redness = np.clip(image[..., 0] - 0.5 * (image[..., 1] + image[..., 2]), 0.0, 1.0)
    saliency = hgrad + 0.5 * _box_blur(redness, 2)

    # Saliency relative to the background floor, not the raw maximum.
    floor = float(np.median(saliency))
    peak = float(saliency.max()) - floor
    if peak < min_peak:
        raise NoEyeFoundError("saliency scan found no plausible eye region")

    # Squaring the excess keeps residual noise mass from inflating the box.
    excess = np.maximum(saliency - floor, 0.0) ** 2
    col_mass = excess.mean(axis=0)
    active = col_mass > 0.10 * col_mass.max()
    col_runs = [
        r for r in _runs(active, max_gap=max(1, width // 6)) if r[1] - r[0] >= width // 12
    ]
    col_runs.sort(key=lambda r: r[1] - r[0], reverse=True)
    if not col_runs:
        col_runs = [(0, width)]

    boxes: list[tuple[BoundingBox, EyeSide | None]] = []
    for cx0, cx1 in col_runs[:2]:
        region = excess[:, cx0:cx1]
        x0, x1 = _mass_span(region.mean(axis=0), k=2.4)
        y0, y1 = _mass_span(region.mean(axis=1), k=2.2)
        try:
            box = BoundingBox(cx0 + x0, y0, x1 - x0, y1 - y0)
        except ValueError:
            continue
        clipped = box.clip(width, height)
        if clipped is not None:
            boxes.append((clipped, None))
    if not boxes:
        raise NoEyeFoundError("saliency scan found no plausible eye region")
    boxes.sort(key=lambda b: b[0].x)
    return _assign_sides(boxes, width)


def _mass_span(mass: np.ndarray, k: float) -> tuple[int, int]:
    """Centroid +/- k standard deviations of a 1-d mass profile."""
    n = len(mass)
    total = float(mass.sum())
    if total <= 0.0:
        return 0, n
    xs = np.arange(n, dtype=np.float64)
    center = float((xs * mass).sum()) / total
    spread = float(np.sqrt(((xs - center) ** 2 * mass).sum() / total))
    lo = int(max(0, np.floor(center - k * spread)))
    hi = int(min(n, np.ceil(center + k * spread)))
    return lo, max(hi, lo + 1)


def _assign_sides(
    boxes: list[tuple[BoundingBox, EyeSide | None]], width: int
) -> list[tuple[BoundingBox, EyeSide]]:
    if len(boxes) == 2 and all(side is None for _, side in boxes):
        ordered = sorted(boxes, key=lambda b: b[0].x)
        return [(ordered[0][0], EyeSide.LEFT_EYE), (ordered[1][0], EyeSide.RIGHT_EYE)]
    out = []
    for box, side in boxes:
        if side is None:
            center = box.x + box.w / 2.0
            side = EyeSide.LEFT_EYE if center <= width / 2.0 else EyeSide.RIGHT_EYE
        elif isinstance(side, str):
            side = EyeSide(side)
        out.append((box, side))
    return out


def crop_normalize(
    image: np.ndarray,
    box: BoundingBox,
    *,
    out_h: int = DEFAULT_CROP_H,
    out_w: int = DEFAULT_CROP_W,
    side: EyeSide | None = None,
    angle: GazeAngle | None = None,
) -> EyeCrop:
    """Cut the box out of the image and resample it to the normalized size.

    Values stay in [0, 1]; bilinear interpolation is fixed so crops are
    comparable across runs and machines.
    """
    if box.w < 2 or box.h < 2:
        raise DegenerateBoxError(f"box {box.w}x{box.h} is below the 2 px minimum")
    height, width = image.shape[:2]
    if box.x < 0 or box.y < 0 or box.x + box.w > width or box.y + box.h > height:
        raise ValueError("box extends outside the image; clip it first")
    region = image[box.y : box.y + box.h, box.x : box.x + box.w]
    region = np.clip(region.astype(np.float32, copy=False), 0.0, 1.0)
    pixels = bilinear_resize(region, out_h, out_w)
    return EyeCrop(pixels=pixels, source_box=box, side=side, angle=angle)


def grid_masks(spec: GridSpec, height: int, width: int) -> np.ndarray:
    """Boolean (G, H, W) masks assigning every pixel to exactly one cell.

    RECT tiles the crop into rows x cols rectangles whose edge cells absorb
    remainder pixels. SECTOR assigns pixels to equal angular wedges about the
    crop center, counter-clockwise from the positive x-axis (y up).
    """
    if spec.mode is GridMode.RECT:
        masks = np.zeros((spec.g, height, width), dtype=bool)
        row_edges = [(height // spec.rows) * i for i in range(spec.rows)] + [height]
        col_edges = [(width // spec.cols) * i for i in range(spec.cols)] + [width]
        g = 0
        for r in range(spec.rows):
            for c in range(spec.cols):
                masks[g, row_edges[r] : row_edges[r + 1], col_edges[c] : col_edges[c + 1]] = True
                g += 1
        return masks

    n = spec.n_sectors
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width]
    # Image rows grow downward; flip so angles run counter-clockwise.
    ang = np.arctan2(cy - yy, xx - cx)
    ang = np.mod(ang, 2.0 * np.pi)
    idx = np.minimum((ang * n / (2.0 * np.pi)).astype(np.intp), n - 1)
    return idx[None, :, :] == np.arange(n)[:, None, None]


def partition_grid(
    crop: EyeCrop, spec: GridSpec, *, cell_size: int = DEFAULT_CELL_SIZE
) -> SectorGrid:
    """Split a normalized crop into G cell images of a fixed size.

    RECT cells are the tile rectangles resampled to cell_size. SECTOR cells
    are each wedge's bounding region with non-wedge pixels zeroed, then
    resampled. Cell order is row-major for RECT and counter-clockwise from
    the positive x-axis for SECTOR.
    """
    height, width = crop.pixels.shape[:2]
    masks = grid_masks(spec, height, width)
    cells = np.empty((spec.g, cell_size, cell_size, 3), dtype=np.float32)
    for g in range(spec.g):
        ys, xs = np.nonzero(masks[g])
        y0, y1 = int(ys.min()), int(ys.max()) + 1
        x0, x1 = int(xs.min()), int(xs.max()) + 1
        region = crop.pixels[y0:y1, x0:x1]
        if spec.mode is GridMode.SECTOR:
            region = region * masks[g, y0:y1, x0:x1, None]
        cells[g] = bilinear_resize(region.astype(np.float32, copy=False), cell_size, cell_size)
    return SectorGrid(cells=cells, spec=spec, provenance=crop)
