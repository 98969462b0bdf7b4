"""Per-lane binary masks: polyline rasterization and nearest-neighbor resize.

A lane mask is a 2-D ``uint8`` array with entries in ``{0, 1}``. Masks are
kept one per lane (the lane index is the position in the list), never
merged into a multi-class label image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ParameterError, ShapeError


@dataclass(frozen=True)
class Polyline:
    """Lane centerline in full-resolution ``(row, col)`` image coordinates."""

    points: tuple[tuple[float, float], ...]
    thickness: int = 1

    def __post_init__(self):
        pts = tuple((float(r), float(c)) for r, c in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ParameterError(f"polyline needs at least 2 points, got {len(pts)}")
        for (r0, _), (r1, _) in zip(pts, pts[1:]):
            if not r1 > r0:
                raise ParameterError(f"polyline rows must be strictly increasing, got {r0} then {r1}")
        if int(self.thickness) < 1:
            raise ParameterError(f"thickness must be >= 1, got {self.thickness}")
        object.__setattr__(self, "thickness", int(self.thickness))

    def with_thickness(self, thickness: int) -> "Polyline":
        return Polyline(self.points, thickness)

    def col_at(self, row: float):
        """Linearly interpolated column at ``row``, or None outside the row span."""
        rows = [p[0] for p in self.points]
        if row < rows[0] or row > rows[-1]:
            return None
        cols = [p[1] for p in self.points]
        return float(np.interp(row, rows, cols))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer pixels on the segment from ``(r0, c0)`` to ``(r1, c1)``.

    One pixel per step along the major axis; at an exact half-pixel tie
    the minor coordinate advances (decision variable ``d >= 0``).
    """
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r1 > r0 else -1
    sc = 1 if c1 > c0 else -1
    steep = dr > dc
    # walk along the major axis "x" and step the minor axis "y"
    x, y, sx, sy, dx, dy = (r0, c0, sr, sc, dr, dc) if steep else (c0, r0, sc, sr, dc, dr)
    d = 2 * dy - dx
    pixels = []
    for _ in range(dx):
        pixels.append((x, y) if steep else (y, x))
        while d >= 0:
            y += sy
            d -= 2 * dx
        x += sx
        d += 2 * dy
    pixels.append((r1, c1))
    return pixels


def footprint_offsets(thickness: int) -> range:
    """Square structuring-element offsets; the side length equals ``thickness``.

    Odd thickness is centered; even thickness extends one extra pixel
    toward larger indices.
    """
    return range(-((thickness - 1) // 2), thickness // 2 + 1)


def rasterize_polyline(line: Polyline, height: int, width: int) -> np.ndarray:
    """Draw ``line`` into a ``height x width`` binary mask.

    Each segment is traced with Bresenham between rounded endpoints, then
    dilated by a ``thickness x thickness`` square. Pixels outside the image
    are dropped.
    """
    if height < 1 or width < 1:
        raise ParameterError(f"mask size must be positive, got {height}x{width}")
    mask = np.zeros((height, width), dtype=np.uint8)
    pts = [(_round_half_up(r), _round_half_up(c)) for r, c in line.points]
    trace = set()
    for (r0, c0), (r1, c1) in zip(pts, pts[1:]):
        trace.update(bresenham(r0, c0, r1, c1))
    if not trace:
        return mask
    rc = np.array(sorted(trace), dtype=np.int64)
    offs = footprint_offsets(line.thickness)
    for dr in offs:
        for dc in offs:
            rr = rc[:, 0] + dr
            cc = rc[:, 1] + dc
            keep = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
            mask[rr[keep], cc[keep]] = 1
    return mask


def resize_nearest(mask, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbor resize of a binary mask.

    Destination ``(i, j)`` reads source ``(floor(i*H/new_h), floor(j*W/new_w))``,
    clamped to the source bounds. Integer arithmetic, so the mapping is exact.
    """
    src = np.asarray(mask)
    if src.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {src.shape}")
    if new_h < 1 or new_w < 1:
        raise ParameterError(f"target size must be positive, got {new_h}x{new_w}")
    h, w = src.shape
    rows = np.minimum(np.arange(new_h) * h // new_h, h - 1)
    cols = np.minimum(np.arange(new_w) * w // new_w, w - 1)
    return src[np.ix_(rows, cols)].copy()


def mask_is_empty(mask) -> bool:
    return not np.any(np.asarray(mask))
