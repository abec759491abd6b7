"""Shared test apparatus: independent oracles and scripted stand-ins.

Everything here recomputes expected values through a different route
than the library code under test (explicit loops, pixel inspection,
brute-force enumeration) so agreement is evidence, not tautology.
"""

from __future__ import annotations

import numpy as np

from vischain.boxes import BBox
from vischain.synth import BACKGROUND, COLOR_VALUES, SampleRecord, glyph_mask


def pixel_rect(box: BBox, image_px: int) -> tuple[int, int, int, int]:
    return (
        round(box.x_min * image_px),
        round(box.y_min * image_px),
        round(box.x_max * image_px),
        round(box.y_max * image_px),
    )


def inspect_region(image: np.ndarray, box: BBox) -> tuple[str | None, str | None]:
    """Read (color, shape) of the glyph inside ``box`` straight from pixels.

    Returns (None, None) if the region holds no glyph or an ambiguous mix.
    """
    px = image.shape[0]
    x0, y0, x1, y1 = pixel_rect(box, px)
    region = image[y0:y1, x0:x1]
    lit = np.abs(region - BACKGROUND).max(axis=-1) > 1e-6
    if not lit.any():
        return None, None
    values = region[lit]
    if not (values == values[0]).all():
        return None, None
    color = None
    for name, rgb in COLOR_VALUES.items():
        if np.allclose(values[0], np.asarray(rgb, dtype=np.float32), atol=0):
            color = name
            break
    shape = None
    side = x1 - x0
    if side == y1 - y0:
        for candidate in ("square", "circle", "triangle", "cross"):
            if np.array_equal(lit, glyph_mask(candidate, side)):
                shape = candidate
                break
    return color, shape


def oracle_answer(image: np.ndarray, record: SampleRecord) -> str | None:
    """Answer the sample's question by inspecting pixels inside the gt box."""
    color, shape = inspect_region(image, record.gt_boxes[0])
    if record.template in ("color-of-shape", "color-at-relative-location"):
        return color
    if record.template == "shape-of-color":
        return shape
    raise ValueError(f"unknown template {record.template!r}")


def brute_force_cells(box: BBox, grid: int) -> list[tuple[int, int]]:
    """All grid cells whose open rectangle positively overlaps the box."""
    cells = []
    for i in range(grid):
        for j in range(grid):
            x0, y0, x1, y1 = j / grid, i / grid, (j + 1) / grid, (i + 1) / grid
            ix = min(x1, box.x_max) - max(x0, box.x_min)
            iy = min(y1, box.y_max) - max(y0, box.y_min)
            if ix > 0 and iy > 0:
                cells.append((i, j))
    return cells


def bilinear_reference(grid: np.ndarray, out_side: int) -> np.ndarray:
    """Explicit-loop bilinear resize of (S, S, C) to (out, out, C).

    Half-pixel sampling convention, border clamp, lerp accumulation.
    """
    src = grid.shape[0]
    out = np.zeros((out_side, out_side, grid.shape[2]), dtype=grid.dtype)
    for r in range(out_side):
        for c in range(out_side):
            sy = min(max((r + 0.5) * src / out_side - 0.5, 0.0), src - 1.0)
            sx = min(max((c + 0.5) * src / out_side - 0.5, 0.0), src - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, src - 1), min(x0 + 1, src - 1)
            wy, wx = sy - y0, sx - x0
            top = grid[y0, x0] + wx * (grid[y0, x1] - grid[y0, x0])
            bot = grid[y1, x0] + wx * (grid[y1, x1] - grid[y1, x0])
            out[r, c] = top + wy * (bot - top)
    return out


def crop_reference(
    image: np.ndarray,
    box: BBox,
    out_side: int,
    pad_left: float = 0.0,
    pad_top: float = 0.0,
    square_side: float | None = None,
) -> np.ndarray:
    """Explicit-loop crop-and-resize with optional symmetric zero padding.

    With ``square_side`` set, the output square maps to a canvas of that
    normalized side; the box content sits at (pad_left, pad_top) inside
    it and everything else is zeros. Without it, the output maps to the
    box directly.
    """
    h_px, w_px = image.shape[0], image.shape[1]
    out = np.zeros((out_side, out_side, image.shape[2]), dtype=np.float64)
    for r in range(out_side):
        for c in range(out_side):
            u = (c + 0.5) / out_side
            v = (r + 0.5) / out_side
            if square_side is not None:
                cu = u * square_side - pad_left
                cv = v * square_side - pad_top
                if not (0.0 <= cu <= box.width and 0.0 <= cv <= box.height):
                    continue
                x_img = box.x_min + cu
                y_img = box.y_min + cv
            else:
                x_img = box.x_min + u * box.width
                y_img = box.y_min + v * box.height
            sx = min(max(x_img * w_px - 0.5, 0.0), w_px - 1.0)
            sy = min(max(y_img * h_px - 0.5, 0.0), h_px - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, w_px - 1), min(y0 + 1, h_px - 1)
            wx, wy = sx - x0, sy - y0
            top = image[y0, x0] + wx * (image[y0, x1] - image[y0, x0])
            bot = image[y1, x0] + wx * (image[y1, x1] - image[y1, x0])
            out[r, c] = top + wy * (bot - top)
    return out
