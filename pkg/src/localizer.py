"""
Localization layer for BUPM.

Reference mask -> threshold at 0.5 -> biggest 8-connected component
(columns 0 and W'-1 adjacent on panoramas) -> minimum box in panorama pixels.
"""

from __future__ import annotations

from typing import Optional, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, Field

DEFAULT_THRESHOLD = 0.5


class BoundingBox(BaseModel):
    """Box in panorama pixels. With wrap set, columns are read modulo the panorama width."""

    x0: int = Field(ge=0)
    y0: int = Field(ge=0)
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    wrap: bool = False

    def column_coverage(self, pano_width: int) -> np.ndarray:
        cols = np.zeros(pano_width, dtype=bool)
        cols[(self.x0 + np.arange(self.width)) % pano_width] = True
        return cols

    def row_coverage(self, pano_height: int) -> np.ndarray:
        rows = np.zeros(pano_height, dtype=bool)
        rows[self.y0:self.y0 + self.height] = True
        return rows

    def area(self) -> int:
        return self.width * self.height


def _as_grid(mask) -> np.ndarray:
    grid = np.asarray(mask, dtype=np.float64)
    if grid.ndim == 3:
        if grid.shape[2] != 1:
            raise ValueError(f"mask must be H' x W' or H' x W' x 1, got {grid.shape}")
        grid = grid[:, :, 0]
    if grid.ndim != 2:
        raise ValueError(f"mask must be 2-D, got {grid.shape}")
    return grid


def threshold_mask(m_r, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {t}")
    return _as_grid(m_r) >= t


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def biggest_component(grid: np.ndarray, wrap_horizontal: bool = False) -> np.ndarray:
    """
    Boolean mask of the largest 8-connected component (all False when grid is empty).

    Ties go to the component whose first cell comes first in row-major order.
    """
    grid = np.asarray(grid, dtype=bool)
    if not grid.any():
        return np.zeros_like(grid)

    n_labels, labels = cv2.connectedComponents(grid.astype(np.uint8), connectivity=8)
    uf = _UnionFind(n_labels)

    height, width = grid.shape
    if wrap_horizontal and width > 2:
        for r in range(height):
            if not grid[r, 0]:
                continue
            for dr in (-1, 0, 1):
                rr = r + dr
                if 0 <= rr < height and grid[rr, width - 1]:
                    uf.union(int(labels[r, 0]), int(labels[rr, width - 1]))

    roots = np.array([uf.find(i) for i in range(n_labels)])
    merged = roots[labels]
    merged[~grid] = -1

    flat = merged.ravel()
    best_root, best_size, best_first = None, -1, None
    for root in np.unique(flat[flat >= 0]):
        cells = np.flatnonzero(flat == root)
        size = cells.size
        first = cells[0]
        if size > best_size or (size == best_size and first < best_first):
            best_root, best_size, best_first = root, size, first

    return merged == best_root


def _circular_span(occupied: np.ndarray) -> Tuple[int, int]:
    """(start, length) of the shortest circular arc covering every True column."""
    n = occupied.size
    if occupied.all():
        return 0, n

    # the longest run of empty columns, scanning twice around the circle
    empty = np.concatenate([~occupied, ~occupied])
    best_len, best_end, run = 0, -1, 0
    for i, e in enumerate(empty):
        run = run + 1 if e else 0
        if run > best_len:
            best_len, best_end = run, i
    best_len = min(best_len, n)
    start = (best_end + 1) % n
    return start, n - best_len


def localize(
    m_r,
    reference_extents: Tuple[int, int],
    t: float = DEFAULT_THRESHOLD,
    wrap_horizontal: bool = True,
) -> Optional[BoundingBox]:
    """
    Minimum panorama-pixel box around the biggest component of the thresholded mask.

    Feature cell (row, col) covers pixels [row*d, (row+1)*d) x [col*d, (col+1)*d).
    """
    grid = threshold_mask(m_r, t)
    h_cells, w_cells = grid.shape
    h_ref, w_ref = reference_extents
    if h_ref % h_cells or w_ref % w_cells or h_ref // h_cells != w_ref // w_cells:
        raise ValueError(
            f"reference extents {reference_extents} are not a uniform multiple of mask {grid.shape}"
        )
    d = h_ref // h_cells

    component = biggest_component(grid, wrap_horizontal=wrap_horizontal)
    if not component.any():
        return None

    rows = np.flatnonzero(component.any(axis=1))
    occupied = component.any(axis=0)

    if wrap_horizontal:
        start, length = _circular_span(occupied)
    else:
        cols = np.flatnonzero(occupied)
        start, length = int(cols[0]), int(cols[-1] - cols[0] + 1)

    return BoundingBox(
        x0=start * d,
        y0=int(rows[0]) * d,
        width=length * d,
        height=int(rows[-1] - rows[0] + 1) * d,
        wrap=start + length > w_cells,
    )


def box_iou(a: BoundingBox, b: BoundingBox, pano_extents: Tuple[int, int]) -> float:
    """IoU of the covered pixel sets, columns taken modulo the panorama width."""
    h, w = pano_extents
    cols = np.logical_and(a.column_coverage(w), b.column_coverage(w)).sum()
    rows = np.logical_and(a.row_coverage(h), b.row_coverage(h)).sum()
    inter = float(cols * rows)
    area_a = float(a.column_coverage(w).sum() * a.row_coverage(h).sum())
    area_b = float(b.column_coverage(w).sum() * b.row_coverage(h).sum())
    union = area_a + area_b - inter
    return 0.0 if union == 0.0 else inter / union


def render_box(
    panorama: np.ndarray,
    box: BoundingBox,
    color: Tuple[float, float, float] = (1.0, 0.0, 0.0),
    thickness: int = 2,
) -> np.ndarray:
    """Annotated copy of the panorama; a seam-crossing box is drawn as two pieces."""
    out = np.ascontiguousarray(panorama, dtype=np.float64).copy()
    width = out.shape[1]
    y1 = box.y0 + box.height - 1

    pieces = [(box.x0, min(box.x0 + box.width, width) - 1)]
    if box.x0 + box.width > width:
        pieces.append((0, box.x0 + box.width - width - 1))

    for x_start, x_end in pieces:
        cv2.rectangle(out, (int(x_start), int(box.y0)), (int(x_end), int(y1)), color, thickness)
    return out


def overlay_mask(panorama: np.ndarray, m_r, alpha: float = 0.5) -> np.ndarray:
    """Blend the reference mask (upsampled nearest) into the red channel of the panorama."""
    grid = _as_grid(m_r)
    h, w = panorama.shape[:2]
    up = cv2.resize(grid, (w, h), interpolation=cv2.INTER_NEAREST)
    out = np.array(panorama, dtype=np.float64, copy=True)
    out[:, :, 0] = (1.0 - alpha) * out[:, :, 0] + alpha * up
    return out
