"""Occupancy grids and Euclidean distance fields for clearance costs.

The distance transform is computed exactly: both passes of the
lower-envelope algorithm operate on integer squared cell distances, which
float64 represents without rounding for any realistic grid size, so the
result matches a brute-force nearest-occupied-cell scan bit for bit.

Grid geometry: cell (ix, iy) covers a ``resolution`` sized square whose
centre is at ``origin + (ix + 0.5, iy + 0.5) * resolution``. Row iy = 0 is
the bottom of the world; text files store the top row first so they read
like a map.
"""

from __future__ import annotations

import math

import numpy as np


class GridFormatError(ValueError):
    pass


class OccupancyGrid:
    """Boolean grid: True marks an occupied cell."""

    __slots__ = ("cells", "resolution", "origin")

    def __init__(self, cells, resolution: float, origin=(0.0, 0.0)):
        cells = np.asarray(cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise GridFormatError("grid must be a non-empty 2-d array")
        if resolution <= 0:
            raise GridFormatError("resolution must be positive")
        self.cells = cells
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @classmethod
    def empty(cls, width: int, height: int, resolution: float,
              origin=(0.0, 0.0)) -> "OccupancyGrid":
        return cls(np.zeros((height, width), dtype=bool), resolution, origin)

    def cell_centers(self):
        """(xs, ys) coordinate vectors of column / row centres."""
        xs = self.origin[0] + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.height) + 0.5) * self.resolution
        return xs, ys

    def mark_disk(self, cx: float, cy: float, radius: float) -> None:
        """Occupy every cell whose centre lies within the disk."""
        xs, ys = self.cell_centers()
        dx = xs[None, :] - cx
        dy = ys[:, None] - cy
        self.cells |= dx * dx + dy * dy <= radius * radius

    def mark_rect(self, x0: float, y0: float, x1: float, y1: float) -> None:
        """Occupy every cell whose centre lies inside the rectangle."""
        xs, ys = self.cell_centers()
        inside_x = (xs >= min(x0, x1)) & (xs <= max(x0, x1))
        inside_y = (ys >= min(y0, y1)) & (ys <= max(y0, y1))
        self.cells |= inside_y[:, None] & inside_x[None, :]

    # -- text format: header then rows, top row first ----------------------

    def to_text(self) -> str:
        header = (f"{self.width} {self.height} {self.resolution!r} "
                  f"{self.origin[0]!r} {self.origin[1]!r}")
        rows = [
            "".join("#" if c else "." for c in self.cells[iy])
            for iy in range(self.height - 1, -1, -1)
        ]
        return "\n".join([header] + rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OccupancyGrid":
        lines = [ln for ln in text.splitlines()]
        if not lines or not lines[0].strip():
            raise GridFormatError("missing grid header line")
        parts = lines[0].split()
        if len(parts) != 5:
            raise GridFormatError(
                "header must be: width height resolution origin_x origin_y")
        try:
            width, height = int(parts[0]), int(parts[1])
            resolution = float(parts[2])
            origin = (float(parts[3]), float(parts[4]))
        except ValueError as exc:
            raise GridFormatError(f"bad header value: {exc}") from None
        rows = [ln for ln in lines[1:] if ln.strip()]
        if len(rows) != height:
            raise GridFormatError(
                f"expected {height} rows, found {len(rows)}")
        cells = np.zeros((height, width), dtype=bool)
        for i, row in enumerate(rows):
            row = row.strip()
            if len(row) != width:
                raise GridFormatError(
                    f"row {i + 2}: expected {width} cells, found {len(row)}")
            bad = set(row) - {"#", "."}
            if bad:
                raise GridFormatError(
                    f"row {i + 2}: unknown cell characters {sorted(bad)}")
            # first text row is the top of the world
            iy = height - 1 - i
            cells[iy] = np.frombuffer(row.encode(), dtype=np.uint8) == ord("#")
        return cls(cells, resolution, origin)


_FREE_SENTINEL = 1.0e6


def _edt_1d(f: np.ndarray) -> np.ndarray:
    """Exact 1-d squared distance transform (lower envelope of parabolas)."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.intp)
    z = np.empty(n + 1)
    z[0] = -math.inf
    z[1] = math.inf
    k = 0
    for q in range(1, n):
        fq = f[q] + q * q
        s = (fq - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = (fq - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = math.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def squared_distance_cells(occ: OccupancyGrid) -> np.ndarray:
    """Integer squared cell distance to the nearest occupied cell."""
    h, w = occ.cells.shape
    # finite stand-in for infinity keeps the envelope arithmetic exact
    large = float(4 * (w * w + h * h) + 16)
    g = np.where(occ.cells, 0.0, large)
    for ix in range(w):
        g[:, ix] = _edt_1d(g[:, ix])
    for iy in range(h):
        g[iy, :] = _edt_1d(g[iy, :])
    return g


def _cubic_weights(t: float):
    """Cubic convolution kernel weights and derivatives at offsets -1..2.

    Keys' interpolator (a = -1/2): interpolates the samples, reproduces
    quadratics, and is C1 across cell boundaries, which the optimizer
    needs; a piecewise-linear field would leave gradient jumps exactly
    where clearance minimizers settle.
    """
    t2 = t * t
    t3 = t2 * t
    w = (
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    )
    dw = (
        -1.5 * t2 + 2.0 * t - 0.5,
        4.5 * t2 - 5.0 * t,
        -4.5 * t2 + 4.0 * t + 0.5,
        1.5 * t2 - t,
    )
    return w, dw


class EsdfGrid:
    """Sampled distance-to-nearest-obstacle field with smooth queries.

    Queries interpolate the samples with a C1 cubic kernel (border rows
    and columns replicated). Queries outside the sampled area return
    distance zero with a zero gradient: unknown space is treated as
    maximally unsafe.
    """

    __slots__ = ("distances", "resolution", "origin")

    def __init__(self, distances, resolution: float, origin=(0.0, 0.0)):
        distances = np.asarray(distances, dtype=float)
        if distances.ndim != 2 or distances.size == 0:
            raise GridFormatError("distance field must be a non-empty 2-d array")
        self.distances = distances
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))

    @classmethod
    def from_occupancy(cls, occ: OccupancyGrid) -> "EsdfGrid":
        if not occ.cells.any():
            dist = np.full(occ.cells.shape, _FREE_SENTINEL)
        else:
            dist = occ.resolution * np.sqrt(squared_distance_cells(occ))
        return cls(dist, occ.resolution, occ.origin)

    def _patch(self, x: float, y: float):
        h, w = self.distances.shape
        u = (x - self.origin[0]) / self.resolution - 0.5
        v = (y - self.origin[1]) / self.resolution - 0.5
        if u < 0.0 or v < 0.0 or u > w - 1 or v > h - 1:
            return None
        ix = min(int(u), w - 2) if w > 1 else 0
        iy = min(int(v), h - 2) if h > 1 else 0
        cols = np.clip(np.arange(ix - 1, ix + 3), 0, w - 1)
        rows = np.clip(np.arange(iy - 1, iy + 3), 0, h - 1)
        block = self.distances[np.ix_(rows, cols)]
        return block, u - ix, v - iy

    def query(self, x: float, y: float) -> float:
        patch = self._patch(x, y)
        if patch is None:
            return 0.0
        block, fu, fv = patch
        wx, _ = _cubic_weights(fu)
        wy, _ = _cubic_weights(fv)
        return float(np.asarray(wy) @ block @ np.asarray(wx))

    def gradient(self, x: float, y: float) -> np.ndarray:
        patch = self._patch(x, y)
        if patch is None:
            return np.zeros(2)
        block, fu, fv = patch
        wx, dwx = _cubic_weights(fu)
        wy, dwy = _cubic_weights(fv)
        gx = float(np.asarray(wy) @ block @ np.asarray(dwx)) / self.resolution
        gy = float(np.asarray(dwy) @ block @ np.asarray(wx)) / self.resolution
        return np.array([gx, gy])
