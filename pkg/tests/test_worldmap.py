"""Distance field tests against a brute-force oracle."""

import math

import numpy as np
import pytest

from fgnav.worldmap import (
    EsdfGrid,
    GridFormatError,
    OccupancyGrid,
    squared_distance_cells,
)


def brute_force_squared(cells: np.ndarray) -> np.ndarray:
    """Nearest occupied cell by exhaustive scan, integer squared distance."""
    h, w = cells.shape
    occ = np.argwhere(cells)
    out = np.empty((h, w))
    for iy in range(h):
        for ix in range(w):
            d2 = (occ[:, 0] - iy) ** 2 + (occ[:, 1] - ix) ** 2
            out[iy, ix] = d2.min()
    return out


def test_edt_matches_brute_force_exactly():
    rng = np.random.default_rng(7)
    for trial in range(12):
        h = int(rng.integers(1, 40))
        w = int(rng.integers(1, 40))
        density = rng.uniform(0.02, 0.4)
        cells = rng.random((h, w)) < density
        if not cells.any():
            cells[rng.integers(0, h), rng.integers(0, w)] = True
        grid = OccupancyGrid(cells, 0.1)
        got = squared_distance_cells(grid)
        want = brute_force_squared(cells)
        assert np.array_equal(got, want), f"trial {trial} mismatch"


def test_esdf_distances_scale_with_resolution():
    cells = np.zeros((5, 7), dtype=bool)
    cells[2, 3] = True
    esdf = EsdfGrid.from_occupancy(OccupancyGrid(cells, 0.25))
    # cell (0, 0) is 3 columns and 2 rows away
    assert esdf.distances[0, 0] == 0.25 * math.sqrt(13)
    assert esdf.distances[2, 3] == 0.0


def test_all_free_grid_reads_as_far():
    esdf = EsdfGrid.from_occupancy(OccupancyGrid.empty(6, 4, 0.1))
    assert np.all(esdf.distances == 1.0e6)
    assert esdf.query(0.3, 0.2) == 1.0e6


def test_query_matches_cell_centers():
    rng = np.random.default_rng(3)
    cells = rng.random((12, 9)) < 0.2
    cells[5, 4] = True
    grid = OccupancyGrid(cells, 0.5, origin=(-1.0, 2.0))
    esdf = EsdfGrid.from_occupancy(grid)
    xs, ys = grid.cell_centers()
    for iy in [0, 3, 11]:
        for ix in [0, 4, 8]:
            assert esdf.query(xs[ix], ys[iy]) == esdf.distances[iy, ix]


def test_query_reproduces_quadratic_samples():
    # the interpolator is exact on quadratics away from the border clamp
    xs = (np.arange(12) + 0.5) * 0.1
    ys = (np.arange(10) + 0.5) * 0.1
    fx, fy = np.meshgrid(xs, ys)
    samples = 0.3 + 0.7 * fx - 0.4 * fy + 0.5 * fx * fy + 0.2 * fx * fx
    esdf = EsdfGrid(samples, 0.1)
    rng = np.random.default_rng(2)
    for _ in range(30):
        x = float(rng.uniform(0.2, 1.0))
        y = float(rng.uniform(0.2, 0.8))
        want = 0.3 + 0.7 * x - 0.4 * y + 0.5 * x * y + 0.2 * x * x
        assert abs(esdf.query(x, y) - want) < 1e-12
        g = esdf.gradient(x, y)
        assert abs(g[0] - (0.7 + 0.5 * y + 0.4 * x)) < 1e-10
        assert abs(g[1] - (-0.4 + 0.5 * x)) < 1e-10


def test_query_outside_is_unsafe():
    cells = np.zeros((4, 4), dtype=bool)
    cells[1, 1] = True
    esdf = EsdfGrid.from_occupancy(OccupancyGrid(cells, 0.1))
    assert esdf.query(-5.0, 0.2) == 0.0
    assert esdf.query(0.2, 50.0) == 0.0
    # the last cell centre (x = 0.35) bounds the interpolated area
    assert esdf.query(0.35 - 0.01, 0.2) != 0.0
    assert esdf.query(0.35 + 0.01, 0.2) == 0.0
    assert np.all(esdf.gradient(-5.0, 0.2) == 0.0)


def test_query_and_gradient_continuous_across_cells():
    rng = np.random.default_rng(11)
    cells = rng.random((20, 20)) < 0.15
    cells[10, 10] = True
    esdf = EsdfGrid.from_occupancy(OccupancyGrid(cells, 0.1))
    for _ in range(50):
        # straddle a random interior patch boundary
        ix = int(rng.integers(2, 18))
        y = float(rng.uniform(0.2, 1.8))
        x_edge = 0.05 + ix * 0.1
        lo = esdf.query(x_edge - 1e-9, y)
        hi = esdf.query(x_edge + 1e-9, y)
        assert abs(hi - lo) < 1e-7
        # C1: the gradient is continuous too, which keeps the optimizer
        # from stalling on clearance valleys
        glo = esdf.gradient(x_edge - 1e-9, y)
        ghi = esdf.gradient(x_edge + 1e-9, y)
        assert np.all(np.abs(ghi - glo) < 1e-6)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(19)
    cells = rng.random((25, 25)) < 0.1
    cells[12, 12] = True
    esdf = EsdfGrid.from_occupancy(OccupancyGrid(cells, 0.1))
    h = 1e-7
    checked = 0
    while checked < 40:
        x = float(rng.uniform(0.1, 2.4))
        y = float(rng.uniform(0.1, 2.4))
        # keep clear of cell edges so the finite difference stays one-sided
        fx = (x / 0.1) % 1.0
        fy = (y / 0.1) % 1.0
        if not (0.1 < fx < 0.9 and 0.1 < fy < 0.9):
            continue
        g = esdf.gradient(x, y)
        gx = (esdf.query(x + h, y) - esdf.query(x - h, y)) / (2 * h)
        gy = (esdf.query(x, y + h) - esdf.query(x, y - h)) / (2 * h)
        assert abs(g[0] - gx) < 1e-6
        assert abs(g[1] - gy) < 1e-6
        checked += 1


def test_distance_is_nearly_axis_lipschitz():
    # samples of a 1-Lipschitz field; the cubic kernel steepens short
    # transitions but its derivative stays below 1.75x the sample bound
    rng = np.random.default_rng(23)
    cells = rng.random((15, 15)) < 0.2
    cells[7, 7] = True
    esdf = EsdfGrid.from_occupancy(OccupancyGrid(cells, 0.2))
    for _ in range(200):
        x = float(rng.uniform(0.15, 2.8))
        y = float(rng.uniform(0.15, 2.8))
        dx = float(rng.uniform(-0.5, 0.5))
        x2 = min(max(x + dx, 0.15), 2.8)
        d1 = esdf.query(x, y)
        d2 = esdf.query(x2, y)
        assert abs(d2 - d1) <= abs(x2 - x) * 1.75 + 1e-12


def test_mark_disk_and_rect():
    grid = OccupancyGrid.empty(10, 10, 0.1)
    grid.mark_disk(0.45, 0.45, 0.12)
    # centre cell plus the four axis neighbours; diagonals are 0.141 away
    assert grid.cells.sum() == 5
    assert grid.cells[4, 4] and grid.cells[4, 5] and grid.cells[5, 4]
    grid2 = OccupancyGrid.empty(10, 10, 0.1)
    grid2.mark_rect(0.0, 0.0, 0.31, 0.21)
    assert grid2.cells.sum() == 3 * 2


def test_text_round_trip():
    rng = np.random.default_rng(5)
    cells = rng.random((6, 11)) < 0.3
    grid = OccupancyGrid(cells, 0.05, origin=(-1.25, 0.5))
    text = grid.to_text()
    back = OccupancyGrid.from_text(text)
    assert np.array_equal(back.cells, grid.cells)
    assert back.resolution == grid.resolution
    assert back.origin == grid.origin


def test_text_first_row_is_top():
    text = "3 2 1.0 0.0 0.0\n#..\n...\n"
    grid = OccupancyGrid.from_text(text)
    assert grid.cells[1, 0]          # top text row lands on the highest iy
    assert not grid.cells[0, 0]


@pytest.mark.parametrize("text", [
    "",
    "3 2 1.0 0.0\n...\n...\n",          # short header
    "3 2 1.0 0.0 0.0\n...\n",            # missing row
    "3 2 1.0 0.0 0.0\n....\n...\n",      # wrong row length
    "3 2 1.0 0.0 0.0\n..x\n...\n",       # unknown character
    "3 2 abc 0.0 0.0\n...\n...\n",       # bad number
])
def test_text_format_errors(text):
    with pytest.raises(GridFormatError):
        OccupancyGrid.from_text(text)


def test_constructor_rejects_bad_input():
    with pytest.raises(GridFormatError):
        OccupancyGrid(np.zeros((0, 3), dtype=bool), 0.1)
    with pytest.raises(GridFormatError):
        OccupancyGrid(np.zeros((3, 3), dtype=bool), -1.0)
