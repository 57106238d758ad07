import math

import numpy as np
import pytest

from narrowlane.geometry import box_corners
from narrowlane.occupancy import OPEN_EPS, build_stack, render_frame, window_side_m, write_pgm


# -- brute-force oracle: polygon clipping area per cell ----------------------


def _clip_poly(poly, axis, sign, bound):
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ia = sign * a[axis] <= sign * bound
        ib = sign * b[axis] <= sign * bound
        if ia != ib:
            t = (bound - a[axis]) / (b[axis] - a[axis])
            cut = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        if ia:
            out.append(a)
            if not ib:
                out.append(cut)
        elif ib:
            out.append(cut)
    return out


def _cell_overlap_area(poly, xmin, xmax, ymin, ymax):
    for axis, sign, bound in ((0, -1, xmin), (0, 1, xmax), (1, -1, ymin), (1, 1, ymax)):
        poly = _clip_poly(poly, axis, sign, bound)
        if len(poly) < 3:
            return 0.0
    area = 0.0
    for i in range(len(poly)):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % len(poly)]
        area += x0 * y1 - x1 * y0
    return 0.5 * abs(area)


def _oracle_frame(obstacles, ego_x, ego_y, ego_heading, size, resolution):
    grid = np.zeros((size, size), dtype=np.uint8)
    half = size // 2
    c, s = math.cos(ego_heading), math.sin(ego_heading)
    rot = np.array([[c, -s], [s, c]])
    for corners in obstacles:
        local = (np.asarray(corners) - [ego_x, ego_y]) @ rot
        poly = [tuple(p) for p in local]
        lo, hi = local.min(axis=0), local.max(axis=0)
        for i in range(size):
            x0, x1 = (i - half) * resolution, (i + 1 - half) * resolution
            if x1 < lo[0] or x0 > hi[0]:
                continue
            for j in range(size):
                y0, y1 = (j - half) * resolution, (j + 1 - half) * resolution
                if y1 < lo[1] or y0 > hi[1]:
                    continue
                if _cell_overlap_area(poly, x0, x1, y0, y1) > 1e-9:
                    grid[i, j] = 1
    return grid


# -- single frames -----------------------------------------------------------


def test_empty_scene_renders_empty_grid():
    frame = render_frame([], 0.0, 0.0, 0.0)
    assert frame.shape == (84, 84)
    assert frame.dtype == np.uint8
    assert frame.sum() == 0


def test_unit_obstacle_five_meters_ahead_is_a_two_by_two_block():
    obstacle = box_corners(5.0, 0.0, 0.0, 1.0, 1.0)
    frame = render_frame([obstacle], 0.0, 0.0, 0.0, size=84, resolution=0.5)
    expected = np.zeros((84, 84), dtype=np.uint8)
    expected[51:53, 41:43] = 1
    np.testing.assert_array_equal(frame, expected)
    oracle = _oracle_frame([obstacle], 0.0, 0.0, 0.0, 84, 0.5)
    np.testing.assert_array_equal(frame, oracle)


def test_boundary_contact_does_not_occupy():
    # Obstacle exactly spanning cell boundaries: neighbours that only
    # touch stay empty under the open-overlap rule.
    obstacle = box_corners(5.0, 0.0, 0.0, 1.0, 1.0)
    frame = render_frame([obstacle], 0.0, 0.0, 0.0, size=84, resolution=0.5)
    assert frame[50, 41] == 0 and frame[53, 41] == 0
    assert frame[51, 40] == 0 and frame[51, 43] == 0


def test_rotated_obstacle_matches_area_oracle():
    obstacles = [
        box_corners(3.7, -2.1, 0.6, 4.6, 1.8),
        box_corners(-5.2, 4.4, -1.1, 2.0, 3.0),
    ]
    frame = render_frame(obstacles, 0.4, 0.3, 0.25, size=84, resolution=0.5)
    oracle = _oracle_frame(obstacles, 0.4, 0.3, 0.25, 84, 0.5)
    np.testing.assert_array_equal(frame, oracle)
    assert frame.sum() > 0


def test_far_obstacle_leaves_grid_empty():
    far = box_corners(100.0, 0.0, 0.0, 4.6, 1.8)
    frame = render_frame([far], 0.0, 0.0, 0.0, size=84, resolution=1.0)
    assert frame.sum() == 0
    assert window_side_m(84, 1.0) == 84.0


def test_rigid_motion_leaves_grid_bit_identical():
    obstacles = [box_corners(6.3, 1.7, 0.41, 4.6, 1.8), box_corners(-3.1, -4.9, 1.9, 2.5, 1.1)]
    ego = (1.2, -0.7, 0.33)
    base = render_frame(obstacles, *ego, size=84, resolution=0.5)

    phi, tx, ty = 0.83, 7.3, -2.9
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    moved = [corners @ rot.T + [tx, ty] for corners in obstacles]
    ex, ey = rot @ np.array(ego[:2]) + [tx, ty]
    shifted = render_frame(moved, ex, ey, ego[2] + phi, size=84, resolution=0.5)
    np.testing.assert_array_equal(base, shifted)


def test_grid_aligned_translation_shifts_cells():
    res = 0.5
    a = render_frame([box_corners(4.2, 0.9, 0.7, 2.0, 1.0)], 0.0, 0.0, 0.0, resolution=res)
    b = render_frame([box_corners(4.2 + 3 * res, 0.9, 0.7, 2.0, 1.0)], 0.0, 0.0, 0.0, resolution=res)
    np.testing.assert_array_equal(b[3:, :], a[:-3, :])
    assert b[:3, :].sum() == 0


# -- stacks -------------------------------------------------------------------


def _history_of_positions(xs, y=0.0):
    return [box_corners(x, y, math.pi, 4.6, 1.8) for x in xs]


def test_static_world_gives_four_identical_channels():
    statics = [box_corners(8.0, 2.25, 0.0, 4.8, 1.5)]
    history = _history_of_positions([20.0] * 30)
    stack = build_stack(history, statics, 0.0, 0.0, 0.0)
    assert stack.shape == (4, 84, 84)
    for k in range(1, 4):
        np.testing.assert_array_equal(stack[k], stack[0])
    assert stack[0].sum() > 0


def test_last_channel_is_the_current_step():
    history = _history_of_positions(np.linspace(30.0, 10.0, 21))
    stack = build_stack(history, [], 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(
        stack[3], render_frame([history[-1]], 0.0, 0.0, 0.0)
    )


def test_approaching_vehicle_marches_through_the_channels():
    # One metre per step toward the ego; channels sample steps 4/9/14/19.
    history = _history_of_positions([30.0 - k for k in range(20)])
    stack = build_stack(history, [], 0.0, 0.0, 0.0)
    ranges = []
    for k in range(4):
        occupied = np.nonzero(stack[k])
        assert occupied[0].size > 0
        ranges.append((occupied[0] - 42 + 0.5).min())
    assert ranges == sorted(ranges, reverse=True)
    np.testing.assert_allclose(np.diff(ranges), -5.0, atol=1.0)


def test_early_episode_pads_with_oldest_snapshot():
    history = _history_of_positions([30.0, 28.0, 26.0])  # t = 0.4 s
    stack = build_stack(history, [], 0.0, 0.0, 0.0)
    np.testing.assert_array_equal(stack[0], stack[1])
    np.testing.assert_array_equal(stack[1], stack[2])
    assert not np.array_equal(stack[2], stack[3])
    np.testing.assert_array_equal(stack[0], render_frame([history[0]], 0.0, 0.0, 0.0))


def test_empty_history_is_an_error():
    with pytest.raises(ValueError, match="empty history"):
        build_stack([], [], 0.0, 0.0, 0.0)


def test_pgm_dump_round_trips(tmp_path):
    frame = render_frame([box_corners(5.0, 0.0, 0.0, 1.0, 1.0)], 0.0, 0.0, 0.0, resolution=0.5)
    path = tmp_path / "frame.pgm"
    write_pgm(path, frame)
    raw = path.read_bytes()
    header, rest = raw.split(b"255\n", 1)
    assert header == b"P5\n84 84\n"
    img = np.frombuffer(rest, dtype=np.uint8).reshape(84, 84)
    np.testing.assert_array_equal(img > 0, frame > 0)


def test_open_overlap_margin_is_tight():
    # An obstacle protruding just past a boundary by more than the margin
    # occupies the next cell; by less than the margin it does not.
    big = box_corners(5.0 + 10 * OPEN_EPS, 0.0, 0.0, 1.0, 1.0)
    small = box_corners(5.0 + 0.1 * OPEN_EPS, 0.0, 0.0, 1.0, 1.0)
    fb = render_frame([big], 0.0, 0.0, 0.0, resolution=0.5)
    fs = render_frame([small], 0.0, 0.0, 0.0, resolution=0.5)
    assert fb[53, 41] == 1
    assert fs[53, 41] == 0
