import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gazerefine.errors import DegenerateHeatmap
from gazerefine.geometry import EVE_SCREEN, PoG
from gazerefine.pt import warp
from gazerefine.raster import (
    AffineParams,
    AugmentConfig,
    HeatmapGrid,
    apply_affine_points,
    augment_stream,
    blur,
    decode,
    decode_batch,
    draw_history,
    rasterize_history,
    rasterize_point,
    read_pgm,
    sample_affine,
    sample_noise,
    write_pgm,
)

GRID = HeatmapGrid()
on_screen = st.tuples(st.floats(0, 55.3), st.floats(0, 31.1))

# chi-square 99th percentile for 19 degrees of freedom
CHI2_19_99 = 36.191


# ---------------------------------------------------------------------------
# brute-force digital-segment oracle


def on_segment(cell, p0, p1):
    """Cell lies on the digital segment p0-p1 (all integer cells).

    Along the major axis the cell must lie within the segment's extent; along
    the minor axis its centre must lie within half a cell of the ideal line,
    with the tie at exactly one half resolved towards the larger coordinate
    (``-1/2 < offset <= 1/2``). Exact rational arithmetic throughout.
    """
    (c, r), (x0, y0), (x1, y1) = cell, p0, p1
    dx, dy = x1 - x0, y1 - y0
    if dx == 0 and dy == 0:
        return (c, r) == (x0, y0)
    if abs(dx) >= abs(dy):
        if not min(x0, x1) <= c <= max(x0, x1):
            return False
        off = r - (y0 + Fraction(c - x0) * dy / dx)
    else:
        if not min(y0, y1) <= r <= max(y0, y1):
            return False
        off = c - (x0 + Fraction(r - y0) * dx / dy)
    return Fraction(-1, 2) < off <= Fraction(1, 2)


def oracle_canvas(cells, h, w):
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            hit = any((c, r) == tuple(p) for p in cells)
            hit = hit or any(on_segment((c, r), tuple(a), tuple(b)) for a, b in zip(cells[:-1], cells[1:]))
            out[r, c] = hit
    return out


# ---------------------------------------------------------------------------
# rasterize_point


def test_point_at_centre():
    h = rasterize_point(PoG(27.65, 15.55))
    r, c = np.unravel_index(np.argmax(h), h.shape)
    assert (r, c) == (36, 64)
    assert h[36, 64] == 1.0


def test_point_far_off_screen_is_zero():
    assert not rasterize_point([10 * 55.3, 15.0]).any()


def test_point_one_cell_from_peak_sigma_one():
    grid = HeatmapGrid(sigma=1.0)
    h = rasterize_point(PoG(960, 540, "px"), grid)
    assert h[36, 65] == pytest.approx(math.exp(-0.5))
    assert h[36, 65] == pytest.approx(0.6065, abs=1e-4)


@given(on_screen)
def test_point_peaks_at_one_in_unit_range(p):
    h = rasterize_point(p)
    assert h.max() == 1.0 and h.min() >= 0.0


@given(on_screen)
def test_decode_round_trip_within_one_cell(p):
    q = decode(rasterize_point(p)).as_array()
    px, py = GRID.cell_pitch_cm
    assert abs(q[0] - p[0]) <= px and abs(q[1] - p[1]) <= py


def test_decode_constant_map():
    with pytest.raises(DegenerateHeatmap):
        decode(np.full((72, 128), 0.3))


def test_decode_tie_break():
    h = np.zeros((72, 128))
    h[10, 10] = h[20, 20] = 1.0
    q = decode(h)
    assert (q.x, q.y) == pytest.approx(tuple(GRID.cells_to_cm([10, 10])))


def test_decode_batch_matches_single(rng):
    hs = rng.uniform(size=(4, 72, 128))
    xy = decode_batch(hs)
    for h, q in zip(hs, xy):
        assert q == pytest.approx(decode(h).as_array())


# ---------------------------------------------------------------------------
# history


def test_history_single_point():
    p = np.array([[12.3, 20.1]])
    assert np.array_equal(rasterize_history(p, [1], rng=np.random.default_rng(0)), rasterize_point(p[0]))


def test_history_duplicate_points():
    p = np.array([[12.3, 20.1], [12.3, 20.1]])
    assert np.allclose(rasterize_history(p, [1, 1], rng=np.random.default_rng(0)), rasterize_point(p[0]))


def test_history_invalid_points_ignored():
    p = np.array([[12.3, 20.1], [50.0, 3.0]])
    assert np.array_equal(rasterize_history(p, [1, 0], rng=np.random.default_rng(0)), rasterize_point(p[0]))


def test_history_empty_is_zero():
    assert not rasterize_history(np.empty((0, 2)), np.empty(0)).any()
    assert not rasterize_history(np.ones((3, 2)), [0, 0, 0]).any()


def test_history_corner_to_corner_is_digital_line():
    grid = HeatmapGrid()
    p = np.array([[0.0, 0.0], [55.3, 31.1]])
    canvas = draw_history(p, [1, 1], grid, np.random.default_rng(0))
    cells = grid.snap(p)
    assert cells.tolist() == [[0, 0], [127, 71]]
    assert np.array_equal(canvas > 0.5, oracle_canvas(cells.tolist(), 72, 128))


@pytest.mark.parametrize("seed", range(25))
def test_history_matches_oracle_small_grid(seed):
    rng = np.random.default_rng(seed)
    grid = HeatmapGrid(height=16, width=16)
    k = int(rng.integers(1, 7))
    pts = rng.uniform(-0.2, 1.2, (k, 2)) * [55.3, 31.1]
    valid = np.ones(k, dtype=int)
    order = rng.permutation(k)
    canvas = draw_history(pts, valid, grid, rng, order=order)
    cells = grid.snap(pts[order])
    assert np.array_equal(canvas > 0.5, oracle_canvas(cells.tolist(), 16, 16))


@settings(max_examples=30)
@given(st.lists(st.tuples(st.floats(-30, 90), st.floats(-20, 50)), min_size=0, max_size=30), st.integers(0, 99))
def test_history_values_in_unit_range(points, seed):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    h = rasterize_history(pts, np.ones(len(pts)), rng=np.random.default_rng(seed))
    assert h.min() >= 0.0 and h.max() <= 1.0
    if h.any():
        assert h.max() == pytest.approx(1.0)


def test_history_order_robust_for_spread_points():
    pts = np.array([[5.0, 5.0], [50.0, 5.0], [5.0, 26.0], [50.0, 26.0], [27.0, 15.0]])
    cells = GRID.snap(pts)
    for seed in range(10):
        canvas = draw_history(pts, np.ones(5), GRID, np.random.default_rng(seed))
        assert all(canvas[r, c] > 0.5 for c, r in cells)


def test_blur_is_peak_normalised():
    c = np.zeros((20, 30))
    c[5, 5] = 1.0
    c[5, 6] = 1.0
    h = blur(c, 1.5)
    assert h.max() == pytest.approx(1.0) and h.min() >= 0.0


def test_pgm_round_trip(tmp_path):
    h = rasterize_point([20.0, 10.0])
    path = tmp_path / "h.pgm"
    write_pgm(h, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n128 72\n255\n")
    back = read_pgm(path)
    assert back.shape == (72, 128)
    assert np.abs(back - h).max() <= 0.5 / 255 + 1e-12


# ---------------------------------------------------------------------------
# affine augmentation


def test_identity_affine_zero_noise():
    pts = np.array([[100.0, 40.0], [1500.0, 900.0]])
    assert np.allclose(apply_affine_points(pts, AffineParams.identity()), pts)


def test_translation_affine():
    a = AffineParams.from_pixel_matrix([[1, 0, 50], [0, 1, 20]])
    pts = np.array([[100.0, 40.0], [0.0, 0.0]])
    assert np.allclose(apply_affine_points(pts, a), pts + [50, 20])


def test_scale_about_pixel_origin():
    a = AffineParams.from_pixel_matrix([[2, 0, 0], [0, 2, 0]])
    assert np.allclose(apply_affine_points([[100.0, 40.0]], a), [[200.0, 80.0]])
    assert np.allclose(a.to_pixel_matrix(), [[2, 0, 0], [0, 2, 0]])


def test_from_components_translation_fraction():
    a = AffineParams.from_components(translation_frac=(0.1, -0.2))
    out = apply_affine_points([[960.0, 540.0]], a)
    assert np.allclose(out, [[960 + 192, 540 - 216]])


def test_affine_inverse():
    a = AffineParams.from_components((1.2, 0.8), 10.0, 0.1, (0.05, -0.1))
    pts = np.array([[10.0, 20.0], [1800.0, 1000.0]])
    assert np.allclose(apply_affine_points(apply_affine_points(pts, a), a.inverse()), pts)


def test_collapsed_ranges_give_identity(rng):
    cfg = AugmentConfig.none()
    assert np.allclose(sample_affine(rng, cfg).theta, AffineParams.identity().theta)
    assert not sample_noise(rng, cfg, n=10).any()


def test_augment_identity_stream(rng):
    g = rng.uniform(0, 1, (50, 2)) * [55.3, 31.1]
    out, a = augment_stream(g, rng, AugmentConfig.none())
    assert np.allclose(out, g)
    assert a == AffineParams(np.eye(2, 3))


def test_noise_std_monte_carlo(rng):
    cfg = AugmentConfig()
    n = sample_noise(rng, cfg, n=100_000)
    sigma = cfg.noise_sigma_px(EVE_SCREEN)
    assert sigma == pytest.approx(0.02 * math.hypot(1920, 1080))
    assert abs(n.std() - sigma) <= 0.05 * sigma
    assert abs(n.mean()) <= 0.05 * sigma


def rotation_angle(a: AffineParams) -> float:
    """Rotation factor of R @ shear @ scale, recovered by QR in pixel space."""
    lin = a.to_pixel_matrix()[:, :2]
    q, r = np.linalg.qr(lin)
    q = q * np.sign(np.diag(r))[None, :]
    return math.degrees(math.atan2(q[1, 0], q[0, 0]))


def test_rotation_recovered_exactly():
    a = AffineParams.from_components((1.2, 0.8), 7.5, 0.15, (0.1, 0.1))
    assert rotation_angle(a) == pytest.approx(7.5)


def test_rotation_histogram_uniform(rng):
    cfg = AugmentConfig()
    angles = np.array([rotation_angle(sample_affine(rng, cfg)) for _ in range(100_000)])
    assert angles.min() >= -15.0 - 1e-9 and angles.max() <= 15.0 + 1e-9
    counts, _ = np.histogram(angles, bins=20, range=(-15, 15))
    expected = len(angles) / 20
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_19_99


# ---------------------------------------------------------------------------
# equivariance with the PT sampler


def _mild_affines(rng, n):
    out = []
    for _ in range(n):
        out.append(AffineParams.from_components(tuple(rng.uniform(0.9, 1.1, 2)), rng.uniform(-5, 5), 0.0,
                                                tuple(rng.uniform(-0.05, 0.05, 2))))
    return out


def _pair(a, p):
    moved = a.apply_normalized(EVE_SCREEN.to_normalized(EVE_SCREEN.cm_to_px(p)))
    direct = rasterize_point(EVE_SCREEN.px_to_cm(EVE_SCREEN.from_normalized(moved)))
    # sampling with A^-1 moves content by A
    warped = warp(rasterize_point(p)[None, :, :, None], a.inverse().theta.reshape(1, 6))[0, :, :, 0]
    return direct, warped


@pytest.mark.xfail(strict=True, reason=(
    "2% max-abs is below the discretisation error: a 10% scale changes the warped Gaussian's width "
    "(about 7% max-abs on its own), bilinear interpolation of a sigma=1.5-cell Gaussian deviates by "
    "about 5% between cell centres, and snapping shifts the direct map by up to half a cell"))
def test_raster_warp_equivariance_two_percent():
    rng = np.random.default_rng(7)
    worst = 0.0
    for a in _mild_affines(rng, 50):
        p = rng.uniform(0.25, 0.75, 2) * [55.3, 31.1]
        direct, warped = _pair(a, p)
        worst = max(worst, np.abs(direct - warped).max())
    assert worst <= 0.02


def test_raster_warp_equivariance_peak_location():
    rng = np.random.default_rng(7)
    for a in _mild_affines(rng, 50):
        p = rng.uniform(0.25, 0.75, 2) * [55.3, 31.1]
        direct, warped = _pair(a, p)
        rd, cd = np.unravel_index(np.argmax(direct), direct.shape)
        rw, cw = np.unravel_index(np.argmax(warped), warped.shape)
        assert abs(rd - rw) <= 1 and abs(cd - cw) <= 1
        assert np.abs(direct - warped).max() < 0.5
