"""Field-of-view geometry: mask predicate, polar mirror, patches, medians."""

import warnings

import numpy as np
import pytest

from cledetect.errors import ConfigError, GeometryError
from cledetect.fov import (
    SiteHistogram,
    bilinear_sample,
    circular_extrapolate,
    compute_fov_mask,
    default_log_edges,
    extract_patch_grid,
    extract_patches,
    from_polar,
    in_fov_values,
    median_histogram,
    median_raw_value,
    resize_bilinear,
    rotate_image,
    to_polar,
)
from cledetect.frame import LABEL_NORMAL, Frame


def make_frame(raw, radius, frame_id="f0", site="synthetic", **kw):
    return Frame(
        frame_id=frame_id,
        raw=np.asarray(raw, dtype=np.uint16),
        fov_radius=radius,
        patient_id=kw.pop("patient_id", "p0"),
        sequence_id=kw.pop("sequence_id", "s0"),
        label=kw.pop("label", LABEL_NORMAL),
        site=site,
        **kw,
    )


def _inside(i, j, w, h, r):
    # independent predicate: column i against W, row j against H
    return (i - w / 2.0) ** 2 + (j - h / 2.0) ** 2 <= r * r


# ---------------------------------------------------------------------------
# mask


def test_mask_radius_dominates_grid():
    assert compute_fov_mask(4, 4, 10).grid.sum() == 16


def test_mask_degenerate_radius_hits_center_pixel():
    m = compute_fov_mask(4, 4, 0)
    assert m.count == 1
    assert m.grid[2, 2] == 1  # center (W/2, H/2) = (2, 2) is itself a pixel


def test_mask_5x5_r2_has_12_elements():
    m = compute_fov_mask(5, 5, 2)
    brute = sum(_inside(i, j, 5, 5, 2) for i in range(5) for j in range(5))
    assert brute == 12  # frozen enumeration
    assert m.count == 12


def test_mask_boundary_is_inclusive():
    # pixel (7, 4) sits at distance exactly 3 from center (4, 4)
    assert compute_fov_mask(8, 8, 3).grid[4, 7] == 1
    assert compute_fov_mask(8, 8, 2.9999).grid[4, 7] == 0


def test_mask_nonempty_at_half_diagonal_radius():
    for w, h in [(5, 7), (6, 9), (3, 3)]:
        assert not compute_fov_mask(w, h, np.sqrt(2) / 2 + 1e-9).is_empty


def test_mask_transpose_symmetry():
    for w, h, r in [(5, 9, 3), (12, 7, 4.5), (20, 20, 8)]:
        a = compute_fov_mask(w, h, r)
        b = compute_fov_mask(h, w, r)
        np.testing.assert_array_equal(a.grid.T, b.grid)


def test_mask_central_point_symmetry():
    # mirror pixel of (i, j) about (W/2, H/2) is (W - i, H - j)
    for w, h, r in [(8, 8, 3), (9, 13, 5), (16, 10, 6.2)]:
        g = compute_fov_mask(w, h, r).grid
        for j in range(1, h):
            for i in range(1, w):
                assert g[j, i] == g[h - j, w - i]


def test_mask_monotone_in_radius():
    for r1, r2 in [(0, 1), (2, 2.5), (3, 10)]:
        a = compute_fov_mask(11, 11, r1).grid
        b = compute_fov_mask(11, 11, r2).grid
        assert np.all(a <= b)


def test_mask_validation():
    with pytest.raises(ConfigError):
        compute_fov_mask(0, 4, 1)
    with pytest.raises(ConfigError):
        compute_fov_mask(4, 4, -1)


# ---------------------------------------------------------------------------
# resampling primitives


def test_bilinear_exact_at_integer_coords():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 100, (6, 7))
    yy, xx = np.mgrid[0:6, 0:7].astype(float)
    np.testing.assert_array_equal(bilinear_sample(img, yy, xx), img)


def test_bilinear_midpoint_averages():
    img = np.array([[0.0, 10.0], [20.0, 30.0]])
    assert bilinear_sample(img, np.array(0.0), np.array(0.5)) == pytest.approx(5.0)
    assert bilinear_sample(img, np.array(0.5), np.array(0.5)) == pytest.approx(15.0)


def test_bilinear_fill_outside():
    img = np.ones((4, 4))
    v = bilinear_sample(img, np.array([-1.0, 2.0]), np.array([2.0, 9.0]), fill=-7.0)
    np.testing.assert_array_equal(v, [-7.0, -7.0])


def test_resize_identity_when_sizes_match():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1000, (9, 5))
    np.testing.assert_array_equal(resize_bilinear(img, 9, 5), img)


def test_resize_preserves_constants():
    out = resize_bilinear(np.full((8, 8), 42.0), 20, 12)
    np.testing.assert_allclose(out, 42.0, atol=1e-9)


def test_rotate_zero_angle_is_identity():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1000, (10, 10))
    np.testing.assert_array_equal(rotate_image(img, 0.0), img)


def test_rotate_quarter_turn_moves_spike():
    img = np.zeros((16, 16))
    img[8, 12] = 100.0  # at center (8, 8) + (dx=4, dy=0)
    out = rotate_image(img, np.pi / 2)
    assert out[12, 8] == pytest.approx(100.0, abs=1e-9)  # lands at (dx=0, dy=4)
    assert out[8, 12] == pytest.approx(0.0, abs=1e-9)


def test_rotate_round_trip_restores_smooth_content():
    jj, ii = np.mgrid[0:32, 0:32].astype(float)
    img = 100.0 + 50.0 * np.sin(2 * np.pi * ii / 20.0) * np.cos(2 * np.pi * jj / 24.0)
    back = rotate_image(rotate_image(img, 0.7), -0.7)
    inside = compute_fov_mask(32, 32, 10).grid == 1
    assert np.abs(back - img)[inside].max() < 2.5  # two bilinear passes


# ---------------------------------------------------------------------------
# polar round trip and extrapolation


def _smooth_image(h, w, seed=0):
    jj, ii = np.mgrid[0:h, 0:w].astype(np.float64)
    return 2000.0 + 800.0 * np.sin(2 * np.pi * ii / 115.0) * np.cos(2 * np.pi * jj / 90.0)


def test_polar_round_trip_mae_within_resampling_bound():
    img = _smooth_image(200, 200)
    r = 80.0
    back = from_polar(to_polar(img, r), r, 200, 200)
    inside = compute_fov_mask(200, 200, r - 1).grid == 1
    mae = np.abs(back - img)[inside].mean()
    assert mae <= 1.5


def test_polar_shapes_and_defaults():
    p = to_polar(np.zeros((64, 64)), 30.0)
    assert p.shape == (int(np.ceil(2 * np.pi * 30)), 30)
    p2 = to_polar(np.zeros((64, 64)), 30.0, angular_samples=90, radial_samples=45)
    assert p2.shape == (90, 45)
    with pytest.raises(ConfigError):
        to_polar(np.zeros((64, 64)), 30.0, radial_samples=20)


def test_extrapolate_constant_stays_constant():
    f = make_frame(np.full((64, 64), 1234, np.uint16), 30)
    out = circular_extrapolate(f)
    np.testing.assert_array_equal(out.raw, f.raw)


def test_extrapolate_copies_interior_bit_exactly():
    rng = np.random.default_rng(5)
    raw = rng.integers(0, 65536, (64, 64), dtype=np.uint16)
    f = make_frame(raw, 28)
    out = circular_extrapolate(f)
    inside = compute_fov_mask(64, 64, 28).grid == 1
    np.testing.assert_array_equal(out.raw[inside], raw[inside])
    assert out.raw.shape == raw.shape and out.raw.dtype == np.uint16


def test_extrapolate_is_idempotent_on_interior():
    rng = np.random.default_rng(6)
    raw = rng.integers(0, 65536, (48, 48), dtype=np.uint16)
    f = make_frame(raw, 20)
    twice = circular_extrapolate(circular_extrapolate(f))
    inside = compute_fov_mask(48, 48, 20).grid == 1
    np.testing.assert_array_equal(twice.raw[inside], raw[inside])


def test_extrapolate_fills_dark_corners():
    raw = np.zeros((64, 64), np.uint16)
    inside = compute_fov_mask(64, 64, 30).grid == 1
    raw[inside] = 1000
    out = circular_extrapolate(make_frame(raw, 30))
    outside = ~inside
    assert np.median(out.raw[outside]) > 500  # mirrored content, not zeros


def test_extrapolate_mirrors_radial_ramp():
    # ramp f(rho) = rho; after mirroring, value at rho > r is 2r - rho
    h = w = 224
    r = 100.0
    jj, ii = np.mgrid[0:h, 0:w].astype(np.float64)
    rho = np.hypot(ii - w / 2.0, jj - h / 2.0)
    raw = np.clip(np.rint(rho), 0, 65535).astype(np.uint16)
    out = circular_extrapolate(make_frame(raw, r)).raw.astype(np.float64)
    # pixels at distance exactly 110 (integer right triangles on the grid)
    exact = np.isclose(rho, 110.0)
    assert exact.sum() >= 8
    assert np.abs(out[exact] - 90.0).max() <= 1.0
    # broader annulus against the analytic mirror, looser resampling bound
    ring = (rho >= 105) & (rho <= 140)
    assert np.abs(out[ring] - (2 * r - rho[ring])).max() <= 1.5


def test_extrapolate_geometry_errors():
    f = make_frame(np.zeros((64, 64), np.uint16), 40)
    with pytest.raises(GeometryError):
        circular_extrapolate(f)  # 40 > 64/2
    with pytest.raises(GeometryError):
        circular_extrapolate(make_frame(np.zeros((64, 32), np.uint16), 10))
    with pytest.raises(GeometryError):
        circular_extrapolate(make_frame(np.zeros((64, 64), np.uint16), 0))


# ---------------------------------------------------------------------------
# patch grid


def test_patch_grid_inscribed_circle_has_no_full_size_patch():
    mask = compute_fov_mask(64, 64, 32)
    assert len(extract_patch_grid(mask, 64, 64)) == 0


def test_patch_grid_plain_tiling_when_circle_covers_grid():
    mask = compute_fov_mask(8, 8, 10)
    grid = extract_patch_grid(mask, 4, 4)
    assert grid.origins == ((0, 0), (4, 0), (0, 4), (4, 4))


def test_patch_grid_matches_brute_force_corner_test():
    w = h = 576
    r, p, s = 270.0, 80, 40
    grid = extract_patch_grid(compute_fov_mask(w, h, r), p, s)
    brute = set()
    for y in range(0, h - p + 1, s):
        for x in range(0, w - p + 1, s):
            corners = [(x, y), (x + p - 1, y), (x, y + p - 1), (x + p - 1, y + p - 1)]
            if all(_inside(i, j, w, h, r) for i, j in corners):
                brute.add((x, y))
    assert set(grid.origins) == brute
    assert len(grid) == len(brute) > 20


def test_patch_grid_origins_sorted_row_major_and_unique():
    grid = extract_patch_grid(compute_fov_mask(100, 100, 45), 16, 8)
    assert len(set(grid.origins)) == len(grid.origins)
    keys = [(y, x) for x, y in grid.origins]
    assert keys == sorted(keys)


def test_patch_grid_every_patch_inside_circle():
    for r, p, s in [(45, 16, 8), (30, 10, 5), (50, 24, 24)]:
        mask = compute_fov_mask(100, 100, r)
        grid = extract_patch_grid(mask, p, s)
        assert len(grid) > 0
        for x, y in grid.origins:
            for i, j in [(x, y), (x + p - 1, y), (x, y + p - 1), (x + p - 1, y + p - 1)]:
                assert _inside(i, j, 100, 100, r)


def test_patch_grid_validation():
    mask = compute_fov_mask(8, 8, 4)
    with pytest.raises(ConfigError):
        extract_patch_grid(mask, 9, 1)
    with pytest.raises(ConfigError):
        extract_patch_grid(mask, 4, 0)


def test_extract_patches_cuts_at_origins():
    img = np.arange(64).reshape(8, 8)
    grid = extract_patch_grid(compute_fov_mask(8, 8, 10), 4, 4)
    patches = extract_patches(img, grid)
    assert patches.shape == (4, 4, 4)
    np.testing.assert_array_equal(patches[0], img[0:4, 0:4])
    np.testing.assert_array_equal(patches[3], img[4:8, 4:8])


# ---------------------------------------------------------------------------
# medians


def test_median_constant_frame():
    f = make_frame(np.full((32, 32), 500, np.uint16), 14)
    assert median_raw_value(f) == 500.0


def test_median_even_count_averages_central_pair():
    # 3x3 grid, r = 1: exactly the four pixels (1,1),(1,2),(2,1),(2,2)
    mask = compute_fov_mask(3, 3, 1)
    assert mask.count == 4
    raw = np.zeros((3, 3), np.uint16)
    raw[1, 1], raw[1, 2], raw[2, 1], raw[2, 2] = 1, 2, 3, 4
    assert median_raw_value(make_frame(raw, 1)) == 2.5


def test_median_robust_to_bright_vessel_streak():
    rng = np.random.default_rng(8)
    raw = np.full((100, 100), 100, np.uint16)
    inside = compute_fov_mask(100, 100, 45).grid == 1
    idx = np.argwhere(inside)
    streak = idx[rng.choice(len(idx), size=len(idx) // 100, replace=False)]
    raw[streak[:, 0], streak[:, 1]] = 65535
    assert median_raw_value(make_frame(raw, 45)) == 100.0


def test_in_fov_values_rejects_empty_mask():
    # odd dims put the center between pixels; tiny radius catches nothing
    f = make_frame(np.zeros((3, 3), np.uint16), 0.1)
    with pytest.raises(GeometryError):
        in_fov_values(f)


def test_median_histogram_single_frame_single_bin():
    f = make_frame(np.full((16, 16), 300, np.uint16), 7)
    hists = median_histogram([f], default_log_edges())
    h = hists["synthetic"]
    assert isinstance(h, SiteHistogram)
    assert h.underflow == 0.0
    assert h.counts.sum() == pytest.approx(1.0, abs=1e-9)
    assert (h.counts > 0).sum() == 1


def test_median_histogram_disjoint_sites_do_not_overlap():
    lo = [make_frame(np.full((16, 16), v, np.uint16), 7, frame_id=f"a{v}", site="siteA") for v in (40, 55, 60)]
    hi = [make_frame(np.full((16, 16), v, np.uint16), 7, frame_id=f"b{v}", site="siteB") for v in (2000, 2400)]
    hists = median_histogram(lo + hi, default_log_edges())
    overlap = np.minimum(hists["siteA"].counts, hists["siteB"].counts).sum()
    assert overlap == 0.0
    for h in hists.values():
        assert h.underflow + h.counts.sum() == pytest.approx(1.0, abs=1e-9)


def test_median_histogram_zero_median_goes_to_underflow():
    f = make_frame(np.zeros((16, 16), np.uint16), 7)
    h = median_histogram([f], default_log_edges())["synthetic"]
    assert h.underflow == 1.0
    assert h.counts.sum() == 0.0


def test_median_histogram_warns_on_empty_expected_site():
    f = make_frame(np.full((16, 16), 10, np.uint16), 7)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        hists = median_histogram([f], default_log_edges(), sites=["synthetic", "ghost"])
    assert "ghost" not in hists and "synthetic" in hists
    assert any("ghost" in str(w.message) for w in rec)


def test_median_histogram_validates_edges():
    f = make_frame(np.full((16, 16), 10, np.uint16), 7)
    with pytest.raises(ConfigError):
        median_histogram([f], np.array([0.0, 1.0, 2.0]))
    with pytest.raises(ConfigError):
        median_histogram([f], np.array([5.0, 4.0]))
    with pytest.raises(ConfigError):
        default_log_edges(low=0)
