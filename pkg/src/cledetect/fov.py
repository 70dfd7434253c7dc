"""Circular field-of-view geometry.

The validity mask, polar-mirror extrapolation of the dark corners,
patch-grid extraction inside the circle, and median-raw-value
statistics. Pixel centers sit at integer coordinates and the circle
center is (W/2, H/2) exactly, so even-sized images have their center on
a pixel and the grid is NOT symmetric about it; the boundary
(distance == r) counts as inside.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError
from .frame import Frame

RAW_MAX = 65535


@dataclass(frozen=True, eq=False)
class FovMask:
    """Binary validity map: grid[j, i] == 1 iff pixel (i, j) lies in the circle."""

    width: int
    height: int
    radius: float
    grid: np.ndarray  # (H, W) uint8

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    @property
    def is_empty(self) -> bool:
        return self.count == 0


def compute_fov_mask(width: int, height: int, radius: float) -> FovMask:
    """Mask of pixels (i, j) with (i - W/2)^2 + (j - H/2)^2 <= r^2.

    i runs over the width (columns), j over the height (rows); equality
    counts as inside.
    """
    if width < 1 or height < 1:
        raise ConfigError(f"mask needs positive dimensions, got {width}x{height}")
    if radius < 0:
        raise ConfigError(f"negative radius {radius}")
    ii = np.arange(width, dtype=np.float64) - width / 2.0
    jj = np.arange(height, dtype=np.float64) - height / 2.0
    dist2 = jj[:, None] ** 2 + ii[None, :] ** 2
    grid = (dist2 <= float(radius) ** 2).astype(np.uint8)
    return FovMask(width, height, float(radius), grid)


def frame_mask(frame: Frame) -> FovMask:
    return compute_fov_mask(frame.width, frame.height, frame.fov_radius)


def in_fov_values(frame: Frame) -> np.ndarray:
    """1-D array of the raw values inside the circle."""
    mask = frame_mask(frame)
    if mask.is_empty:
        raise GeometryError(f"frame {frame.frame_id}: empty field of view (r={frame.fov_radius})")
    return frame.raw[mask.grid == 1]


# ---------------------------------------------------------------------------
# resampling primitives


def bilinear_sample(image: np.ndarray, yy: np.ndarray, xx: np.ndarray, fill: float | None = None) -> np.ndarray:
    """Sample ``image`` at continuous (row, col) positions.

    ``fill=None`` clamps coordinates to the border; a numeric fill is
    used for samples outside [0, H-1] x [0, W-1]. Output is float64.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if h < 2 or w < 2:
        raise GeometryError("bilinear sampling needs at least a 2x2 image")
    yc = np.clip(yy, 0.0, h - 1.0)
    xc = np.clip(xx, 0.0, w - 1.0)
    y0 = np.minimum(np.floor(yc).astype(np.int64), h - 2)
    x0 = np.minimum(np.floor(xc).astype(np.int64), w - 2)
    fy = yc - y0
    fx = xc - x0
    v = (
        img[y0, x0] * (1 - fy) * (1 - fx)
        + img[y0, x0 + 1] * (1 - fy) * fx
        + img[y0 + 1, x0] * fy * (1 - fx)
        + img[y0 + 1, x0 + 1] * fy * fx
    )
    if fill is not None:
        inside = (yy >= 0) & (yy <= h - 1) & (xx >= 0) & (xx <= w - 1)
        v = np.where(inside, v, float(fill))
    return v


def resize_bilinear(image: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Half-pixel-center bilinear resize; identity when sizes match."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    yy = (np.arange(out_height, dtype=np.float64) + 0.5) * (h / out_height) - 0.5
    xx = (np.arange(out_width, dtype=np.float64) + 0.5) * (w / out_width) - 0.5
    return bilinear_sample(img, yy[:, None], xx[None, :])


def rotate_image(image: np.ndarray, angle: float, fill: float = 0.0) -> np.ndarray:
    """Rotate by ``angle`` radians about the circle center (W/2, H/2).

    Inverse-mapped bilinear resampling; positions that fall outside the
    source take ``fill``. Content inside a centered circle stays inside
    it, so the field of view is preserved. Output is float64.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    cx, cy = w / 2.0, h / 2.0
    jj, ii = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = ii - cx
    dy = jj - cy
    c, s = np.cos(angle), np.sin(angle)
    xs = cx + c * dx + s * dy
    ys = cy - s * dx + c * dy
    return bilinear_sample(img, ys, xs, fill=fill)


# ---------------------------------------------------------------------------
# polar transform and circular extrapolation


def default_angular_samples(radius: float) -> int:
    return int(np.ceil(2.0 * np.pi * radius))


def default_radial_samples(radius: float) -> int:
    return int(np.ceil(radius))


def to_polar(image: np.ndarray, radius: float, angular_samples: int | None = None, radial_samples: int | None = None) -> np.ndarray:
    """Linear-to-polar resampling of the disc of ``radius`` about (W/2, H/2).

    Output is (angular_samples, radial_samples) float64; row a holds the
    ray at angle 2*pi*a/A, column k the radius (k + 0.5) * radius / R.
    The half-sample offset places the outermost sample half a step
    inside the circle, which makes the mirror below exact about r.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if radius <= 0:
        raise GeometryError(f"polar transform needs a positive radius, got {radius}")
    n_ang = angular_samples or default_angular_samples(radius)
    n_rad = radial_samples or default_radial_samples(radius)
    if n_rad < radius:
        raise ConfigError(f"radialSamples {n_rad} < radius {radius}: undersampled mirror band")
    cx, cy = w / 2.0, h / 2.0
    theta = np.arange(n_ang, dtype=np.float64) * (2.0 * np.pi / n_ang)
    rho = (np.arange(n_rad, dtype=np.float64) + 0.5) * (radius / n_rad)
    xx = cx + rho[None, :] * np.cos(theta)[:, None]
    yy = cy + rho[None, :] * np.sin(theta)[:, None]
    return bilinear_sample(img, yy, xx)


def from_polar(polar: np.ndarray, radial_extent: float, width: int, height: int) -> np.ndarray:
    """Polar-to-linear resampling onto a (height, width) grid.

    ``polar`` columns are cell-centered samples spanning [0, radial_extent].
    Interpolation is bilinear with angular wraparound; radii beyond the
    band clamp to its outermost sample. Output is float64.
    """
    p = np.asarray(polar, dtype=np.float64)
    n_ang, n_rad = p.shape
    cx, cy = width / 2.0, height / 2.0
    jj, ii = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = ii - cx
    dy = jj - cy
    rho = np.hypot(dx, dy)
    a = np.mod(np.arctan2(dy, dx), 2.0 * np.pi) * (n_ang / (2.0 * np.pi))
    m = rho * (n_rad / radial_extent) - 0.5
    a0 = np.floor(a).astype(np.int64) % n_ang
    fa = a - np.floor(a)
    a1 = (a0 + 1) % n_ang
    mc = np.clip(m, 0.0, n_rad - 1.0)
    m0 = np.minimum(np.floor(mc).astype(np.int64), n_rad - 2)
    fm = mc - m0
    return (
        p[a0, m0] * (1 - fa) * (1 - fm)
        + p[a1, m0] * fa * (1 - fm)
        + p[a0, m0 + 1] * (1 - fa) * fm
        + p[a1, m0 + 1] * fa * fm
    )


def circular_extrapolate(
    frame: Frame,
    radius: float | None = None,
    angular_samples: int | None = None,
    radial_samples: int | None = None,
) -> Frame:
    """Fill the dark corners by mirroring the image radially about the circle.

    Steps: resample the disc to polar coordinates, concatenate with the
    radially flipped copy (value at r + d becomes the value at r - d),
    resample back to the pixel grid, then overwrite everything inside
    the circle with the original pixels. In-circle content is therefore
    bit-exact; only the exterior is synthesized. Corners farther than 2r
    from the center clamp to the outer edge of the mirror band.
    """
    r = float(frame.fov_radius if radius is None else radius)
    h, w = frame.raw.shape
    if h != w:
        raise GeometryError(f"frame {frame.frame_id}: extrapolation expects a square frame, got {w}x{h}")
    if r <= 0:
        raise GeometryError(f"frame {frame.frame_id}: radius must be positive, got {r}")
    if r > min(w, h) / 2.0:
        raise GeometryError(f"frame {frame.frame_id}: radius {r} exceeds half the frame size {min(w, h) / 2}")
    polar = to_polar(frame.raw, r, angular_samples, radial_samples)
    mirrored = np.concatenate([polar, polar[:, ::-1]], axis=1)
    out = from_polar(mirrored, 2.0 * r, w, h)
    out = np.clip(np.rint(out), 0, RAW_MAX).astype(np.uint16)
    inside = compute_fov_mask(w, h, r).grid == 1
    out[inside] = frame.raw[inside]
    return dataclasses.replace(frame, raw=out, fov_radius=r)


# ---------------------------------------------------------------------------
# patch grid


@dataclass(frozen=True)
class PatchGrid:
    """Top-left (x, y) origins of patches lying fully inside the circle."""

    patch_size: int
    stride: int
    origins: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.origins)


def extract_patch_grid(mask: FovMask, patch_size: int, stride: int) -> PatchGrid:
    """Stride-lattice patch origins whose four corner pixels are all in FOV.

    Origins are unique and ordered row-major (y, then x). An empty result
    is valid; the caller decides whether that is an error.
    """
    if patch_size < 1 or patch_size > min(mask.width, mask.height):
        raise ConfigError(f"patch size {patch_size} does not fit {mask.width}x{mask.height}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    grid = mask.grid
    p = patch_size
    origins = []
    for y in range(0, mask.height - p + 1, stride):
        for x in range(0, mask.width - p + 1, stride):
            if grid[y, x] and grid[y, x + p - 1] and grid[y + p - 1, x] and grid[y + p - 1, x + p - 1]:
                origins.append((x, y))
    return PatchGrid(patch_size, stride, tuple(origins))


def extract_patches(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack of (N, p, p) patches cut at the grid origins."""
    p = grid.patch_size
    return np.stack([image[y : y + p, x : x + p] for x, y in grid.origins]) if grid.origins else np.zeros((0, p, p), dtype=np.asarray(image).dtype)


# ---------------------------------------------------------------------------
# median statistics


def median_raw_value(frame: Frame) -> float:
    """Median raw value over in-circle pixels; even counts average the
    central pair. Robust to small bright structures such as vessels."""
    return float(np.median(in_fov_values(frame)))


def default_log_edges(low: float = 1.0, high: float = float(RAW_MAX), nbins: int = 32) -> np.ndarray:
    """Log-spaced histogram edges covering the raw value range."""
    if low <= 0 or high <= low:
        raise ConfigError(f"log edges need 0 < low < high, got [{low}, {high}]")
    return np.geomspace(low, high, nbins + 1)


@dataclass(frozen=True, eq=False)
class SiteHistogram:
    site: str
    edges: np.ndarray
    counts: np.ndarray  # normalized, len(edges) - 1
    underflow: float  # normalized mass of zero-median frames
    n_frames: int


def median_histogram(frames, edges, sites=None) -> dict:
    """Per-site normalized histograms of frame medians over log-spaced edges.

    Zero medians go to a dedicated underflow bucket (log bins cannot hold
    them); positive medians are clipped into the edge range. Each site's
    underflow + counts sums to 1. ``sites`` optionally names the expected
    groups; an expected site with no frames is omitted with a warning.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0) or edges[0] <= 0:
        raise ConfigError("edges must be an increasing positive 1-D array")
    groups: dict = {site: [] for site in (sites or [])}
    for f in frames:
        groups.setdefault(f.site, []).append(median_raw_value(f))
    out = {}
    for site, meds in groups.items():
        if not meds:
            warnings.warn(f"site {site}: no frames, omitted from histogram")
            continue
        meds = np.asarray(meds, dtype=np.float64)
        zero = int((meds == 0).sum())
        pos = np.clip(meds[meds > 0], edges[0], edges[-1])
        counts, _ = np.histogram(pos, bins=edges)
        n = len(meds)
        out[site] = SiteHistogram(site, edges, counts / n, zero / n, n)
    return out
