"""Digital phantoms and the low-dose transmission measurement model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projector import FanBeamGeometry, ImageGrid, Sinogram, forward_project

PHANTOM_KINDS = ("shepp_logan", "disk_grid", "piecewise_blobs")

# Count floor applied before the log so that zero/negative counts stay finite.
COUNT_FLOOR = 0.1

# Modified (high-contrast) Shepp-Logan table:
# value, semi-axis a, semi-axis b, centre x, centre y, rotation (deg).
_SHEPP_LOGAN = np.array([
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
])


@dataclass(frozen=True)
class DoseModel:
    """Incident photons per ray and electronic noise variance (counts^2)."""

    intensity: float | np.ndarray = 1e3
    sigma_e2: float = 10.0

    def __post_init__(self):
        if not np.all(np.asarray(self.intensity) > 0):
            raise ValueError("intensity must be positive")
        if not self.sigma_e2 >= 0:
            raise ValueError("sigma_e2 must be non-negative")


@dataclass(frozen=True)
class RawCounts:
    """Noisy detector counts, same layout as a sinogram."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2 or not np.all(np.isfinite(vals)):
            raise ValueError("raw counts must be a finite 2D array")
        object.__setattr__(self, "values", vals)


def _unit_coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) - 0.5 * (size - 1)) / (0.5 * size)
    return np.meshgrid(c, -c)


def _ellipse(x, y, a, b, x0, y0, phi_deg):
    phi = np.deg2rad(phi_deg)
    dx, dy = x - x0, y - y0
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _shepp_logan(size: int) -> np.ndarray:
    x, y = _unit_coords(size)
    img = np.zeros((size, size))
    for val, a, b, x0, y0, phi in _SHEPP_LOGAN:
        img[_ellipse(x, y, a, b, x0, y0, phi)] += val
    return np.clip(img, 0.0, 1.0)


def _disk_grid(size: int) -> np.ndarray:
    x, y = _unit_coords(size)
    img = np.where(x**2 + y**2 <= 0.85**2, 0.5, 0.0)
    levels = [0.0, 0.25, 0.75, 1.0, 0.35, 0.65, 0.9, 0.1, 0.6]
    radii = [0.16, 0.12, 0.09]
    k = 0
    for j, cy in enumerate((0.42, 0.0, -0.42)):
        for cx in (-0.42, 0.0, 0.42):
            r = radii[j]
            img[(x - cx) ** 2 + (y - cy) ** 2 <= r**2] = levels[k]
            k += 1
    return img


def _piecewise_blobs(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x, y = _unit_coords(size)
    img = np.where(_ellipse(x, y, 0.85, 0.75, 0.0, 0.0, 0.0), 0.4, 0.0)
    levels = np.array([0.0, 0.2, 0.6, 0.8])
    n_shapes = int(rng.integers(6, 10))
    for _ in range(n_shapes):
        r = 0.55 * np.sqrt(rng.uniform())
        t = rng.uniform(0, 2 * np.pi)
        cx, cy = r * np.cos(t), 0.85 * r * np.sin(t)
        a, b = rng.uniform(0.06, 0.22, size=2)
        val = rng.choice(levels)
        if rng.uniform() < 0.5:
            mask = _ellipse(x, y, a, b, cx, cy, rng.uniform(0, 180))
        else:
            mask = (np.abs(x - cx) <= a) & (np.abs(y - cy) <= b)
        img[mask] = val
    # One full-contrast insert keeps the histogram support fixed at [0, 1].
    t = rng.uniform(0, 2 * np.pi)
    cx, cy = 0.3 * np.cos(t), 0.3 * np.sin(t)
    img[_ellipse(x, y, 0.12, 0.09, cx, cy, rng.uniform(0, 180))] = 1.0
    return img


def make_phantom(size: int, kind: str = "shepp_logan", seed: int = 0,
                 attenuation_max: float = 0.02, pixel_size_mm: float = 1.0,
                 oversample: int = 4) -> ImageGrid:
    """Piecewise-constant test object with values in ``[0, attenuation_max]``.

    The phantom's unit circle maps onto the full grid, so choosing
    ``pixel_size_mm = geom.fit_pixel_size(size)`` inscribes it in the FOV.
    Each pixel holds the average over an ``oversample x oversample`` block of
    point samples (pixel-area integration).
    """
    if size < 16:
        raise ValueError("phantom size must be >= 16")
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    fine = size * oversample
    if kind == "shepp_logan":
        img = _shepp_logan(fine)
    elif kind == "disk_grid":
        img = _disk_grid(fine)
    elif kind == "piecewise_blobs":
        img = _piecewise_blobs(fine, seed)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {PHANTOM_KINDS}")
    img = img.reshape(size, oversample, size, oversample).mean(axis=(1, 3))
    return ImageGrid(img * attenuation_max, pixel_size_mm)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator used for all measurement noise."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def mean_counts(line_integrals: np.ndarray, dose: DoseModel) -> np.ndarray:
    """Expected photon counts ``I * exp(-l)``; underflow clamps to 0."""
    with np.errstate(under="ignore", over="ignore"):
        return np.asarray(dose.intensity) * np.exp(-np.asarray(line_integrals, dtype=np.float64))


def draw_counts(mean: np.ndarray, sigma_e2: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts plus additive Gaussian electronic noise."""
    counts = rng.poisson(mean).astype(np.float64)
    if sigma_e2 > 0:
        counts += rng.normal(0.0, np.sqrt(sigma_e2), size=counts.shape)
    return counts


def simulate_counts(image: ImageGrid, geom: FanBeamGeometry, dose: DoseModel,
                    seed: int) -> RawCounts:
    """Noisy detector counts for ``image`` scanned with ``geom`` at ``dose``."""
    ideal = forward_project(image, geom).values
    mean = np.broadcast_to(mean_counts(ideal, dose), ideal.shape)
    return RawCounts(draw_counts(mean, dose.sigma_e2, make_rng(seed)))


def log_transform(raw: RawCounts, dose: DoseModel) -> Sinogram:
    """``y = ln(I / max(counts, 0.1))``."""
    intensity = np.asarray(dose.intensity, dtype=np.float64)
    if intensity.ndim and np.broadcast_shapes(intensity.shape, raw.values.shape) != raw.values.shape:
        raise ValueError("per-bin intensity does not match raw count dims")
    return Sinogram(np.log(intensity / np.maximum(raw.values, COUNT_FLOOR)))
