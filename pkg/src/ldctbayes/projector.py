"""Fan-beam CT forward model, its adjoint, and filtered backprojection.

Coordinates are in millimetres with the isocenter at the origin. Pixel
``(r, c)`` of an ``H x W`` image sits at ``x = (c - (W-1)/2) * ps`` and
``y = ((H-1)/2 - r) * ps``, so row 0 is the top of the image. At view angle
``beta`` the source is at ``SID * (cos beta, sin beta)`` and the flat detector
is centred at ``-(SDD - SID) * (cos beta, sin beta)`` with its bins laid out
along ``(-sin beta, cos beta)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels


class GeometryError(ValueError):
    """Raised for inconsistent scanner/image/sinogram dimensions."""


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ImageGrid:
    """2D attenuation map (per mm) on a square pixel lattice."""

    values: np.ndarray
    pixel_size_mm: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2 or vals.shape[0] < 1 or vals.shape[1] < 1:
            raise GeometryError(f"image must be a non-empty 2D array, got shape {vals.shape}")
        if not self.pixel_size_mm > 0:
            raise GeometryError("pixel_size_mm must be positive")
        _require_finite(vals, "image")
        object.__setattr__(self, "values", vals)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FanBeamGeometry:
    """Circular-orbit fan-beam scanner with a flat, equispaced detector."""

    num_views: int = 600
    num_bins: int = 512
    bin_size_mm: float = 1.0
    src_to_det_mm: float = 1000.0
    src_to_iso_mm: float = 500.0
    angular_span_deg: float = 360.0
    start_angle_deg: float = 0.0

    def __post_init__(self):
        if self.num_views < 1 or self.num_bins < 1:
            raise GeometryError("num_views and num_bins must be >= 1")
        if not self.bin_size_mm > 0:
            raise GeometryError("bin_size_mm must be positive")
        if not (self.src_to_det_mm > self.src_to_iso_mm > 0):
            raise GeometryError("need src_to_det_mm > src_to_iso_mm > 0")
        if not self.angular_span_deg > 0:
            raise GeometryError("angular_span_deg must be positive")

    @property
    def angles(self) -> np.ndarray:
        """View angles in radians, evenly spaced over the angular span."""
        step = np.deg2rad(self.angular_span_deg) / self.num_views
        return np.deg2rad(self.start_angle_deg) + step * np.arange(self.num_views)

    @property
    def bin_offsets(self) -> np.ndarray:
        """Detector bin centres along the panel, in mm."""
        return (np.arange(self.num_bins) - 0.5 * (self.num_bins - 1)) * self.bin_size_mm

    @property
    def magnification(self) -> float:
        return self.src_to_det_mm / self.src_to_iso_mm

    @property
    def fov_radius_mm(self) -> float:
        """Radius of the circle at the isocenter seen by every view."""
        half = 0.5 * self.num_bins * self.bin_size_mm
        return self.src_to_iso_mm * half / np.hypot(half, self.src_to_det_mm)

    def fit_pixel_size(self, n: int) -> float:
        """Pixel size that makes an ``n x n`` grid inscribe the FOV circle."""
        return 2.0 * self.fov_radius_mm / n

    def to_dict(self) -> dict:
        return {
            "num_views": self.num_views,
            "num_bins": self.num_bins,
            "bin_size_mm": self.bin_size_mm,
            "src_to_det_mm": self.src_to_det_mm,
            "src_to_iso_mm": self.src_to_iso_mm,
            "angular_span_deg": self.angular_span_deg,
            "start_angle_deg": self.start_angle_deg,
        }

    @cached_property
    def _rays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        beta = self.angles[:, None]
        t = self.bin_offsets[None, :]
        cos_b, sin_b = np.cos(beta), np.sin(beta)
        src_x = np.broadcast_to(self.src_to_iso_mm * cos_b, (self.num_views, self.num_bins))
        src_y = np.broadcast_to(self.src_to_iso_mm * sin_b, (self.num_views, self.num_bins))
        back = self.src_to_det_mm - self.src_to_iso_mm
        det_x = -back * cos_b - t * sin_b
        det_y = -back * sin_b + t * cos_b
        return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in (src_x, src_y, det_x, det_y))


@dataclass(frozen=True)
class Sinogram:
    """Line integrals indexed by (view, bin)."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise GeometryError(f"sinogram must be 2D, got shape {vals.shape}")
        _require_finite(vals, "sinogram")
        object.__setattr__(self, "values", vals)

    @property
    def num_views(self) -> int:
        return self.values.shape[0]

    @property
    def num_bins(self) -> int:
        return self.values.shape[1]

    def check(self, geom: FanBeamGeometry) -> None:
        if self.values.shape != (geom.num_views, geom.num_bins):
            raise GeometryError(
                f"sinogram shape {self.values.shape} does not match geometry "
                f"({geom.num_views}, {geom.num_bins})"
            )


def _check_footprint(shape, pixel_size: float, geom: FanBeamGeometry) -> None:
    half_diag = 0.5 * pixel_size * np.hypot(*shape)
    if half_diag >= geom.src_to_iso_mm:
        raise GeometryError("image extends past the source orbit")


class FanBeamOperator:
    """Matrix-free system matrix ``A`` for a fixed geometry and image grid.

    ``forward`` and ``adjoint`` act on plain float64 arrays; this is the
    linear-operator interface used by the solvers and the training loss.
    """

    def __init__(self, geom: FanBeamGeometry, shape: tuple[int, int], pixel_size_mm: float):
        self.geom = geom
        self.shape = (int(shape[0]), int(shape[1]))
        self.pixel_size_mm = float(pixel_size_mm)
        _check_footprint(self.shape, self.pixel_size_mm, geom)
        self.sino_shape = (geom.num_views, geom.num_bins)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != self.shape:
            raise GeometryError(f"image shape {x.shape} != operator shape {self.shape}")
        out = np.zeros(self.sino_shape)
        return _kernels.joseph_forward(x, self.pixel_size_mm, *self.geom._rays, out)

    def adjoint(self, s: np.ndarray) -> np.ndarray:
        s = np.ascontiguousarray(s, dtype=np.float64)
        if s.shape != self.sino_shape:
            raise GeometryError(f"sinogram shape {s.shape} != operator shape {self.sino_shape}")
        out = np.zeros(self.shape)
        return _kernels.joseph_back(s, self.pixel_size_mm, *self.geom._rays, out)

    def densify(self) -> np.ndarray:
        """Dense ``(rays, pixels)`` matrix built from unit-pixel projections."""
        n = self.shape[0] * self.shape[1]
        mat = np.empty((self.sino_shape[0] * self.sino_shape[1], n))
        e = np.zeros(n)
        for j in range(n):
            e[j] = 1.0
            mat[:, j] = self.forward(e.reshape(self.shape)).ravel()
            e[j] = 0.0
        return mat

    def norm_estimate(self, iters: int = 30, seed: int = 0) -> float:
        """Largest singular value of ``A`` by power iteration."""
        x = np.random.default_rng(seed).standard_normal(self.shape)
        sigma = 0.0
        for _ in range(iters):
            x = self.adjoint(self.forward(x))
            sigma = np.sqrt(np.linalg.norm(x))
            x /= np.linalg.norm(x)
        return float(sigma)


def forward_project(image: ImageGrid, geom: FanBeamGeometry) -> Sinogram:
    """Joseph line integrals of ``image`` along every ray of ``geom``."""
    op = FanBeamOperator(geom, image.shape, image.pixel_size_mm)
    return Sinogram(op.forward(image.values))


def back_project(sino: Sinogram, geom: FanBeamGeometry, shape: tuple[int, int],
                 pixel_size_mm: float) -> ImageGrid:
    """Exact transpose of :func:`forward_project`."""
    sino.check(geom)
    op = FanBeamOperator(geom, shape, pixel_size_mm)
    return ImageGrid(op.adjoint(sino.values), pixel_size_mm)


def ramp_filter_response(num_bins: int, spacing: float, window: str = "ramp") -> np.ndarray:
    """Frequency response of the band-limited ramp filter on a padded grid.

    Built from the sampled spatial Ram-Lak kernel so the DC term is correct.
    Returns an array of length ``P >= 2 * num_bins`` (a power of two).
    """
    pad = 1 << int(np.ceil(np.log2(2 * num_bins)))
    n = np.concatenate([np.arange(0, pad // 2), np.arange(-pad // 2, 0)])
    h = np.zeros(pad)
    h[0] = 1.0 / (4.0 * spacing**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (np.pi * n[odd] * spacing) ** 2
    resp = spacing * np.real(np.fft.fft(h))
    if window == "hann":
        f = np.fft.fftfreq(pad)
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ramp":
        raise ValueError(f"unknown filter {window!r}; expected 'ramp' or 'hann'")
    return resp


def fbp_reconstruct(sino: Sinogram, geom: FanBeamGeometry, shape: tuple[int, int],
                    pixel_size_mm: float, filter: str = "ramp") -> ImageGrid:
    """Equispaced flat-detector fan-beam FBP over a full 360 degree orbit.

    The detector is rescaled to a virtual panel through the isocenter; each
    view is cosine weighted, ramp filtered (half weight for the doubled
    coverage of a full orbit), and backprojected with the ``1/U^2`` distance
    weight.
    """
    sino.check(geom)
    if not np.isclose(geom.angular_span_deg, 360.0):
        raise GeometryError("fan-beam FBP here requires a 360 degree orbit")
    sid = geom.src_to_iso_mm
    tau = geom.bin_size_mm / geom.magnification
    t_virt = geom.bin_offsets / geom.magnification
    q = sino.values * (sid / np.sqrt(sid**2 + t_virt**2))[None, :]

    resp = ramp_filter_response(geom.num_bins, tau, filter)
    pad = resp.size
    filtered = np.real(np.fft.ifft(np.fft.fft(q, n=pad, axis=1) * resp[None, :], axis=1))
    filtered = 0.5 * filtered[:, : geom.num_bins]

    h, w = shape
    xs = (np.arange(w) - 0.5 * (w - 1)) * pixel_size_mm
    ys = (0.5 * (h - 1) - np.arange(h)) * pixel_size_mm
    px, py = np.meshgrid(xs, ys)
    out = np.zeros(shape)
    d_beta = np.deg2rad(geom.angular_span_deg) / geom.num_views
    centre = 0.5 * (geom.num_bins - 1)
    for v, beta in enumerate(geom.angles):
        cb, sb = np.cos(beta), np.sin(beta)
        dist = sid - (px * cb + py * sb)
        t = sid * (-px * sb + py * cb) / dist
        f = t / tau + centre
        i0 = np.floor(f).astype(np.int64)
        w1 = f - i0
        row = filtered[v]
        lo = np.where((i0 >= 0) & (i0 < geom.num_bins), row[np.clip(i0, 0, geom.num_bins - 1)], 0.0)
        hi = np.where((i0 + 1 >= 0) & (i0 + 1 < geom.num_bins),
                      row[np.clip(i0 + 1, 0, geom.num_bins - 1)], 0.0)
        out += ((1.0 - w1) * lo + w1 * hi) * (sid / dist) ** 2
    return ImageGrid(out * d_beta, pixel_size_mm)


def fov_mask(shape: tuple[int, int], pixel_size_mm: float, geom: FanBeamGeometry) -> np.ndarray:
    """Boolean mask of pixels whose centres lie inside the scan FOV circle."""
    h, w = shape
    xs = (np.arange(w) - 0.5 * (w - 1)) * pixel_size_mm
    ys = (0.5 * (h - 1) - np.arange(h)) * pixel_size_mm
    px, py = np.meshgrid(xs, ys)
    return np.hypot(px, py) <= geom.fov_radius_mm
