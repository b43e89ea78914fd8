"""Metal artifact simulation: parallel-beam projection, FBP, beam hardening.

The pipeline inserts metal into an artifact-free image, projects it with a
polychromatic spectrum (per-ray log of the spectrum-weighted transmitted
intensity), and reconstructs with Ram-Lak filtered back-projection. The
log of a weighted sum of exponentials is sub-linear in the line integrals,
which is exactly the beam-hardening deficit that produces streaks around
dense inserts.

All randomness flows through explicit numpy Generators, so every dataset
is reproducible from its seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .arrays import HU_CLAMP_HI, HU_CLAMP_LO, CTImage

RAY_STEP_PX = 0.5
DEFAULT_N_ANGLES = 180
DEFAULT_PHOTON_COUNT = 2.0e5
MIN_METAL_PIXELS = 40


def _odd_ceil(x: float) -> int:
    n = int(math.ceil(x))
    return n if n % 2 == 1 else n + 1


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam geometry: evenly spaced angles over [0, pi).

    ``n_bins`` defaults to the smallest odd integer covering the image
    diagonal so that a detector bin sits exactly on the rotation center.
    ``image_size`` is kept so reconstruction can restore the original shape.
    """

    image_size: int
    n_angles: int = DEFAULT_N_ANGLES
    n_bins: int = 0

    def __post_init__(self):
        if self.image_size < 2:
            raise ValueError("image_size must be >= 2")
        if self.n_angles < 1:
            raise ValueError("n_angles must be positive")
        if self.n_bins <= 0:
            object.__setattr__(self, "n_bins", _odd_ceil(self.image_size * math.sqrt(2.0)))

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles, dtype=np.float64) * (math.pi / self.n_angles)

    @property
    def bin_offsets(self) -> np.ndarray:
        return np.arange(self.n_bins, dtype=np.float64) - (self.n_bins - 1) / 2.0


@dataclass(frozen=True)
class Sinogram:
    """Line integrals, one row per projection angle."""

    values: np.ndarray
    geometry: ProjectionGeometry

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.shape != (self.geometry.n_angles, self.geometry.n_bins):
            raise ValueError(
                f"sinogram shape {vals.shape} does not match geometry "
                f"({self.geometry.n_angles}, {self.geometry.n_bins})"
            )
        if not np.isfinite(vals).all():
            raise ValueError("sinogram contains NaN or Inf")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Spectrum:
    """Discrete polychromatic X-ray spectrum."""

    energies_keV: tuple[float, ...] = (50.0, 80.0, 120.0)
    weights: tuple[float, ...] = (0.3, 0.45, 0.25)

    def __post_init__(self):
        if len(self.energies_keV) != len(self.weights) or not self.energies_keV:
            raise ValueError("energies and weights must be non-empty and equal length")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")
        if abs(sum(self.weights) - 1.0) > 1e-6:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights)}")
        if any(b <= a for a, b in zip(self.energies_keV, self.energies_keV[1:])):
            raise ValueError("energies must be strictly increasing")

    def __len__(self) -> int:
        return len(self.energies_keV)


@dataclass(frozen=True)
class MetalMask:
    """Binary metal footprint plus the HU value painted into the output."""

    mask: np.ndarray
    metal_hu: float = 3000.0

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be 2D")
        if self.metal_hu < 2500.0:
            raise ValueError("metal_hu must be >= 2500 (metal threshold convention)")
        object.__setattr__(self, "mask", m)

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class MaterialModel:
    """Energy dependence of tissue and metal attenuation (per-pixel units).

    Tissue scales like water with a mild inverse power of energy; metal
    follows a much steeper curve so polychromatic rays through it harden.
    Constants are placeholders tuned for visible streaks, not any specific
    alloy.
    """

    mu_water_per_px: float = 0.019
    tissue_exponent: float = 0.45
    metal_mu_per_px: float = 0.12
    metal_exponent: float = 3.0
    ref_energy_keV: float = 80.0

    def hu_to_mu(self, hu: np.ndarray) -> np.ndarray:
        mu = self.mu_water_per_px * (1.0 + np.asarray(hu, dtype=np.float64) / 1000.0)
        return np.clip(mu, 0.0, None)

    def mu_to_hu(self, mu: np.ndarray) -> np.ndarray:
        return 1000.0 * (np.asarray(mu, dtype=np.float64) - self.mu_water_per_px) / self.mu_water_per_px

    def tissue_scale(self, energy_keV: float) -> float:
        return (self.ref_energy_keV / energy_keV) ** self.tissue_exponent

    def metal_mu(self, energy_keV: float) -> float:
        return self.metal_mu_per_px * (self.ref_energy_keV / energy_keV) ** self.metal_exponent

    def attenuation_provider(self, clean_hu: np.ndarray, mask: np.ndarray):
        """Return a callable energy_keV -> 2D attenuation map with metal inserted."""
        tissue_ref = self.hu_to_mu(clean_hu)
        mask = np.asarray(mask, dtype=bool)

        def provider(energy_keV: float) -> np.ndarray:
            mu = tissue_ref * self.tissue_scale(energy_keV)
            mu[mask] = self.metal_mu(energy_keV)
            return mu

        return provider


def _bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``image`` at float coords (x=col, y=row); zero outside the grid.

    ``grid-constant`` keeps bilinear weights for the in-grid neighbors of
    boundary-straddling samples, which is what line-integral mass
    conservation relies on.
    """
    return ndimage.map_coordinates(
        image, [y.ravel(), x.ravel()], order=1, mode="grid-constant", cval=0.0
    ).reshape(x.shape)


def radon(image: np.ndarray, geometry: ProjectionGeometry) -> Sinogram:
    """Parallel-beam forward projection by ray sampling.

    Each projection value is the line integral along one ray, approximated
    with bilinear interpolation at ``RAY_STEP_PX`` spacing. Accurate for
    objects supported inside the inscribed circle (the usual CT field of
    view); pixels outside it are not seen at every angle.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("radon expects a 2D image")
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"radon expects a square image, got {img.shape}; pad first")
    if img.shape[0] != geometry.image_size:
        raise ValueError(
            f"image size {img.shape[0]} does not match geometry image_size {geometry.image_size}"
        )
    if not np.isfinite(img).all():
        raise ValueError("radon input contains NaN or Inf")

    n = geometry.image_size
    center = (n - 1) / 2.0
    half_span = geometry.n_bins / 2.0
    n_samples = int(math.floor(2.0 * half_span / RAY_STEP_PX)) + 1
    s = (np.arange(n_samples, dtype=np.float64) - (n_samples - 1) / 2.0) * RAY_STEP_PX
    t = geometry.bin_offsets

    out = np.empty((geometry.n_angles, geometry.n_bins), dtype=np.float64)
    for i, theta in enumerate(geometry.angles):
        ct, st = math.cos(theta), math.sin(theta)
        # Detector axis u=(cos,sin), ray axis v=(-sin,cos); x=col, y=row.
        x = center + t[:, None] * ct - s[None, :] * st
        y = center + t[:, None] * st + s[None, :] * ct
        out[i] = _bilinear_sample(img, x, y).sum(axis=1) * RAY_STEP_PX
    return Sinogram(out.astype(np.float32), geometry)


def _ramp_filter_response(size: int) -> np.ndarray:
    """Frequency response of the discrete Ram-Lak kernel, length ``size``."""
    kernel = np.zeros(size, dtype=np.float64)
    kernel[0] = 0.25
    odd = np.arange(1, size // 2 + 1, 2)
    kernel[odd] = -1.0 / (math.pi * odd) ** 2
    kernel[-odd] = -1.0 / (math.pi * odd) ** 2
    return 2.0 * np.real(np.fft.fft(kernel))


def fbp(sinogram: Sinogram | np.ndarray, geometry: ProjectionGeometry | None = None) -> np.ndarray:
    """Ram-Lak filtered back-projection onto the original image grid."""
    if isinstance(sinogram, Sinogram):
        if geometry is None:
            geometry = sinogram.geometry
        values = sinogram.values
    else:
        if geometry is None:
            raise ValueError("fbp needs a ProjectionGeometry when given a raw array")
        values = np.asarray(sinogram)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (geometry.n_angles, geometry.n_bins):
        raise ValueError(
            f"sinogram shape {values.shape} does not match geometry "
            f"({geometry.n_angles}, {geometry.n_bins})"
        )
    if not np.isfinite(values).all():
        raise ValueError("fbp input contains NaN or Inf")

    pad = max(64, 1 << int(math.ceil(math.log2(2 * geometry.n_bins))))
    response = _ramp_filter_response(pad)
    spectrum = np.fft.fft(values, n=pad, axis=1) * response[None, :]
    filtered = np.real(np.fft.ifft(spectrum, axis=1))[:, : geometry.n_bins]

    n = geometry.image_size
    center = (n - 1) / 2.0
    xs = np.arange(n, dtype=np.float64) - center
    grid_x = xs[None, :]
    grid_y = xs[:, None]
    t0 = (geometry.n_bins - 1) / 2.0

    recon = np.zeros((n, n), dtype=np.float64)
    for i, theta in enumerate(geometry.angles):
        t = grid_x * math.cos(theta) + grid_y * math.sin(theta) + t0
        idx = np.clip(np.floor(t).astype(np.int64), 0, geometry.n_bins - 2)
        frac = t - idx
        row = filtered[i]
        recon += row[idx] * (1.0 - frac) + row[idx + 1] * frac
    recon *= math.pi / (2.0 * geometry.n_angles)
    return recon


def polychromatic_project(
    mu_provider,
    mask: MetalMask,
    spectrum: Spectrum,
    geometry: ProjectionGeometry,
    photons: float | None = None,
    rng: np.random.Generator | None = None,
) -> Sinogram:
    """Project a polychromatic beam through per-energy attenuation maps.

    For each ray, p = -ln sum_k w_k exp(-L_k) with L_k the monochromatic
    line integral at energy k. Optional Poisson noise perturbs the
    transmitted intensity (``photons`` incident per ray) before the log.
    """
    if mask.pixel_count == 0:
        raise ValueError("empty metal mask; use radon() for clean projections")
    line_integrals = np.stack(
        [
            radon(mu_provider(e), geometry).values.astype(np.float64)
            for e in spectrum.energies_keV
        ]
    )
    weights = np.asarray(spectrum.weights, dtype=np.float64)
    transmitted = np.einsum("k,kab->ab", weights, np.exp(-line_integrals))
    if photons is not None and photons > 0:
        if rng is None:
            rng = np.random.default_rng()
        counts = rng.poisson(transmitted * photons).astype(np.float64)
        transmitted = np.maximum(counts, 1.0) / photons  # photon-starvation floor
    p = -np.log(transmitted)
    return Sinogram(p.astype(np.float32), geometry)


def synthesize_pair(
    clean: CTImage,
    mask: MetalMask,
    spectrum: Spectrum | None = None,
    geometry: ProjectionGeometry | None = None,
    noise_seed: int | None = None,
    material: MaterialModel | None = None,
    photons: float | None = None,
) -> tuple[CTImage, CTImage, MetalMask]:
    """Produce an (artifact-affected, artifact-free, mask) triple.

    The clean image must qualify as artifact-free (max HU < 2000). The
    artifact image is the HU-rescaled FBP of the polychromatic projection
    with the metal region overwritten by ``mask.metal_hu``. Deterministic
    for a fixed ``noise_seed``.
    """
    if spectrum is None:
        spectrum = Spectrum()
    if geometry is None:
        geometry = ProjectionGeometry(image_size=clean.height)
    if material is None:
        material = MaterialModel()
    if float(clean.pixels.max()) >= 2000.0:
        raise ValueError("clean image has HU >= 2000; it does not qualify as artifact-free")
    if mask.mask.shape != clean.pixels.shape:
        raise ValueError("mask shape does not match image shape")
    if mask.pixel_count == 0:
        raise ValueError("metal mask is empty")

    provider = material.attenuation_provider(clean.pixels, mask.mask)
    rng = np.random.default_rng(noise_seed) if photons else None
    sino = polychromatic_project(provider, mask, spectrum, geometry, photons=photons, rng=rng)
    recon_hu = material.mu_to_hu(fbp(sino, geometry))
    recon_hu[mask.mask] = mask.metal_hu
    recon_hu = np.clip(recon_hu, HU_CLAMP_LO, HU_CLAMP_HI).astype(np.float32)
    artifact = CTImage(recon_hu, pixel_spacing_mm=clean.pixel_spacing_mm, provenance="synthetic")
    return artifact, clean, mask


def _fill_ellipse(canvas: np.ndarray, cy: float, cx: float, a: float, b: float, phi: float, value) -> None:
    """Paint a rotated ellipse (semi-axes a, b) into ``canvas`` in place."""
    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx - cx
    dy = yy - cy
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    canvas[inside] = value


def make_metal_mask(
    shape: tuple[int, int],
    rng: np.random.Generator,
    n_inserts: tuple[int, int] = (1, 3),
    radius_px: tuple[float, float] = (4.0, 16.0),
    metal_hu: float = 3000.0,
) -> MetalMask:
    """Random metal footprint: 1-3 ellipses inside the inscribed circle."""
    h, w = shape
    if h < 64 or w < 64:
        raise ValueError("mask shape must be at least 64x64")
    center_y, center_x = (h - 1) / 2.0, (w - 1) / 2.0
    r_inscribed = min(h, w) / 2.0 - 1.0

    mask = np.zeros(shape, dtype=bool)
    count = int(rng.integers(n_inserts[0], n_inserts[1] + 1))
    for _ in range(count):
        while True:
            a = float(rng.uniform(radius_px[0], radius_px[1]))
            b = float(rng.uniform(radius_px[0], radius_px[1]))
            phi = float(rng.uniform(0.0, math.pi))
            reach = max(a, b)
            max_d = r_inscribed - reach - 1.0
            d = float(rng.uniform(0.0, max_d))
            ang = float(rng.uniform(0.0, 2.0 * math.pi))
            cy = center_y + d * math.sin(ang)
            cx = center_x + d * math.cos(ang)
            single = np.zeros(shape, dtype=bool)
            _fill_ellipse(single, cy, cx, a, b, phi, True)
            if single.sum() >= MIN_METAL_PIXELS:
                mask |= single
                break
    return MetalMask(mask, metal_hu=metal_hu)


def make_phantom(rng: np.random.Generator, size: int = 128, pixel_spacing_mm: float = 1.0) -> CTImage:
    """Random soft-tissue phantom: body ellipse with internal structures.

    Background is exactly -1000 HU (air); the body sits inside the
    inscribed circle; every HU stays below 2000 so the phantom qualifies
    as artifact-free.
    """
    if size < 64:
        raise ValueError("phantom size must be at least 64")
    hu = np.full((size, size), -1000.0, dtype=np.float64)
    center = (size - 1) / 2.0
    r_inscribed = size / 2.0 - 2.0

    body_a = float(rng.uniform(0.62, 0.88)) * r_inscribed
    body_b = float(rng.uniform(0.62, 0.88)) * r_inscribed
    body_phi = float(rng.uniform(0.0, math.pi))
    max_off = r_inscribed - max(body_a, body_b)
    off = float(rng.uniform(0.0, max_off))
    off_ang = float(rng.uniform(0.0, 2.0 * math.pi))
    body_cy = center + off * math.sin(off_ang)
    body_cx = center + off * math.cos(off_ang)
    body_hu = float(rng.uniform(0.0, 100.0))
    _fill_ellipse(hu, body_cy, body_cx, body_a, body_b, body_phi, body_hu)

    n_internal = int(rng.integers(2, 7))
    for _ in range(n_internal):
        for _attempt in range(32):
            a = float(rng.uniform(0.06, 0.28)) * min(body_a, body_b)
            b = float(rng.uniform(0.06, 0.28)) * min(body_a, body_b)
            margin = max(a, b) + 1.0
            # Place the center so the whole ellipse stays inside the body.
            ru = math.sqrt(float(rng.uniform(0.0, 1.0)))
            ang = float(rng.uniform(0.0, 2.0 * math.pi))
            u = ru * math.cos(ang) * max(body_a - margin, 0.0)
            v = ru * math.sin(ang) * max(body_b - margin, 0.0)
            cy = body_cy + u * math.sin(body_phi) + v * math.cos(body_phi)
            cx = body_cx + u * math.cos(body_phi) - v * math.sin(body_phi)
            if a >= 1.0 and b >= 1.0:
                value = float(rng.uniform(-800.0, 1500.0))
                _fill_ellipse(hu, cy, cx, a, b, float(rng.uniform(0.0, math.pi)), value)
                break
    return CTImage(hu.astype(np.float32), pixel_spacing_mm=pixel_spacing_mm, provenance="synthetic")
