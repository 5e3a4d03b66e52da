"""Physically-motivated under-display-camera degradation.

The display's periodic pixel apertures act as a diffraction grating. We model
the far-field point spread as the squared magnitude of the aperture's DFT,
with diffraction-order spacing growing linearly in wavelength, then average a
few wavelength samples per color channel. On top of the diffraction kernel
sit a compact Gaussian reflection blur, per-channel absorption, and
signal-dependent sensor noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .rawimage import BayerPattern, PlanarImage, Range, RawFrame, mosaic


class OpticsError(ValueError):
    pass


# Three samples per channel approximate the spectral integral; centers at
# 450/550/620 nm with +-30 nm spread.
DEFAULT_WAVELENGTHS_NM = (
    (590.0, 620.0, 650.0),  # R
    (520.0, 550.0, 580.0),  # G
    (420.0, 450.0, 480.0),  # B
)

# Channel-integrated display absorption factors. The display vendor never
# publishes these; the defaults are simulation placeholders only.
DEFAULT_ABSORPTION = (0.35, 0.40, 0.30)


@dataclass
class ApertureMask:
    transmission: np.ndarray  # MxM floats in [0, 1], one or more full periods
    pitch_um: float
    open_fraction: float

    def __post_init__(self):
        self.transmission = np.asarray(self.transmission, dtype=np.float64)
        if np.any(self.transmission < 0) or np.any(self.transmission > 1):
            raise OpticsError("aperture transmission must lie in [0, 1]")


@dataclass
class Psf:
    kernels: np.ndarray  # (3, K, K) nonnegative, unit sum per channel
    wavelengths_nm: tuple

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        if self.kernels.shape[0] != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise OpticsError("psf must be 3 square planes")
        if self.kernels.shape[1] % 2 == 0:
            raise OpticsError("psf kernels must be odd-sized (centered)")
        if np.any(self.kernels < 0):
            raise OpticsError("psf kernels must be nonnegative")
        sums = self.kernels.sum(axis=(1, 2))
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise OpticsError(f"psf kernels must sum to 1, got {sums}")

    @property
    def size(self) -> int:
        return self.kernels.shape[1]


@dataclass
class DegradationParams:
    absorption: tuple = DEFAULT_ABSORPTION
    reflection_sigma_px: float = 0.8
    noise_a: float = 1e-4  # signal-dependent variance coefficient
    noise_b: float = 1e-6  # signal-independent variance floor
    seed: int = 0

    def __post_init__(self):
        if any(not (0.0 < a <= 1.0) for a in self.absorption):
            raise OpticsError("absorption components must lie in (0, 1]")
        if self.noise_a < 0 or self.noise_b < 0:
            raise OpticsError("noise coefficients must be nonnegative")


def synthesize_aperture(pitch_px: int, open_fraction: float,
                        layout: str = "square_hole", pitch_um: float = 55.0) -> ApertureMask:
    """Binary transmission mask for one display period.

    ``square_hole`` opens a centered rectangle whose pixel count best matches
    the requested fraction; ``stripe`` opens whole columns.
    """
    pitch_px = int(pitch_px)
    if pitch_px < 2:
        raise OpticsError("pitch_px must be at least 2")
    if not (0.0 < open_fraction < 1.0 or np.isclose(open_fraction, 1.0)):
        raise OpticsError("open_fraction must lie in (0, 1]")
    target = open_fraction * pitch_px * pitch_px
    if target < 1.0:
        raise OpticsError(
            f"degenerate aperture: open_fraction {open_fraction} opens less than one pixel")

    mask = np.zeros((pitch_px, pitch_px), dtype=np.float64)
    if layout == "square_hole":
        # Open exactly round(target) pixels, nearest to the period center
        # first; this lands within half a pixel of the requested area and
        # degenerates to a centered square block for square counts.
        count = int(round(target))
        center = (pitch_px - 1) / 2.0
        order = sorted(((r - center) ** 2 + (c - center) ** 2, r, c)
                       for r in range(pitch_px) for c in range(pitch_px))
        for _, r, c in order[:count]:
            mask[r, c] = 1.0
        achieved = count
    elif layout == "stripe":
        cols = max(1, int(round(open_fraction * pitch_px)))
        cols = min(cols, pitch_px)
        left = (pitch_px - cols) // 2
        mask[:, left:left + cols] = 1.0
        achieved = cols * pitch_px
    else:
        raise OpticsError(f"unknown aperture layout {layout!r}")

    return ApertureMask(mask, pitch_um, achieved / (pitch_px * pitch_px))


def aperture_spectrum(mask: ApertureMask, support: int = 256) -> np.ndarray:
    """Centered |DFT|^2 intensity of the mask tiled to support x support."""
    m = mask.transmission
    if support % m.shape[0] or support % m.shape[1]:
        raise OpticsError(f"support {support} must tile the {m.shape} mask")
    tiled = np.tile(m, (support // m.shape[0], support // m.shape[1]))
    spec = np.abs(np.fft.fft2(tiled)) ** 2
    return np.fft.fftshift(spec)


def psf_from_aperture(mask: ApertureMask, wavelengths_nm=DEFAULT_WAVELENGTHS_NM,
                      scale: float = 0.05, kernel_size: int = 13,
                      support: int = 256) -> Psf:
    """Diffraction PSF per channel from the aperture's far-field intensity.

    A spectrum bin at normalized frequency nu (cycles per aperture sample)
    lands ``wavelength * scale * nu`` sensor pixels from the kernel center,
    so diffraction-order spacing grows linearly with wavelength * scale. The
    intensity of every bin is deposited onto the pixel grid with bilinear
    weights (the spectrum of a periodic mask is a set of sharp orders, which
    point-sampling would miss). Each channel averages its wavelength samples,
    then is renormalized to unit sum.
    """
    if kernel_size % 2 == 0:
        raise OpticsError("kernel_size must be odd")
    k_half = kernel_size // 2

    # Frequencies only exist up to Nyquist (|nu| = 1/2); kernel pixels past
    # the largest reachable radius would stay dark, so refuse them.
    lam_min = min(min(ws) for ws in wavelengths_nm)
    if k_half > lam_min * scale * 0.5:
        raise OpticsError(
            f"kernel_size {kernel_size} exceeds the computable support for "
            f"wavelength {lam_min} nm at scale {scale}")

    spec = aperture_spectrum(mask, support)
    half = support // 2
    ys, xs = np.nonzero(spec > spec.max() * 1e-15)
    vals = spec[ys, xs]
    fy = (ys - half) / support
    fx = (xs - half) / support

    kernels = np.zeros((3, kernel_size, kernel_size))
    for ch, lams in enumerate(wavelengths_nm):
        acc = np.zeros((kernel_size, kernel_size))
        for lam in lams:
            _splat_bilinear(acc, lam * scale * fy + k_half, lam * scale * fx + k_half, vals)
        total = acc.sum()
        if total <= 0:
            raise OpticsError("psf collapsed to zero; aperture fully opaque?")
        kernels[ch] = acc / total
    return Psf(kernels, tuple(tuple(ws) for ws in wavelengths_nm))


def _splat_bilinear(acc: np.ndarray, y: np.ndarray, x: np.ndarray,
                    vals: np.ndarray) -> None:
    h, w = acc.shape
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    wy = y - y0
    wx = x - x0
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy = y0 + dy
        xx = x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        np.add.at(acc, (yy[ok], xx[ok]), wgt[ok] * vals[ok])


def reflection_kernel(sigma_px: float, size: int = 7) -> np.ndarray:
    """Unit-sum isotropic Gaussian sampled at pixel centers; sigma 0 is a delta."""
    if sigma_px < 0:
        raise OpticsError("sigma_px must be nonnegative")
    if size % 2 == 0:
        raise OpticsError("kernel size must be odd")
    out = np.zeros((size, size), dtype=np.float64)
    if sigma_px == 0.0:
        out[size // 2, size // 2] = 1.0
        return out
    ax = np.arange(size, dtype=np.float64) - size // 2
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    out = np.exp(-(yy * yy + xx * xx) / (2.0 * sigma_px * sigma_px))
    return out / out.sum()


def convolve_reflect(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-d convolution with reflective padding (same-size output)."""
    kh, kw = kernel.shape
    padded = np.pad(plane, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="reflect")
    return fftconvolve(padded, kernel, mode="valid")


def degrade(scene: PlanarImage, psf: Psf, params: DegradationParams) -> PlanarImage:
    """Apply the full degradation: absorption, diffraction + reflection blur,
    and seeded signal-dependent Gaussian noise; output clamped at zero."""
    if scene.range_tag is not Range.SCENE_HDR:
        raise OpticsError("degrade expects a scene_hdr image")
    refl = reflection_kernel(params.reflection_sigma_px)
    rng = np.random.default_rng(params.seed)
    out = np.empty_like(scene.channels, dtype=np.float64)
    for ch in range(3):
        kernel = psf.kernels[ch]
        if params.reflection_sigma_px > 0:
            kernel = fftconvolve(kernel, refl, mode="full")
            kernel = kernel / kernel.sum()
        blurred = convolve_reflect(scene.channels[ch], kernel)
        signal = params.absorption[ch] * blurred
        if params.noise_a > 0 or params.noise_b > 0:
            var = params.noise_a * np.clip(signal, 0, None) + params.noise_b
            signal = signal + rng.standard_normal(signal.shape) * np.sqrt(var)
        out[ch] = np.clip(signal, 0.0, None)
    return PlanarImage(out, Range.SCENE_HDR)


def delta_psf(size: int = 1) -> Psf:
    """Identity PSF (useful to disable the diffraction path)."""
    k = np.zeros((3, size, size))
    k[:, size // 2, size // 2] = 1.0
    return Psf(k, ((550.0,), (550.0,), (550.0,)))


@dataclass
class CaptureMeta:
    """Exposure model of one camera: DN = black + gain-scaled irradiance."""

    exposure_us: int = 10000
    iso: int = 100
    black_level: int = 64
    white_level: int = 1023
    pattern: BayerPattern = BayerPattern.RGGB
    base_gain: float = 0.8  # fraction of full scale hit by unit radiance at 10 ms / ISO 100

    def exposure_gain(self) -> float:
        return (self.exposure_us / 10000.0) * (self.iso / 100.0) * self.base_gain


def expose(image: PlanarImage, meta: CaptureMeta) -> RawFrame:
    """Mosaic a linear scene and quantize it through the exposure model."""
    gain = meta.exposure_gain()
    span = meta.white_level - meta.black_level
    plane = mosaic(PlanarImage(np.clip(image.channels, 0, None), Range.SCENE_HDR),
                   meta.pattern)
    dn = np.rint(plane * gain * span + meta.black_level)
    dn = np.clip(dn, 0, meta.white_level).astype(np.uint16)
    return RawFrame(dn, meta.pattern, meta.black_level, meta.white_level,
                    meta.exposure_us, meta.iso)


def simulate_pair(scene: PlanarImage, psf: Psf, params: DegradationParams,
                  meta_udc: CaptureMeta, meta_ref: CaptureMeta) -> tuple[RawFrame, RawFrame]:
    """(degraded UDC frame, clean reference frame) of the same scene."""
    reference = expose(scene, meta_ref)
    udc = expose(degrade(scene, psf, params), meta_udc)
    return udc, reference
