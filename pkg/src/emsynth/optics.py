"""Contrast transfer function, Fourier-domain PSF application and defocus sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .volume_io import Micrograph

__all__ = [
    "CtfParams",
    "wavelength_from_voltage",
    "chi",
    "ctf_value",
    "frequency_magnitude",
    "ctf_image",
    "apply_psf",
    "psf_kernel",
    "sample_defocus",
    "radial_profile",
]

DEFAULT_VOLTAGE_KV = 300.0
DEFAULT_CS_A = 2.7e7  # 2.7 mm
DEFAULT_AMPLITUDE_CONTRAST = 0.1


def wavelength_from_voltage(kv: float) -> float:
    """Relativistic electron wavelength in Å for an accelerating voltage in kV."""
    if not kv > 0:
        raise ValueError(f"accelerating voltage must be positive, got {kv}")
    v = kv * 1e3
    return 12.2639 / math.sqrt(v * (1.0 + 0.97845e-6 * v))


@dataclass(frozen=True)
class CtfParams:
    """Isotropic CTF parameters.

    ``w`` is the amplitude contrast fraction, ``defocus`` is in Å with positive
    meaning underfocus, ``cs`` is the spherical aberration in Å and
    ``phase_shift`` is in radians.
    """

    defocus: float
    wavelength: float = wavelength_from_voltage(DEFAULT_VOLTAGE_KV)
    w: float = DEFAULT_AMPLITUDE_CONTRAST
    cs: float = DEFAULT_CS_A
    phase_shift: float = 0.0
    pixel_size: float = 1.0

    def __post_init__(self):
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("amplitude contrast w must lie in [0, 1]")

    @classmethod
    def from_voltage(cls, kv: float = DEFAULT_VOLTAGE_KV, **kwargs) -> "CtfParams":
        return cls(wavelength=wavelength_from_voltage(kv), **kwargs)

    def with_defocus(self, defocus: float) -> "CtfParams":
        return replace(self, defocus=defocus)


def chi(p: CtfParams, g):
    """Phase shift ``pi*lam*g^2*(df - lam^2*g^2*cs/2) + dphi`` for ``|g|`` in 1/Å."""
    g2 = np.square(g)
    return np.pi * p.wavelength * g2 * (p.defocus - 0.5 * p.wavelength ** 2 * g2 * p.cs) + p.phase_shift


def ctf_value(p: CtfParams, g):
    x = chi(p, g)
    return -math.sqrt(1.0 - p.w ** 2) * np.sin(x) - p.w * np.cos(x)


def frequency_magnitude(h: int, w: int, pixel_size: float) -> np.ndarray:
    """``|g|`` on the unshifted DFT lattice, in cycles per Å."""
    fy = np.fft.fftfreq(h, d=pixel_size)
    fx = np.fft.fftfreq(w, d=pixel_size)
    return np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)


def ctf_image(p: CtfParams, h: int, w: int) -> np.ndarray:
    """Real CTF sampled on the ``h x w`` DFT frequency lattice (DC at index 0)."""
    if min(h, w) < 8:
        raise ValueError("CTF grid dims must be >= 8")
    return ctf_value(p, frequency_magnitude(h, w, p.pixel_size))


def apply_psf(m: Micrograph, c: np.ndarray) -> Micrograph:
    """Convolve with the PSF whose transform is ``c``: ``Re(IDFT(DFT(m) * c))``."""
    c = np.asarray(c)
    if c.shape != m.shape:
        raise ValueError(f"filter shape {c.shape} does not match micrograph {m.shape}")
    out = np.fft.ifft2(np.fft.fft2(m.data) * c).real
    return m.with_data(out)


def psf_kernel(c: np.ndarray) -> np.ndarray:
    """Real-space PSF with its origin moved to the array center."""
    return np.fft.fftshift(np.fft.ifft2(c).real)


def sample_defocus(mu_df: float, sigma_df: float, rng: np.random.Generator) -> float:
    """Gaussian defocus draw, redrawn until positive."""
    if not mu_df > 0:
        raise ValueError("mean defocus must be positive")
    if sigma_df == 0:
        return float(mu_df)
    while True:
        df = rng.normal(mu_df, sigma_df)
        if df > 0:
            return float(df)


def radial_profile(p: CtfParams, n_points: int = 512, g_max: float | None = None):
    """``(g, ctf)`` arrays from 0 to ``g_max`` (default: Nyquist of ``p.pixel_size``)."""
    if g_max is None:
        g_max = 0.5 / p.pixel_size
    g = np.linspace(0.0, g_max, n_points)
    return g, ctf_value(p, g)
