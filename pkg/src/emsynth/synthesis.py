"""Physical micrograph synthesis: ice attenuation, PSF, noise baselines and masks.

The physical image is ``psf * (W . sum_z S)``: the clean projection is weighted
by the ice map first and only then convolved with the PSF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .optics import CtfParams, apply_psf
from .specimen import SpecimenLayout, _paste, placed_patches
from .volume_io import AnnotationSet, DensityVolume, Micrograph

__all__ = [
    "IceGradientParams",
    "NoiseSpec",
    "make_ice_weight_map",
    "sample_ice_params",
    "synthesize_physical",
    "measure_snr",
    "add_noise",
    "scaled_poisson",
    "threshold_mask",
    "make_particle_mask",
    "intermediate_input",
]


@dataclass(frozen=True)
class IceGradientParams:
    """Parametric ice-thickness attenuation.

    ``direction`` is the ramp angle in radians for ``kind="linear"`` (0 means
    thickest ice at the right edge); ``center`` is the ``(x, y)`` pixel of
    thinnest ice for ``kind="radial"``.
    """

    kind: str = "linear"
    direction: float = 0.0
    center: tuple[float, float] | None = None
    min_weight: float = 1.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "radial"):
            raise ValueError(f"unknown ice gradient kind {self.kind!r}")
        if not 0.0 < self.min_weight <= 1.0:
            raise ValueError("min_weight must lie in (0, 1]")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be non-negative")


@dataclass(frozen=True)
class NoiseSpec:
    model: str = "gaussian"
    target_snr: float = 0.1
    mix_ratio: float = 0.5  # share of noise variance from the Poisson term

    def __post_init__(self):
        if self.model not in ("gaussian", "poisson", "poisson_gaussian"):
            raise ValueError(f"unknown noise model {self.model!r}")
        if not self.target_snr > 0:
            raise ValueError("target_snr must be positive")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must lie in [0, 1]")


# --------------------------------------------------------------------------- #
# Ice
# --------------------------------------------------------------------------- #


def make_ice_weight_map(p: IceGradientParams, dims: tuple[int, int], pixel_size: float = 1.0) -> Micrograph:
    """Attenuation map falling from 1 to ``min_weight``, blurred, renormalized to max 1."""
    h, w = dims
    if min(h, w) < 8:
        raise ValueError("weight map dims must be >= 8")
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    if p.kind == "linear":
        s = x * math.cos(p.direction) + y * math.sin(p.direction)
    else:
        cx, cy = p.center if p.center is not None else ((w - 1) / 2, (h - 1) / 2)
        s = np.hypot(x - cx, y - cy)
    span = s.max() - s.min()
    t = (s - s.min()) / span if span > 0 else np.zeros_like(s)
    wmap = 1.0 - (1.0 - p.min_weight) * t
    if p.blur_sigma > 0:
        wmap = ndimage.gaussian_filter(wmap, p.blur_sigma, mode="nearest")
    wmap = wmap / wmap.max()
    return Micrograph(wmap, pixel_size=pixel_size, role="ice_weight")


def sample_ice_params(
    rng: np.random.Generator,
    dims: tuple[int, int],
    kinds: Sequence[str] = ("linear", "radial"),
    min_weight_range: tuple[float, float] = (0.5, 1.0),
    blur_sigma: float = 0.0,
) -> IceGradientParams:
    """Random gradient: kind, orientation/center and depth drawn from the given ranges."""
    kind = kinds[int(rng.integers(len(kinds)))]
    lo, hi = min_weight_range
    min_weight = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if kind == "linear":
        return IceGradientParams("linear", float(rng.uniform(0, 2 * math.pi)), None, min_weight, blur_sigma)
    h, w = dims
    center = (float(rng.uniform(0, w)), float(rng.uniform(0, h)))
    return IceGradientParams("radial", 0.0, center, min_weight, blur_sigma)


# --------------------------------------------------------------------------- #
# Physical image
# --------------------------------------------------------------------------- #


def _stage(clean: Micrograph, ice: Micrograph | None, ctf_grid: np.ndarray | None) -> Micrograph:
    img = clean
    if ice is not None:
        if ice.shape != clean.shape:
            raise ValueError(f"ice map shape {ice.shape} does not match frame {clean.shape}")
        img = img.with_data(img.data * ice.data)
    if ctf_grid is not None:
        img = apply_psf(img, ctf_grid)
    return img.with_data(img.data, role="physical")


def synthesize_physical(
    layout: SpecimenLayout,
    conformations: Sequence[DensityVolume],
    ice: Micrograph | None,
    ctf_grid: np.ndarray | None,
    *,
    mic_id: str = "0",
    ctf_params: CtfParams | None = None,
    ice_params: IceGradientParams | None = None,
    patches: list | None = None,
) -> tuple[Micrograph, AnnotationSet]:
    """Clean projection, ice weighting, then PSF. ``None`` skips a stage.

    ``patches`` may carry a precomputed :func:`placed_patches` list so that the
    caller can reuse the projections for the particle mask.
    """
    if patches is None:
        patches = list(placed_patches(layout, conformations))
    frame = np.zeros(layout.dims)
    for patch, r0, c0 in patches:
        _paste(frame, patch, r0, c0)
    pixel = conformations[0].voxel_size if conformations else 1.0
    clean = Micrograph(frame, pixel_size=pixel, role="projection")
    i_phy = _stage(clean, ice, ctf_grid)
    defocus = ctf_params.defocus if ctf_params is not None else 0.0
    ann = layout.to_annotations(mic_id, defocus=defocus, ctf=ctf_params, ice=ice_params)
    return i_phy, ann


# --------------------------------------------------------------------------- #
# Noise
# --------------------------------------------------------------------------- #


def measure_snr(signal: Micrograph, noisy: Micrograph) -> float:
    """Signal variance over residual variance."""
    if signal.shape != noisy.shape:
        raise ValueError("signal and noisy images differ in shape")
    noise_var = np.var(noisy.data - signal.data)
    if noise_var == 0:
        raise ValueError("infinite SNR: noisy image equals the signal")
    return float(np.var(signal.data) / noise_var)


def scaled_poisson(m_nonneg: np.ndarray, counts_scale: float, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts with expectation ``counts_scale * m``, mapped back to image units."""
    return rng.poisson(counts_scale * m_nonneg) / counts_scale


def _poisson_at_snr(x: np.ndarray, target_snr: float, rng: np.random.Generator, tol: float = 0.10) -> np.ndarray:
    shift = x.min()
    xs = x - shift
    mean, var = xs.mean(), xs.var()
    if var < 1e-20 or mean <= 0:
        raise ValueError("degenerate signal for Poisson scaling")
    # Expected SNR(c) = c * var / mean, so this is the closed-form scale.
    c = target_snr * mean / var
    sig_var = x.var()
    lo, hi = c / 4.0, c * 4.0
    out = None
    for _ in range(30):
        out = scaled_poisson(xs, c, rng) + shift
        snr = sig_var / np.var(out - x)
        if abs(snr - target_snr) <= tol * target_snr:
            break
        if snr < target_snr:
            lo = c
        else:
            hi = c
        c = math.sqrt(lo * hi)
    return out


def add_noise(m: Micrograph, spec: NoiseSpec, rng: np.random.Generator) -> Micrograph:
    """Noise baseline at ``spec.target_snr`` (variance-ratio SNR)."""
    x = np.asarray(m.data, dtype=np.float64)
    total_var = x.var() / spec.target_snr
    if spec.model == "gaussian":
        out = x + rng.normal(0.0, math.sqrt(total_var), x.shape)
    elif spec.model == "poisson":
        out = _poisson_at_snr(x, spec.target_snr, rng)
    else:
        mix = spec.mix_ratio
        out = x if mix == 0 else _poisson_at_snr(x, spec.target_snr / mix, rng)
        if mix < 1:
            out = out + rng.normal(0.0, math.sqrt((1 - mix) * total_var), x.shape)
    return m.with_data(out, role=f"noisy_{spec.model}")


# --------------------------------------------------------------------------- #
# Masks
# --------------------------------------------------------------------------- #


def threshold_mask(image: np.ndarray, threshold_frac: float) -> np.ndarray:
    """Boolean ``image >= frac * max(image)`` restricted to positive values."""
    if not 0.0 < threshold_frac < 1.0:
        raise ValueError("threshold_frac must lie in (0, 1)")
    image = np.asarray(image)
    peak = image.max() if image.size else 0.0
    if peak <= 0:
        return np.zeros(image.shape, dtype=bool)
    return (image >= threshold_frac * peak) & (image > 0)


def _mask_from_patches(dims, patches, threshold_frac: float) -> np.ndarray:
    mask = np.zeros(dims)
    for patch, r0, c0 in patches:
        _paste(mask, threshold_mask(patch, threshold_frac).astype(np.float64), r0, c0)
    return (mask > 0).astype(np.float64)


def make_particle_mask(
    layout: SpecimenLayout,
    conformations: Sequence[DensityVolume],
    threshold_frac: float = 0.1,
    patches: list | None = None,
) -> Micrograph:
    """Binary particle/background mask: union of each particle's thresholded footprint."""
    if patches is None:
        patches = list(placed_patches(layout, conformations))
    pixel = conformations[0].voxel_size if conformations else 1.0
    return Micrograph(_mask_from_patches(layout.dims, patches, threshold_frac), pixel_size=pixel, role="mask")


def intermediate_input(i_phy: Micrograph, noise_std_frac: float, rng: np.random.Generator) -> Micrograph:
    """``I_phy`` plus zero-mean Gaussian noise of std ``noise_std_frac * std(I_phy)``."""
    if noise_std_frac < 0:
        raise ValueError("noise_std_frac must be non-negative")
    x = np.asarray(i_phy.data, dtype=np.float64)
    if noise_std_frac == 0:
        return i_phy.with_data(x.copy(), role="intermediate")
    sigma = noise_std_frac * x.std()
    return i_phy.with_data(x + rng.normal(0.0, sigma, x.shape), role="intermediate")
