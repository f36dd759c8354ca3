"""Virtual specimen preparation: particle counts, poses, placements and projection.

A particle placed with rotation ``R`` at projection-plane position ``t`` contributes
density ``v(R^T (p - t))``: the molecule is rotated by ``R`` about the volume
center (index ``D // 2`` along every axis) and shifted to ``t``.  Under the
orthogonal projection along z the depth offset of ``t`` is unobservable, so only
its ``(x, y)`` part is kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numba
import numpy as np

from .volume_io import AnnotationSet, DensityVolume, Micrograph, ParticleRecord

__all__ = [
    "PlacementConfig",
    "Placement",
    "SpecimenLayout",
    "sample_particle_count",
    "sample_rotation",
    "sample_rotations",
    "quaternion_to_matrix",
    "place_particles",
    "project_particle",
    "composite_projection",
    "placed_patches",
]


@dataclass(frozen=True)
class PlacementConfig:
    mu_n: float
    sigma_n: float
    particle_radius: float
    overlap_factor: float = 1.0
    margin: float = 0.0
    max_attempts_per_particle: int = 1000

    def __post_init__(self):
        if not self.mu_n > 0:
            raise ValueError("mu_n must be positive")
        if self.sigma_n < 0:
            raise ValueError("sigma_n must be non-negative")
        if not self.particle_radius > 0:
            raise ValueError("particle_radius must be positive")
        if self.overlap_factor < 0:
            raise ValueError("overlap_factor must be non-negative")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.max_attempts_per_particle < 1:
            raise ValueError("max_attempts_per_particle must be a positive integer")

    @property
    def min_distance(self) -> float:
        return self.overlap_factor * 2.0 * self.particle_radius


@dataclass(frozen=True)
class Placement:
    rotation: np.ndarray
    translation: tuple[float, float]  # (x, y) pixels
    conformation_index: int = 0


@dataclass(frozen=True)
class SpecimenLayout:
    dims: tuple[int, int]  # (height, width)
    placements: tuple[Placement, ...] = ()
    requested: int = 0
    min_distance: float = 0.0
    margin: float = 0.0

    @property
    def shortfall(self) -> int:
        return max(0, self.requested - len(self.placements))

    def __len__(self) -> int:
        return len(self.placements)

    def __add__(self, other: "SpecimenLayout") -> "SpecimenLayout":
        if self.dims != other.dims:
            raise ValueError("cannot merge layouts with different dims")
        return SpecimenLayout(
            self.dims,
            self.placements + other.placements,
            self.requested + other.requested,
            min(self.min_distance, other.min_distance),
            min(self.margin, other.margin),
        )

    def to_annotations(self, mic_id: str, defocus: float = 0.0, ctf=None, ice=None) -> AnnotationSet:
        recs = [
            ParticleRecord(
                center=p.translation,
                rotation=np.asarray(p.rotation),
                conformation_index=p.conformation_index,
                defocus=defocus,
            )
            for p in self.placements
        ]
        return AnnotationSet(mic_id=mic_id, shape=self.dims, particles=recs, ctf=ctf, ice=ice)


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #


def sample_particle_count(cfg: PlacementConfig, rng: np.random.Generator) -> int:
    """Particle count from a Gaussian truncated to two standard deviations."""
    if cfg.sigma_n == 0:
        n = cfg.mu_n
    else:
        lo, hi = cfg.mu_n - 2 * cfg.sigma_n, cfg.mu_n + 2 * cfg.sigma_n
        while True:
            n = rng.normal(cfg.mu_n, cfg.sigma_n)
            if lo <= n <= hi:
                break
    return max(1, int(round(n)))


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions ``(w, x, y, z)``; works on ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - z * w)
    r[..., 0, 2] = 2 * (x * z + y * w)
    r[..., 1, 0] = 2 * (x * y + z * w)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - x * w)
    r[..., 2, 0] = 2 * (x * z - y * w)
    r[..., 2, 1] = 2 * (y * z + x * w)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def sample_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` Haar-uniform rotations, shape ``(n, 3, 3)``."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return quaternion_to_matrix(q)


def sample_rotation(rng: np.random.Generator) -> np.ndarray:
    return sample_rotations(rng, 1)[0]


def place_particles(
    cfg: PlacementConfig,
    dims: tuple[int, int],
    n: int,
    rng: np.random.Generator,
    n_conformations: int = 1,
) -> SpecimenLayout:
    """Rejection-sample up to ``n`` non-overlapping particle centers.

    Centers are uniform in the margin-inset rectangle. Sampling gives up after
    ``cfg.max_attempts_per_particle`` consecutive rejections; the returned
    layout then reports a non-zero ``shortfall``.
    """
    h, w = dims
    if n_conformations < 1:
        raise ValueError("need at least one conformation")
    x_lo, x_hi = cfg.margin, w - cfg.margin
    y_lo, y_hi = cfg.margin, h - cfg.margin
    if n < 1 or x_hi < x_lo or y_hi < y_lo:
        raise ValueError("image too small for one particle")

    min_d2 = cfg.min_distance ** 2
    centers = np.empty((n, 2))
    placements: list[Placement] = []
    rejections = 0
    while len(placements) < n:
        c = (rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi))
        k = len(placements)
        if k:
            d2 = (centers[:k, 0] - c[0]) ** 2 + (centers[:k, 1] - c[1]) ** 2
            if d2.min() < min_d2:
                rejections += 1
                if rejections >= cfg.max_attempts_per_particle:
                    break
                continue
        rejections = 0
        centers[k] = c
        rot = sample_rotation(rng)
        conf = int(rng.integers(n_conformations))
        placements.append(Placement(rot, (float(c[0]), float(c[1])), conf))
    return SpecimenLayout((h, w), tuple(placements), n, cfg.min_distance, cfg.margin)


# --------------------------------------------------------------------------- #
# Projection
# --------------------------------------------------------------------------- #


@numba.njit(cache=True, nogil=True)
def _project_trilinear(vol, rt, out):
    d = vol.shape[0]
    c = d // 2
    for i in range(d):
        y = i - c
        for j in range(d):
            x = j - c
            acc = 0.0
            for k in range(d):
                z = k - c
                # source index coordinates (x, y, z) = R^T p + c
                sx = rt[0, 0] * x + rt[0, 1] * y + rt[0, 2] * z + c
                sy = rt[1, 0] * x + rt[1, 1] * y + rt[1, 2] * z + c
                sz = rt[2, 0] * x + rt[2, 1] * y + rt[2, 2] * z + c
                if sx <= -1.0 or sy <= -1.0 or sz <= -1.0 or sx >= d or sy >= d or sz >= d:
                    continue
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                z0 = int(np.floor(sz))
                fx = sx - x0
                fy = sy - y0
                fz = sz - z0
                for dz in range(2):
                    zz = z0 + dz
                    if zz < 0 or zz >= d:
                        continue
                    wz = fz if dz else 1.0 - fz
                    for dy in range(2):
                        yy = y0 + dy
                        if yy < 0 or yy >= d:
                            continue
                        wy = fy if dy else 1.0 - fy
                        for dx in range(2):
                            xx = x0 + dx
                            if xx < 0 or xx >= d:
                                continue
                            wx = fx if dx else 1.0 - fx
                            acc += wz * wy * wx * vol[zz, yy, xx]
            out[i, j] = acc
    return out


def project_particle(v: DensityVolume, rotation: np.ndarray) -> np.ndarray:
    """Line integral along z of the rotated volume, as a ``(D, D)`` patch.

    Each output voxel samples the input at ``R^T`` of its centered coordinate
    with trilinear interpolation; samples outside the grid read as zero.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    vol = np.asarray(v.data, dtype=np.float64)
    if np.array_equal(rotation, np.eye(3)):
        return vol.sum(axis=0)
    d = v.side_length
    return _project_trilinear(vol, np.ascontiguousarray(rotation.T), np.empty((d, d)))


def _subpixel_shift(patch: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Bilinear shift of ``patch`` by ``(fx, fy)`` in [0, 1); output is one pixel larger."""
    d0, d1 = patch.shape
    out = np.zeros((d0 + 1, d1 + 1))
    out[:-1, :-1] += (1 - fx) * (1 - fy) * patch
    out[:-1, 1:] += fx * (1 - fy) * patch
    out[1:, :-1] += (1 - fx) * fy * patch
    out[1:, 1:] += fx * fy * patch
    return out


def _check_conformations(layout: SpecimenLayout, conformations: Sequence[DensityVolume]) -> None:
    if layout.placements and not conformations:
        raise ValueError("bad conformation index: no conformations supplied")
    if conformations:
        d0, v0 = conformations[0].side_length, conformations[0].voxel_size
        for vol in conformations:
            if vol.side_length != d0 or vol.voxel_size != v0:
                raise ValueError("all conformations must share side length and voxel size")
    for p in layout.placements:
        if not 0 <= p.conformation_index < len(conformations):
            raise ValueError(f"bad conformation index {p.conformation_index}")


def placed_patches(
    layout: SpecimenLayout, conformations: Sequence[DensityVolume]
) -> Iterator[tuple[np.ndarray, int, int]]:
    """Yield ``(shifted_patch, row0, col0)`` per placement, in layout order.

    ``shifted_patch`` is the projected patch after the bilinear sub-pixel shift,
    positioned so that its top-left pixel lands on frame index ``(row0, col0)``.
    Position may be partially or fully outside the frame.
    """
    _check_conformations(layout, conformations)
    for p in layout.placements:
        vol = conformations[p.conformation_index]
        patch = project_particle(vol, p.rotation)
        c = vol.side_length // 2
        cx, cy = p.translation
        ix, iy = math.floor(cx), math.floor(cy)
        shifted = _subpixel_shift(patch, cx - ix, cy - iy)
        yield shifted, iy - c, ix - c


def _paste(frame: np.ndarray, patch: np.ndarray, row0: int, col0: int) -> None:
    h, w = frame.shape
    r0, c0 = max(row0, 0), max(col0, 0)
    r1, c1 = min(row0 + patch.shape[0], h), min(col0 + patch.shape[1], w)
    if r1 <= r0 or c1 <= c0:
        return
    frame[r0:r1, c0:c1] += patch[r0 - row0:r1 - row0, c0 - col0:c1 - col0]


def composite_projection(
    layout: SpecimenLayout, conformations: Sequence[DensityVolume]
) -> Micrograph:
    """Sum of all placed particle projections (clean, noiseless frame)."""
    frame = np.zeros(layout.dims)
    for patch, r0, c0 in placed_patches(layout, conformations):
        _paste(frame, patch, r0, c0)
    pixel = conformations[0].voxel_size if conformations else 1.0
    return Micrograph(frame, pixel_size=pixel, role="projection")
