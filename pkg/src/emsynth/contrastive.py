"""Mask-guided patch sampling and the mask-guided patch NCE loss.

Everything here is a pure numpy kernel: the loss value, its analytic gradient,
and a fixed random-projection encoder that produces multi-scale unit features
so the loss can be exercised without a trained network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .volume_io import Micrograph

__all__ = [
    "PatchSampleSet",
    "FeatureSet",
    "sample_patches_masked",
    "nce_loss",
    "nce_gradient",
    "mask_nce_loss",
    "mask_nce_gradient",
    "reference_encoder",
    "gan_objective_value",
    "total_objective",
    "DEFAULT_TAU",
    "DEFAULT_LAMBDA",
]

DEFAULT_TAU = 0.07
DEFAULT_LAMBDA = 10.0
_NORM_TOL = 1e-3


@dataclass(frozen=True)
class PatchSampleSet:
    """Query centers ``(row, col)`` per class.

    Every particle query uses all background queries as negatives and vice
    versa, so the negative lists are implicit.
    """

    patch_size: int
    particle_queries: np.ndarray
    background_queries: np.ndarray
    shortfall: dict = field(default_factory=dict)

    def negatives(self, label: int) -> np.ndarray:
        """Indices (into the opposite-class array) of negatives for a class-``label`` query."""
        other = self.background_queries if label == 1 else self.particle_queries
        return np.arange(len(other))

    def validate(self, mask: np.ndarray) -> None:
        mask = np.asarray(mask)
        for label, pts in ((1, self.particle_queries), (0, self.background_queries)):
            if len(pts) and np.any(mask[pts[:, 0], pts[:, 1]] != label):
                raise ValueError(f"query with wrong mask label in class {label}")
            if len({tuple(p) for p in pts}) != len(pts):
                raise ValueError(f"duplicate coordinates in class {label}")


@dataclass(frozen=True)
class FeatureSet:
    """Per-layer ``(n_positions, d)`` unit feature rows for a list of positions."""

    positions: np.ndarray
    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "positions", pos)
        for l, f in enumerate(self.layers):
            if f.shape[0] != len(pos):
                raise ValueError(f"layer {l}: {f.shape[0]} rows for {len(pos)} positions")
            if not np.all(np.isfinite(f)):
                raise ValueError(f"layer {l}: non-finite features")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def rows(self, positions: np.ndarray) -> np.ndarray:
        index = {tuple(p): i for i, p in enumerate(self.positions.tolist())}
        try:
            return np.array([index[tuple(p)] for p in np.asarray(positions).tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"position {exc.args[0]} not present in feature set") from None


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #


def _stratified(cands: np.ndarray, q: int, shape, rng: np.random.Generator) -> np.ndarray:
    """Round-robin over a ``ceil(sqrt(q))^2`` grid of cells, one draw per cell per round."""
    g = max(1, math.ceil(math.sqrt(q)))
    h, w = shape
    cell = (cands[:, 0] * g // h) * g + (cands[:, 1] * g // w)
    pools = []
    for c in range(g * g):
        members = cands[cell == c]
        if len(members):
            pools.append(members[rng.permutation(len(members))])
    taken: list[np.ndarray] = []
    depth = 0
    while len(taken) < q:
        live = [p for p in pools if len(p) > depth]
        if not live:
            break
        order = rng.permutation(len(live))
        for i in order[: q - len(taken)]:
            taken.append(live[i][depth])
        depth += 1
    return np.array(taken, dtype=np.int64).reshape(-1, 2)


def sample_patches_masked(
    mask: Micrograph | np.ndarray,
    q_per_class: int = 256,
    patch_size: int = 32,
    rng: np.random.Generator | None = None,
) -> PatchSampleSet:
    """Spatially even query sampling on particle (1) and background (0) pixels.

    Candidate centers keep the full patch inside the image. A class with fewer
    candidates than ``q_per_class`` is reduced to what is available and the
    shortfall is reported.
    """
    if rng is None:
        rng = np.random.default_rng()
    m = np.asarray(mask.data if isinstance(mask, Micrograph) else mask)
    h, w = m.shape
    half = patch_size // 2
    inner = np.zeros(m.shape, dtype=bool)
    inner[half:h - patch_size + half + 1, half:w - patch_size + half + 1] = True
    out, shortfall = {}, {}
    for label, name in ((1, "particle"), (0, "background")):
        cands = np.argwhere(inner & (m == label))
        if len(cands) == 0:
            raise ValueError(f"mask has no {name} region")
        pts = _stratified(cands, q_per_class, m.shape, rng)
        if len(pts) < q_per_class:
            shortfall[name] = q_per_class - len(pts)
        out[name] = pts
    return PatchSampleSet(patch_size, out["particle"], out["background"], shortfall)


# --------------------------------------------------------------------------- #
# NCE kernels
# --------------------------------------------------------------------------- #


def _check_unit(*arrays: np.ndarray) -> None:
    for a in arrays:
        if a.size and np.max(np.abs(np.linalg.norm(a, axis=-1) - 1.0)) > _NORM_TOL:
            raise ValueError("feature not normalized")


def _logits(v, v_pos, v_neg, tau):
    pos = np.einsum("qd,qd->q", v, v_pos) / tau
    neg = v @ v_neg.T / tau
    return np.concatenate([pos[:, None], neg], axis=1)


def _prep(v, v_pos, v_neg, tau):
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    v_pos = np.atleast_2d(np.asarray(v_pos, dtype=np.float64))
    v_neg = np.atleast_2d(np.asarray(v_neg, dtype=np.float64))
    if not tau > 0:
        raise ValueError("tau must be positive")
    if v.shape != v_pos.shape:
        raise ValueError("queries and positives must have the same shape")
    if len(v_neg) < 1 or v_neg.shape[1] != v.shape[1]:
        raise ValueError("need at least one negative of matching dimension")
    _check_unit(v, v_pos, v_neg)
    return v, v_pos, v_neg


def nce_loss(v, v_pos, v_neg, tau: float = DEFAULT_TAU) -> float:
    """Summed cross-entropy of picking each query's positive among itself plus all negatives."""
    v, v_pos, v_neg = _prep(v, v_pos, v_neg, tau)
    logits = _logits(v, v_pos, v_neg, tau)
    return float(np.sum(logsumexp(logits, axis=1) - logits[:, 0]))


def nce_gradient(v, v_pos, v_neg, tau: float = DEFAULT_TAU):
    """Analytic gradients of :func:`nce_loss` w.r.t. ``(v, v_pos, v_neg)``."""
    v, v_pos, v_neg = _prep(v, v_pos, v_neg, tau)
    logits = _logits(v, v_pos, v_neg, tau)
    p = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    dpos = (p[:, 0] - 1.0)[:, None]  # dL/d(pos logit)
    pneg = p[:, 1:]                  # dL/d(neg logits)
    g_v = (dpos * v_pos + pneg @ v_neg) / tau
    g_pos = dpos * v / tau
    g_neg = pneg.T @ v / tau
    return g_v, g_pos, g_neg


def _check_pair(feat_inter: FeatureSet, feat_syn: FeatureSet) -> None:
    if feat_inter.n_layers != feat_syn.n_layers:
        raise ValueError("feature sets have mismatched layer counts")
    if not np.array_equal(feat_inter.positions, feat_syn.positions):
        raise ValueError("feature sets have mismatched position sets")


def mask_nce_loss(
    feat_inter: FeatureSet,
    feat_syn: FeatureSet,
    particle_positions,
    background_positions,
    tau: float = DEFAULT_TAU,
) -> float:
    """Mask-guided NCE summed over layers.

    Queries come from ``feat_inter``; the positive is the same position in
    ``feat_syn`` and the negatives are every opposite-class position in
    ``feat_syn``.
    """
    _check_pair(feat_inter, feat_syn)
    ip, ib = feat_inter.rows(particle_positions), feat_inter.rows(background_positions)
    total = 0.0
    for z, zh in zip(feat_inter.layers, feat_syn.layers):
        total += nce_loss(z[ip], zh[ip], zh[ib], tau)
        total += nce_loss(z[ib], zh[ib], zh[ip], tau)
    return total


def mask_nce_gradient(
    feat_inter: FeatureSet,
    feat_syn: FeatureSet,
    particle_positions,
    background_positions,
    tau: float = DEFAULT_TAU,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-layer gradients of :func:`mask_nce_loss` w.r.t. both feature sets' rows."""
    _check_pair(feat_inter, feat_syn)
    ip, ib = feat_inter.rows(particle_positions), feat_inter.rows(background_positions)
    g_inter, g_syn = [], []
    for z, zh in zip(feat_inter.layers, feat_syn.layers):
        gz, gzh = np.zeros_like(z, dtype=np.float64), np.zeros_like(zh, dtype=np.float64)
        for q_idx, n_idx in ((ip, ib), (ib, ip)):
            gq, gp, gn = nce_gradient(z[q_idx], zh[q_idx], zh[n_idx], tau)
            np.add.at(gz, q_idx, gq)
            np.add.at(gzh, q_idx, gp)
            np.add.at(gzh, n_idx, gn)
        g_inter.append(gz)
        g_syn.append(gzh)
    return g_inter, g_syn


# --------------------------------------------------------------------------- #
# Reference encoder
# --------------------------------------------------------------------------- #

_BASE_PATCH = 8


def _mean_pool2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def reference_encoder(
    m: Micrograph | np.ndarray,
    positions,
    n_layers: int = 3,
    dim: int = 64,
    seed: int = 0,
) -> FeatureSet:
    """Multi-scale fixed random features.

    Layer ``l`` reads an 8x8 patch of the image mean-pooled ``l`` times, i.e. a
    ``2**l * 8`` pixel footprint around each ``(row, col)`` position, appends a
    constant bias entry, multiplies by a seed-derived Gaussian matrix and
    L2-normalizes.
    """
    img = np.asarray(m.data if isinstance(m, Micrograph) else m, dtype=np.float64)
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    half = _BASE_PATCH // 2
    offs = np.arange(_BASE_PATCH) - half
    layers = []
    level = img
    for l in range(n_layers):
        if l:
            level = _mean_pool2(level)
        p = pos >> l
        rows = p[:, 0, None] + offs[None, :]
        cols = p[:, 1, None] + offs[None, :]
        if len(p) and (rows.min() < 0 or cols.min() < 0 or rows.max() >= level.shape[0] or cols.max() >= level.shape[1]):
            raise ValueError(f"patch out of bounds at layer {l}")
        patches = level[rows[:, :, None], cols[:, None, :]].reshape(len(p), -1)
        x = np.concatenate([patches, np.ones((len(p), 1))], axis=1)
        proj = np.random.default_rng([seed, l]).standard_normal((x.shape[1], dim))
        f = x @ proj
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        layers.append(f)
    return FeatureSet(pos, tuple(layers))


# --------------------------------------------------------------------------- #
# Objectives
# --------------------------------------------------------------------------- #


def gan_objective_value(d_real, d_fake) -> float:
    """``mean log D(real) + mean log(1 - D(fake))``."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    for arr in (d_real, d_fake):
        if arr.size == 0 or np.any(arr <= 0) or np.any(arr >= 1):
            raise ValueError("discriminator probabilities must lie in (0, 1)")
    return float(np.mean(np.log(d_real)) + np.mean(np.log1p(-d_fake)))


def total_objective(gan: float, masknce: float, lam: float = DEFAULT_LAMBDA) -> float:
    return gan + lam * masknce
