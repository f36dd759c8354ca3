"""Scoring for particle picks and pose estimates."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume_io import DensityVolume

__all__ = [
    "PickSet",
    "PoseSet",
    "PRCurve",
    "FscCurve",
    "Resolution",
    "match_picks",
    "pr_curve",
    "auprc",
    "fsc",
    "resolution_at_threshold",
    "align_rotations",
    "apply_alignment",
    "rotation_error",
    "pose_supervision_loss",
    "read_picks",
    "write_picks",
    "read_poses",
    "write_poses",
]


@dataclass(frozen=True)
class PickSet:
    centers: np.ndarray  # (n, 2) as (x, y)
    scores: np.ndarray   # (n,)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(c) != len(s):
            raise ValueError("one score per pick required")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(s))):
            raise ValueError("picks must be finite")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "scores", s)

    def __len__(self) -> int:
        return len(self.scores)

    def top(self, k: int) -> "PickSet":
        order = np.argsort(-self.scores, kind="stable")[:k]
        return PickSet(self.centers[order], self.scores[order])


@dataclass(frozen=True)
class PoseSet:
    rotations: np.ndarray              # (n, 3, 3)
    translations: np.ndarray | None = None  # (n, 2) pixels

    def __post_init__(self):
        r = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3, 3)
        t = self.translations
        t = np.zeros((len(r), 2)) if t is None else np.asarray(t, dtype=np.float64).reshape(-1, 2)
        if len(t) != len(r):
            raise ValueError("one translation per rotation required")
        eye = np.eye(3)
        if len(r):
            orth = np.abs(np.einsum("nij,nkj->nik", r, r) - eye).max()
            if orth > 1e-6 or np.abs(np.linalg.det(r) - 1).max() > 1e-6:
                raise ValueError("pose rotations must be proper orthogonal")
        object.__setattr__(self, "rotations", r)
        object.__setattr__(self, "translations", t)

    def __len__(self) -> int:
        return len(self.rotations)


# --------------------------------------------------------------------------- #
# Picking
# --------------------------------------------------------------------------- #


def match_picks(pred: PickSet, gt_centers, radius: float) -> tuple[np.ndarray, int]:
    """Greedy one-to-one matching in descending confidence.

    Returns a boolean TP label per pick (input order) and the false-negative
    count. Each pick claims the nearest still-unmatched ground-truth center
    within ``radius``; equal confidences keep input order.
    """
    if not radius > 0:
        raise ValueError("match radius must be positive")
    gt = np.asarray(gt_centers, dtype=np.float64).reshape(-1, 2)
    labels = np.zeros(len(pred), dtype=bool)
    if len(gt) == 0 or len(pred) == 0:
        return labels, len(gt)
    tree = cKDTree(gt)
    taken = np.zeros(len(gt), dtype=bool)
    for i in np.argsort(-pred.scores, kind="stable"):
        near = tree.query_ball_point(pred.centers[i], radius)
        free = [j for j in near if not taken[j]]
        if not free:
            continue
        d = np.linalg.norm(gt[free] - pred.centers[i], axis=1)
        j = free[int(np.argmin(d))]
        taken[j] = True
        labels[i] = True
    return labels, int((~taken).sum())


@dataclass(frozen=True)
class PRCurve:
    thresholds: np.ndarray  # distinct confidences, descending
    precision: np.ndarray
    recall: np.ndarray


def pr_curve(labels, scores, total_gt: int) -> PRCurve:
    """Precision/recall among picks scoring at least each distinct confidence."""
    if total_gt < 1:
        raise ValueError("total_gt must be at least 1")
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    s, tp = scores[order], labels[order].astype(np.int64)
    cum_tp = np.cumsum(tp)
    # last index of each run of equal confidence
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True]) if len(s) else np.array([], dtype=int)
    n_kept = last + 1
    return PRCurve(s[last], cum_tp[last] / n_kept, cum_tp[last] / total_gt)


def auprc(curve: PRCurve) -> float:
    """Sum of ``precision(k) * (recall(k) - recall(k-1))`` with ``recall(0) = 0``."""
    if len(curve.recall) == 0:
        return 0.0
    d_recall = np.diff(np.r_[0.0, curve.recall])
    # correctly rounded, so the result does not depend on summation order
    return math.fsum((curve.precision * d_recall).tolist())


# --------------------------------------------------------------------------- #
# Fourier shell correlation
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FscCurve:
    values: np.ndarray  # index = integer shell radius, 0 .. D//2 - 1
    side_length: int

    @property
    def shells(self) -> np.ndarray:
        return np.arange(len(self.values))


def _shell_index(d: int) -> np.ndarray:
    k = np.fft.fftfreq(d) * d
    kz, ky, kx = np.meshgrid(k, k, k, indexing="ij")
    return np.rint(np.sqrt(kx ** 2 + ky ** 2 + kz ** 2)).astype(np.int64)


def _grid(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, DensityVolume) else v, dtype=np.float64)


def fsc(v1: DensityVolume, v2: DensityVolume) -> FscCurve:
    """Per-shell normalized cross-correlation of two volumes' Fourier transforms."""
    a, b = _grid(v1), _grid(v2)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    d = a.shape[0]
    n_shells = d // 2
    f1, f2 = np.fft.fftn(a), np.fft.fftn(b)
    r = _shell_index(d).ravel()
    keep = r < n_shells
    r = r[keep]
    cross = np.bincount(r, (f1 * np.conj(f2)).real.ravel()[keep], n_shells)
    e1 = np.bincount(r, (np.abs(f1) ** 2).ravel()[keep], n_shells)
    e2 = np.bincount(r, (np.abs(f2) ** 2).ravel()[keep], n_shells)
    out = np.zeros(n_shells)
    empty1, empty2 = e1 < 1e-20, e2 < 1e-20
    both = empty1 & empty2
    ok = ~(empty1 | empty2)
    out[ok] = cross[ok] / np.sqrt(e1[ok] * e2[ok])
    out[both] = 1.0
    return FscCurve(np.clip(out, -1.0, 1.0), d)


@dataclass(frozen=True)
class Resolution:
    shell: float       # crossing radius in frequency-index units
    angstrom: float    # D * voxel_size / shell
    pixels: float      # D / shell (Å per cycle with unit voxels)
    crossed: bool      # False when the curve never drops below the threshold


def resolution_at_threshold(curve: FscCurve, threshold: float = 0.143, voxel_size: float = 1.0) -> Resolution:
    """First downward crossing of ``threshold``, linearly interpolated between shells."""
    c = np.asarray(curve.values)
    if len(c) == 0:
        raise ValueError("empty FSC curve")
    d = curve.side_length
    below = np.flatnonzero(c[1:] < threshold)
    if len(below) == 0:
        r_cross, crossed = d / 2.0, False
    else:
        r = int(below[0]) + 1
        hi, lo = c[r - 1], c[r]
        r_cross = (r - 1) + (hi - threshold) / (hi - lo)
        crossed = True
    return Resolution(r_cross, d * voxel_size / r_cross, d / r_cross, crossed)


# --------------------------------------------------------------------------- #
# Poses
# --------------------------------------------------------------------------- #


def align_rotations(pred: PoseSet, gt: PoseSet) -> np.ndarray:
    """Global rotation ``A`` minimizing ``sum ||R_gt - A R_pred||_F^2``."""
    if len(pred) != len(gt) or len(pred) == 0:
        raise ValueError("need equal, non-zero numbers of poses")
    m = np.einsum("nij,nkj->ik", gt.rotations, pred.rotations)
    u, s, vt = np.linalg.svd(m)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise ValueError("alignment ill-conditioned")
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return u @ fix @ vt


def apply_alignment(align: np.ndarray, poses: PoseSet) -> PoseSet:
    return PoseSet(np.einsum("ij,njk->nik", align, poses.rotations), poses.translations)


def rotation_error(pred: PoseSet, gt: PoseSet, axis=(0.0, 0.0, 1.0)) -> float:
    """Mean angle (radians) between ``R_gt v`` and ``R_pred v``."""
    if len(pred) != len(gt):
        raise ValueError("pose count mismatch")
    if len(pred) == 0:
        return 0.0
    v = np.asarray(axis, dtype=np.float64)
    a = gt.rotations @ v
    b = pred.rotations @ v
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    # atan2 form of arccos(a.b): exact for identical vectors, well conditioned near 0 and pi
    sin = np.linalg.norm(np.cross(a, b), axis=1)
    cos = np.einsum("ni,ni->n", a, b)
    return float(np.mean(np.arctan2(sin, cos)))


def pose_supervision_loss(pred: PoseSet, gt: PoseSet) -> float:
    """Mean of ``||dR||_F^2 / 9 + ||dT||_1 / 2`` over the batch."""
    if len(pred) != len(gt):
        raise ValueError("pose count mismatch")
    if len(pred) == 0:
        return 0.0
    dr = np.sum((gt.rotations - pred.rotations) ** 2, axis=(1, 2)) / 9.0
    dt = 0.5 * np.sum(np.abs(gt.translations - pred.translations), axis=1)
    return float(np.mean(dr + dt))


# --------------------------------------------------------------------------- #
# TSV tables
# --------------------------------------------------------------------------- #

PICK_COLUMNS = ["mic_id", "cx", "cy", "score"]
POSE_COLUMNS = ["idx"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty"]


def _read_table(path, columns):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != columns:
            raise ValueError(f"{path}: expected header {columns}, got {header}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != len(columns):
                raise ValueError(f"{path}:{lineno}: expected {len(columns)} columns, got {len(cols)}")
            rows.append(cols)
    return rows


def read_picks(path: str | os.PathLike) -> dict[str, PickSet]:
    groups: dict[str, list] = {}
    for mic, cx, cy, score in _read_table(path, PICK_COLUMNS):
        groups.setdefault(mic, []).append((float(cx), float(cy), float(score)))
    return {k: PickSet(np.array(v)[:, :2], np.array(v)[:, 2]) for k, v in groups.items()}


def write_picks(picks: dict[str, PickSet], path: str | os.PathLike) -> None:
    lines = ["\t".join(PICK_COLUMNS)]
    for mic, ps in picks.items():
        for (x, y), s in zip(ps.centers, ps.scores):
            lines.append(f"{mic}\t{x:.9g}\t{y:.9g}\t{s:.9g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_poses(path: str | os.PathLike) -> PoseSet:
    rows = _read_table(path, POSE_COLUMNS)
    rows.sort(key=lambda r: int(r[0]))
    arr = np.array([[float(x) for x in r[1:]] for r in rows]).reshape(-1, 11)
    return PoseSet(arr[:, :9].reshape(-1, 3, 3), arr[:, 9:])


def write_poses(poses: PoseSet, path: str | os.PathLike) -> None:
    lines = ["\t".join(POSE_COLUMNS)]
    for i, (r, t) in enumerate(zip(poses.rotations, poses.translations)):
        vals = [f"{x:.9g}" for x in r.ravel()] + [f"{x:.9g}" for x in t]
        lines.append("\t".join([str(i)] + vals))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
