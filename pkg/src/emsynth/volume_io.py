"""Grid containers, MRC2014 (mode 2) file I/O, annotation tables and intensity normalization.

Axis convention: arrays are indexed ``[z, y, x]`` for volumes and ``[y, x]`` for
micrographs, so x is the fastest-varying axis exactly as in MRC storage order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "MrcError",
    "DensityVolume",
    "Micrograph",
    "ParticleRecord",
    "AnnotationSet",
    "read_mrc",
    "write_mrc",
    "read_mrc_stack",
    "write_mrc_stack",
    "normalize_intensity",
    "write_annotations",
    "read_annotations",
    "ANNOTATION_COLUMNS",
]

HEADER_BYTES = 1024
MODE_FLOAT32 = 2

# MRC2014 main header, 256 four-byte words.
_HEADER_FIELDS = [
    ("nx", "i4"), ("ny", "i4"), ("nz", "i4"),
    ("mode", "i4"),
    ("nxstart", "i4"), ("nystart", "i4"), ("nzstart", "i4"),
    ("mx", "i4"), ("my", "i4"), ("mz", "i4"),
    ("cella", "f4", 3),
    ("cellb", "f4", 3),
    ("mapc", "i4"), ("mapr", "i4"), ("maps", "i4"),
    ("dmin", "f4"), ("dmax", "f4"), ("dmean", "f4"),
    ("ispg", "i4"),
    ("nsymbt", "i4"),
    ("extra1", "V8"),
    ("exttyp", "S4"),
    ("nversion", "i4"),
    ("extra2", "V84"),
    ("origin", "f4", 3),
    ("map", "S4"),
    ("machst", "u1", 4),
    ("rms", "f4"),
    ("nlabl", "i4"),
    ("label", "S80", 10),
]


def _header_dtype(byteorder: str) -> np.dtype:
    fields = []
    for entry in _HEADER_FIELDS:
        name, code = entry[0], entry[1]
        if code[0] in "if":
            code = byteorder + code
        fields.append((name, code) + tuple(entry[2:]))
    dt = np.dtype(fields)
    assert dt.itemsize == HEADER_BYTES
    return dt


_LE_HEADER = _header_dtype("<")
_BE_HEADER = _header_dtype(">")


class MrcError(ValueError):
    """Raised for MRC files this reader does not accept."""


def _as_float_grid(data: Any) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float64)
    return arr


@dataclass(frozen=True, eq=False)
class DensityVolume:
    """Cubic 3D density grid with an isotropic voxel size in Å."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        arr = _as_float_grid(self.data)
        if arr.ndim != 3 or len(set(arr.shape)) != 1:
            raise ValueError(f"non-cubic volume: shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError("volume side length must be at least 2")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def side_length(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class Micrograph:
    """2D image with pixel size in Å.

    The same container carries physical simulations, noisy variants, ice
    weight maps and binary masks; ``role`` is a free-form tag.
    """

    data: np.ndarray
    pixel_size: float = 1.0
    role: str = "image"

    def __post_init__(self):
        arr = _as_float_grid(self.data)
        if arr.ndim != 2:
            raise ValueError(f"micrograph must be 2D, got shape {arr.shape}")
        if min(arr.shape) < 8:
            raise ValueError(f"micrograph dims must be >= 8, got {arr.shape}")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("micrograph contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "pixel_size", float(self.pixel_size))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, role: str | None = None) -> "Micrograph":
        return Micrograph(data, self.pixel_size, self.role if role is None else role)


# --------------------------------------------------------------------------- #
# MRC I/O
# --------------------------------------------------------------------------- #


def _new_header(nx: int, ny: int, nz: int, voxel: float, data: np.ndarray, ispg: int):
    hdr = np.zeros(1, dtype=_LE_HEADER)[0]
    hdr["nx"], hdr["ny"], hdr["nz"] = nx, ny, nz
    hdr["mode"] = MODE_FLOAT32
    hdr["mx"], hdr["my"], hdr["mz"] = nx, ny, nz
    hdr["cella"] = (nx * voxel, ny * voxel, nz * voxel)
    hdr["cellb"] = (90.0, 90.0, 90.0)
    hdr["mapc"], hdr["mapr"], hdr["maps"] = 1, 2, 3
    d64 = data.astype(np.float64)
    hdr["dmin"] = d64.min()
    hdr["dmax"] = d64.max()
    hdr["dmean"] = d64.mean()
    hdr["rms"] = d64.std()
    hdr["ispg"] = ispg
    hdr["nsymbt"] = 0
    hdr["exttyp"] = b""
    hdr["nversion"] = 20140
    hdr["map"] = b"MAP "
    hdr["machst"] = (0x44, 0x44, 0x00, 0x00)
    hdr["nlabl"] = 0
    return hdr


def _write(path, data3: np.ndarray, voxel: float, ispg: int) -> None:
    if data3.size == 0:
        raise ValueError("cannot write an empty grid")
    if not np.all(np.isfinite(data3)):
        raise ValueError("cannot write non-finite data")
    nz, ny, nx = data3.shape
    f32 = np.ascontiguousarray(data3, dtype="<f4")
    hdr = _new_header(nx, ny, nz, voxel, f32, ispg)
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(f32.tobytes())


def write_mrc(grid: DensityVolume | Micrograph, path: str | os.PathLike) -> None:
    """Write a volume or micrograph as a little-endian MRC2014 mode-2 file."""
    if isinstance(grid, DensityVolume):
        _write(path, grid.data, grid.voxel_size, ispg=1)
    elif isinstance(grid, Micrograph):
        _write(path, grid.data[None], grid.pixel_size, ispg=0)
    else:
        raise TypeError(f"expected DensityVolume or Micrograph, got {type(grid).__name__}")


def write_mrc_stack(frames: np.ndarray, pixel_size: float, path: str | os.PathLike) -> None:
    """Write an ``(n, H, W)`` image stack (ISPG 0, NZ = frame count)."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError("stack must be 3D (n, H, W)")
    _write(path, frames, pixel_size, ispg=0)


def _read_raw(path) -> tuple[np.void, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_BYTES:
        raise MrcError(f"truncated file: {path} has no complete header")
    # MACHST decides byte order; fall back to a plausibility check on MODE.
    machst = raw[212]
    if machst == 0x11:
        dt = _BE_HEADER
    elif machst == 0x44:
        dt = _LE_HEADER
    else:
        le_mode = int(np.frombuffer(raw, "<i4", 1, 12)[0])
        dt = _LE_HEADER if 0 <= le_mode < 32 else _BE_HEADER
    hdr = np.frombuffer(raw, dt, 1)[0]
    mode = int(hdr["mode"])
    if mode != MODE_FLOAT32:
        raise MrcError(f"unsupported MRC mode {mode} (only mode 2 / float32 is supported)")
    nx, ny, nz = int(hdr["nx"]), int(hdr["ny"]), int(hdr["nz"])
    if min(nx, ny, nz) < 1:
        raise MrcError(f"invalid grid dimensions {nx}x{ny}x{nz}")
    offset = HEADER_BYTES + int(hdr["nsymbt"])
    n = nx * ny * nz
    if len(raw) < offset + 4 * n:
        raise MrcError(f"truncated file: expected {4 * n} data bytes, found {len(raw) - offset}")
    order = "<" if dt is _LE_HEADER else ">"
    data = np.frombuffer(raw, order + "f4", n, offset).reshape(nz, ny, nx)
    return hdr, data.astype(np.float32)


def _voxel_from_header(hdr) -> float:
    nx = int(hdr["nx"])
    cella = float(hdr["cella"][0])
    voxel = cella / nx if cella > 0 else 1.0
    return voxel


def read_mrc(path: str | os.PathLike) -> DensityVolume | Micrograph:
    """Read a mode-2 MRC file.

    Files with NZ == 1 come back as a :class:`Micrograph`; anything deeper must
    be cubic and comes back as a :class:`DensityVolume`.
    """
    hdr, data = _read_raw(path)
    voxel = _voxel_from_header(hdr)
    nz, ny, nx = data.shape
    if nz == 1:
        return Micrograph(data[0], pixel_size=voxel)
    if not (nx == ny == nz):
        raise MrcError(f"non-cubic volume: {nx}x{ny}x{nz}")
    return DensityVolume(data, voxel_size=voxel)


def read_mrc_stack(path: str | os.PathLike) -> tuple[np.ndarray, float]:
    """Read an image stack; returns ``(frames[n, H, W], pixel_size)``."""
    hdr, data = _read_raw(path)
    return data, _voxel_from_header(hdr)


# --------------------------------------------------------------------------- #
# Intensity normalization
# --------------------------------------------------------------------------- #


def normalize_intensity(
    m: Micrograph,
    target_mean: float = 150.0,
    target_std: float = 40.0,
    clip_max: float = 255.0,
) -> Micrograph:
    """Affinely rescale to the target mean/std, then clip to ``[0, clip_max]``.

    A blank (zero-variance) frame maps to a constant ``target_mean`` image.
    """
    x = np.asarray(m.data, dtype=np.float64)
    std = x.std()
    if std < 1e-12:
        out = np.full_like(x, target_mean)
    else:
        scale = target_std / std
        out = (x - x.mean()) * scale + target_mean
    return m.with_data(np.clip(out, 0.0, clip_max))


# --------------------------------------------------------------------------- #
# Annotations
# --------------------------------------------------------------------------- #

ANNOTATION_COLUMNS = (
    ["mic_id", "cx", "cy"]
    + [f"r{i}{j}" for i in range(3) for j in range(3)]
    + ["conf_idx", "defocus_A"]
)


@dataclass(frozen=True)
class ParticleRecord:
    center: tuple[float, float]  # (x, y) in pixels
    rotation: np.ndarray
    conformation_index: int
    defocus: float


@dataclass
class AnnotationSet:
    """Ground truth for one micrograph: placed particles plus imaging parameters."""

    mic_id: str
    shape: tuple[int, int]
    particles: list[ParticleRecord] = field(default_factory=list)
    ctf: Any = None
    ice: Any = None

    def validate(self, atol: float = 1e-6) -> None:
        h, w = self.shape
        for k, p in enumerate(self.particles):
            r = np.asarray(p.rotation, dtype=np.float64)
            if r.shape != (3, 3):
                raise ValueError(f"particle {k}: rotation must be 3x3")
            if not np.allclose(r @ r.T, np.eye(3), atol=atol) or abs(np.linalg.det(r) - 1) > atol:
                raise ValueError(f"particle {k}: rotation is not proper orthogonal")
            cx, cy = p.center
            if not (0 <= cx <= w and 0 <= cy <= h):
                raise ValueError(f"particle {k}: center {p.center} outside {w}x{h} micrograph")
            if p.conformation_index < 0:
                raise ValueError(f"particle {k}: negative conformation index")


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_annotations(sets: Iterable[AnnotationSet], path: str | os.PathLike) -> None:
    """Write per-particle annotation rows for one or more micrographs as TSV."""
    lines = ["\t".join(ANNOTATION_COLUMNS)]
    for ann in sets:
        for p in ann.particles:
            r = np.asarray(p.rotation, dtype=np.float64).ravel()
            row = [ann.mic_id, _fmt(p.center[0]), _fmt(p.center[1])]
            row += [_fmt(v) for v in r]
            row += [str(int(p.conformation_index)), _fmt(p.defocus)]
            lines.append("\t".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_annotations(path: str | os.PathLike) -> dict[str, list[ParticleRecord]]:
    """Read an annotation TSV into ``{mic_id: [ParticleRecord, ...]}`` (file order)."""
    out: dict[str, list[ParticleRecord]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ANNOTATION_COLUMNS:
            raise ValueError(f"{path}: unexpected annotation header {header}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) != len(ANNOTATION_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(ANNOTATION_COLUMNS)} columns")
            rot = np.array([float(v) for v in cols[3:12]]).reshape(3, 3)
            rec = ParticleRecord(
                center=(float(cols[1]), float(cols[2])),
                rotation=rot,
                conformation_index=int(cols[12]),
                defocus=float(cols[13]),
            )
            out.setdefault(cols[0], []).append(rec)
    return out


def stack_rotations(records: Sequence[ParticleRecord]) -> np.ndarray:
    return np.stack([np.asarray(r.rotation, dtype=np.float64) for r in records]) if records else np.zeros((0, 3, 3))
