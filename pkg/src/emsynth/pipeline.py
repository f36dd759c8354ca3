"""Dataset generation: one seeded stream per micrograph, optional process pool.

Micrograph ``i`` draws everything from ``default_rng([seed, i])``, so outputs do
not depend on how indices are distributed over workers. Workers write their own
files; the manifest is assembled in index order once all of them finish.
"""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, DatasetConfig
from .optics import CtfParams, ctf_image, sample_defocus
from .specimen import PlacementConfig, place_particles, placed_patches, sample_particle_count
from .synthesis import (
    NoiseSpec,
    add_noise,
    intermediate_input,
    make_ice_weight_map,
    make_particle_mask,
    sample_ice_params,
    synthesize_physical,
)
from .volume_io import DensityVolume, Micrograph, normalize_intensity, read_mrc, write_annotations, write_mrc

__all__ = ["generate_dataset", "load_conformations", "MANIFEST_COLUMNS"]

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = [
    "mic_id", "kind", "path", "sha256", "seed", "n_particles", "shortfall",
    "defocus_A", "ice_kind", "ice_direction", "ice_center_x", "ice_center_y",
    "ice_min_weight", "ice_blur_sigma", "noise_model", "snr", "noise_std_frac",
]

_VOLUMES: list[DensityVolume] | None = None


def load_conformations(paths) -> list[DensityVolume]:
    vols = []
    for p in paths:
        v = read_mrc(p)
        if not isinstance(v, DensityVolume):
            raise ConfigError(f"{p}: expected a 3D density volume, found a 2D image")
        vols.append(v)
    d0, s0 = vols[0].side_length, vols[0].voxel_size
    for p, v in zip(paths, vols):
        if v.side_length != d0 or not np.isclose(v.voxel_size, s0):
            raise ConfigError(f"{p}: conformations must share side length and voxel size")
    return vols


def _init_worker(paths):
    global _VOLUMES
    _VOLUMES = load_conformations(paths)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def _generate_one(cfg: DatasetConfig, out: Path, index: int) -> list[dict]:
    vols = _VOLUMES
    rng = np.random.default_rng([cfg.seed, index])
    mic_id = f"{index:05d}"
    dims = (cfg.height, cfg.width)
    d, pixel = vols[0].side_length, vols[0].voxel_size

    radius = cfg.particle_radius if cfg.particle_radius is not None else d / 2
    pcfg = PlacementConfig(cfg.mu_n, cfg.sigma_n, radius, cfg.overlap_factor, cfg.margin, cfg.max_attempts)
    n = sample_particle_count(pcfg, rng)
    layout = place_particles(pcfg, dims, n, rng, n_conformations=len(vols))
    defocus = sample_defocus(cfg.defocus_mean, cfg.defocus_std, rng)
    ctf = CtfParams.from_voltage(
        cfg.voltage_kv, defocus=defocus, w=cfg.amplitude_contrast, cs=cfg.cs,
        phase_shift=cfg.phase_shift, pixel_size=pixel,
    )
    ice_p = sample_ice_params(
        rng, dims, cfg.ice_kinds, (cfg.ice_min_weight_low, cfg.ice_min_weight_high), cfg.ice_blur_sigma
    )
    ice = make_ice_weight_map(ice_p, dims, pixel)
    patches = list(placed_patches(layout, vols))
    i_phy, ann = synthesize_physical(
        layout, vols, ice, ctf_image(ctf, *dims),
        mic_id=mic_id, ctf_params=ctf, ice_params=ice_p, patches=patches,
    )
    mask = make_particle_mask(layout, vols, cfg.threshold_frac, patches=patches)

    images: list[tuple[str, Micrograph]] = [("phy", i_phy), ("mask", mask)]
    if cfg.write_baseline:
        noisy = add_noise(i_phy, NoiseSpec(cfg.noise_model, cfg.snr, cfg.mix_ratio), rng)
        images.append(("noisy", normalize_intensity(noisy) if cfg.normalize else noisy))
    if cfg.write_intermediate:
        inter = intermediate_input(i_phy, cfg.noise_std_frac, rng)
        images.append(("inter", normalize_intensity(inter) if cfg.normalize else inter))
    if cfg.augment:
        for k in (1, 2, 3):
            images.append((f"phy_rot{90 * k}", i_phy.with_data(np.rot90(i_phy.data, k))))
            images.append((f"mask_rot{90 * k}", mask.with_data(np.rot90(mask.data, k))))

    common = {
        "mic_id": mic_id, "seed": f"{cfg.seed}:{index}", "n_particles": len(layout),
        "shortfall": layout.shortfall, "defocus_A": defocus, "ice_kind": ice_p.kind,
        "ice_direction": ice_p.direction if ice_p.kind == "linear" else None,
        "ice_center_x": ice_p.center[0] if ice_p.center else None,
        "ice_center_y": ice_p.center[1] if ice_p.center else None,
        "ice_min_weight": ice_p.min_weight, "ice_blur_sigma": ice_p.blur_sigma,
        "noise_model": cfg.noise_model if cfg.write_baseline else None,
        "snr": cfg.snr if cfg.write_baseline else None,
        "noise_std_frac": cfg.noise_std_frac if cfg.write_intermediate else None,
    }
    rows = []
    for kind, img in images:
        rel = f"mic_{mic_id}_{kind}.mrc"
        write_mrc(img, out / rel)
        rows.append({**common, "kind": kind, "path": rel, "sha256": _sha256(out / rel)})
    rel = f"mic_{mic_id}_annotations.tsv"
    write_annotations([ann], out / rel)
    rows.append({**common, "kind": "annotations", "path": rel, "sha256": _sha256(out / rel)})
    if layout.shortfall:
        log.warning("micrograph %s: placed %d of %d particles", mic_id, len(layout), layout.requested)
    return rows


def _run_index(args):
    cfg, out, index = args
    return _generate_one(cfg, out, index)


def generate_dataset(cfg: DatasetConfig) -> Path:
    """Generate ``cfg.count`` micrographs into ``cfg.output``; returns the manifest path."""
    cfg.validate()
    vols_paths = list(cfg.volumes)
    _init_worker(vols_paths)  # fail on bad volumes before writing anything
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")

    workers = cfg.resolved_workers()
    tasks = [(cfg, out, i) for i in range(cfg.count)]
    if workers <= 1:
        results = [_run_index(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(vols_paths,)) as ex:
            results = list(ex.map(_run_index, tasks))

    rows = [r for per_mic in results for r in per_mic]
    all_ann = out / "annotations.tsv"
    lines = []
    for per_mic in results:
        ann_path = out / next(r["path"] for r in per_mic if r["kind"] == "annotations")
        body = ann_path.read_text(encoding="utf-8").splitlines()
        if not lines:
            lines.append(body[0])
        lines.extend(body[1:])
    all_ann.write_text("\n".join(lines) + "\n", encoding="utf-8")
    rows.append({"mic_id": "all", "kind": "annotations_all", "path": all_ann.name, "sha256": _sha256(all_ann)})

    manifest = out / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(r.get(c)) for c in MANIFEST_COLUMNS) + "\n")
    return manifest
