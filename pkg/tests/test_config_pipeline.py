import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from emsynth.config import WORKERS_ENV, ConfigError, DatasetConfig, config_keys, parse_config
from emsynth.pipeline import MANIFEST_COLUMNS, generate_dataset
from emsynth.volume_io import Micrograph, read_annotations, read_mrc, write_mrc

from conftest import asymmetric_phantom


@pytest.fixture
def vol_path(tmp_path):
    p = tmp_path / "maps" / "state_a.mrc"
    p.parent.mkdir()
    write_mrc(asymmetric_phantom(32), p)
    return p


def write_cfg(tmp_path, body, name="run.cfg"):
    p = tmp_path / name
    p.write_text(body, encoding="utf-8")
    return p


SMALL = """\
# small test dataset
dataset.volumes = maps/state_a.mrc, maps/state_a.mrc
dataset.count = {count}
dataset.height = 128
dataset.width = 96
dataset.seed = {seed}
dataset.output = {out}
placement.mu_n = 6
placement.sigma_n = 1
ice.blur_sigma = 4
ctf.pixel_size_unused = 1
"""


def small_cfg(tmp_path, vol_path, count=2, seed=7, out="out", extra=""):
    body = SMALL.format(count=count, seed=seed, out=tmp_path / out).replace("ctf.pixel_size_unused = 1\n", "")
    return parse_config(write_cfg(tmp_path, body + extra))


# parsing -------------------------------------------------------------------- #


def test_minimal_config_defaults(tmp_path, vol_path):
    cfg = parse_config(write_cfg(tmp_path, "dataset.volumes = maps/state_a.mrc\ndataset.count = 3\n"))
    assert cfg.count == 3 and cfg.volumes == (str(tmp_path / "maps" / "state_a.mrc"),)
    assert (cfg.height, cfg.width) == (1024, 1024)
    assert cfg.lam == 10.0 and cfg.tau == 0.07 and cfg.snr == 0.1
    assert cfg.source == str(tmp_path / "run.cfg")
    cfg.validate()


def test_values_parsed(tmp_path, vol_path):
    cfg = small_cfg(tmp_path, vol_path, extra="noise.baseline = no\nice.kinds = radial\nplacement.particle_radius = auto\n")
    assert cfg.write_baseline is False and cfg.ice_kinds == ("radial",)
    assert cfg.particle_radius is None and cfg.mu_n == 6.0 and cfg.width == 96


@pytest.mark.parametrize(
    "body,needle",
    [
        ("dataset.volumes = a.mrc\ndataset.count = 1\nloss.lamda = 3\n", ":3: unknown key 'loss.lamda'"),
        ("dataset.volumes = a.mrc\ndataset.count = many\n", ":2: bad value for 'dataset.count'"),
        ("dataset.volumes = a.mrc\n", "missing required key(s): dataset.count"),
        ("dataset.count = 1\ndataset.count = 2\ndataset.volumes = a\n", ":2: duplicate key"),
        ("dataset.volumes a.mrc\n", ":1: expected 'section.key = value'"),
        ("dataset.volumes = a\ndataset.count = 1\noutput.augment = maybe\n", ":3: bad value"),
    ],
)
def test_parse_errors_name_the_line(tmp_path, body, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(write_cfg(tmp_path, body))
    assert needle in str(exc.value)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "nope.cfg")


@pytest.mark.parametrize(
    "field,value,needle",
    [
        ("count", 0, "count"), ("height", 32, "height"), ("workers", 0, "workers"),
        ("ice_min_weight_low", 0.9, "exceed"), ("ice_kinds", ("wavy",), "unsupported"),
        ("noise_model", "pink", "unknown model"), ("threshold_frac", 1.0, "threshold"),
    ],
)
def test_validate_rejects(tmp_path, vol_path, field, value, needle):
    cfg = small_cfg(tmp_path, vol_path)
    if field == "ice_min_weight_low":
        cfg.ice_min_weight_high = 0.6
    setattr(cfg, field, value)
    with pytest.raises(ConfigError, match=needle):
        cfg.validate()


def test_validate_missing_volume(tmp_path):
    cfg = DatasetConfig(volumes=(str(tmp_path / "gone.mrc"),), count=1)
    with pytest.raises(ConfigError, match="file not found"):
        cfg.validate()


def test_workers_env(monkeypatch, tmp_path, vol_path):
    cfg = small_cfg(tmp_path, vol_path)
    monkeypatch.delenv(WORKERS_ENV, raising=False)
    assert cfg.resolved_workers() == 1
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert cfg.resolved_workers() == 3
    cfg.workers = 2
    assert cfg.resolved_workers() == 2


def test_schema_covers_dataclass():
    import dataclasses

    from emsynth.config import _SCHEMA

    attrs = {a for a, _, _ in _SCHEMA.values()}
    fields = {f.name for f in dataclasses.fields(DatasetConfig)} - {"source"}
    assert attrs == fields and len(config_keys()) == len(_SCHEMA)


# generation ----------------------------------------------------------------- #


def _digest_dir(d: Path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir())}


def _manifest(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split("\t")
    return header, [dict(zip(header, l.split("\t"))) for l in lines[1:]]


def test_generate_outputs_and_manifest(tmp_path, vol_path):
    cfg = small_cfg(tmp_path, vol_path)
    manifest = generate_dataset(cfg)
    header, rows = _manifest(manifest)
    assert header == MANIFEST_COLUMNS
    out = Path(cfg.output)
    listed = [r["path"] for r in rows]
    on_disk = sorted(p.name for p in out.iterdir() if p.name != "manifest.tsv")
    assert sorted(listed) == on_disk and len(set(listed)) == len(listed)
    for r in rows:
        assert hashlib.sha256((out / r["path"]).read_bytes()).hexdigest() == r["sha256"]
    kinds = {r["kind"] for r in rows if r["mic_id"] == "00000"}
    assert kinds == {"phy", "mask", "noisy", "inter", "annotations"}

    phy = read_mrc(out / "mic_00000_phy.mrc")
    mask = read_mrc(out / "mic_00000_mask.mrc")
    assert isinstance(phy, Micrograph) and phy.shape == (128, 96)
    assert set(np.unique(mask.data)) <= {0.0, 1.0} and mask.data.any()

    combined = read_annotations(out / "annotations.tsv")
    assert set(combined) == {"00000", "00001"}
    for mic, recs in combined.items():
        row = next(r for r in rows if r["mic_id"] == mic and r["kind"] == "phy")
        assert len(recs) == int(row["n_particles"])
        for rec in recs:
            assert np.allclose(rec.rotation @ rec.rotation.T, np.eye(3), atol=1e-6)
            assert rec.conformation_index in (0, 1)
            assert rec.defocus == pytest.approx(float(row["defocus_A"]), rel=1e-8)


def test_generate_deterministic_and_seed_sensitive(tmp_path, vol_path):
    a = generate_dataset(small_cfg(tmp_path, vol_path, out="a"))
    b = generate_dataset(small_cfg(tmp_path, vol_path, out="b"))
    assert _digest_dir(a.parent) == _digest_dir(b.parent)
    c = generate_dataset(small_cfg(tmp_path, vol_path, out="c", seed=8))
    assert _digest_dir(c.parent)["mic_00000_phy.mrc"] != _digest_dir(a.parent)["mic_00000_phy.mrc"]


def test_generate_worker_count_invariant(tmp_path, vol_path):
    cfg1 = small_cfg(tmp_path, vol_path, count=3, out="w1")
    cfg1.workers = 1
    cfg2 = small_cfg(tmp_path, vol_path, count=3, out="w2")
    cfg2.workers = 2
    assert _digest_dir(generate_dataset(cfg1).parent) == _digest_dir(generate_dataset(cfg2).parent)


def test_generate_index_streams_independent_of_count(tmp_path, vol_path):
    one = generate_dataset(small_cfg(tmp_path, vol_path, count=1, out="n1")).parent
    three = generate_dataset(small_cfg(tmp_path, vol_path, count=3, out="n3")).parent
    assert _digest_dir(one)["mic_00000_phy.mrc"] == _digest_dir(three)["mic_00000_phy.mrc"]


def test_generate_missing_volume_writes_nothing(tmp_path):
    cfg = DatasetConfig(volumes=(str(tmp_path / "gone.mrc"),), count=1, output=str(tmp_path / "never"))
    with pytest.raises(ConfigError):
        generate_dataset(cfg)
    assert not (tmp_path / "never").exists()


def test_generate_rejects_image_as_volume(tmp_path):
    img = tmp_path / "flat.mrc"
    write_mrc(Micrograph(np.zeros((16, 16))), img)
    cfg = DatasetConfig(volumes=(str(img),), count=1, height=64, width=64, output=str(tmp_path / "x"))
    with pytest.raises(ConfigError, match="2D image"):
        generate_dataset(cfg)
    assert not (tmp_path / "x").exists()


def test_generate_augment_and_options(tmp_path, vol_path):
    cfg = small_cfg(
        tmp_path, vol_path, count=1, out="aug",
        extra="output.augment = yes\noutput.normalize = yes\nnoise.baseline = no\nnoise.model = poisson\n",
    )
    out = generate_dataset(cfg).parent
    names = {p.name for p in out.iterdir()}
    assert {"mic_00000_phy_rot90.mrc", "mic_00000_mask_rot270.mrc"} <= names
    assert "mic_00000_noisy.mrc" not in names
    phy = read_mrc(out / "mic_00000_phy.mrc").data
    rot = read_mrc(out / "mic_00000_phy_rot90.mrc").data
    assert np.array_equal(rot, np.rot90(phy))
    inter = read_mrc(out / "mic_00000_inter.mrc").data
    assert inter.min() >= 0 and inter.max() <= 255


def test_generate_unwritable_output(tmp_path, vol_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = small_cfg(tmp_path, vol_path, out="file/sub")
    with pytest.raises(OSError):
        generate_dataset(cfg)
