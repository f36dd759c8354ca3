import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emsynth.optics import CtfParams, apply_psf, ctf_image
from emsynth.specimen import Placement, PlacementConfig, SpecimenLayout, composite_projection, place_particles
from emsynth.synthesis import (
    IceGradientParams,
    NoiseSpec,
    add_noise,
    intermediate_input,
    make_ice_weight_map,
    make_particle_mask,
    measure_snr,
    sample_ice_params,
    scaled_poisson,
    synthesize_physical,
    threshold_mask,
)
from emsynth.volume_io import DensityVolume, Micrograph

from conftest import gaussian_blob


def _mic(a, pixel=1.0):
    return Micrograph(np.asarray(a, dtype=float), pixel_size=pixel)


def _layout(dims, places):
    return SpecimenLayout(dims, tuple(places), len(places))


# ice ------------------------------------------------------------------------ #


def test_ice_flat_when_min_weight_one():
    m = make_ice_weight_map(IceGradientParams("linear", 1.1, None, 1.0, 3.0), (32, 48))
    assert np.array_equal(m.data, np.ones((32, 48)))


def test_ice_linear_ramp():
    m = make_ice_weight_map(IceGradientParams("linear", 0.0, None, 0.5, 0.0), (16, 21)).data
    assert np.allclose(m[:, 0], 1.0) and np.allclose(m[:, -1], 0.5)
    assert np.all(np.diff(m, axis=1) < 0)
    assert np.allclose(m, m[:1])


def test_ice_radial_falls_off_from_center():
    p = IceGradientParams("radial", 0.0, (10.0, 20.0), 0.3, 0.0)
    m = make_ice_weight_map(p, (40, 40)).data
    assert m[20, 10] == m.max() == 1.0
    assert m.min() == pytest.approx(0.3)


@pytest.mark.parametrize("kind", ["linear", "radial"])
def test_ice_blur_renormalised(kind):
    m = make_ice_weight_map(IceGradientParams(kind, 0.4, (5.0, 7.0), 0.2, 5.0), (64, 64)).data
    assert abs(m.max() - 1.0) <= 1e-9
    assert m.min() > 0


def test_ice_param_validation():
    with pytest.raises(ValueError):
        IceGradientParams(min_weight=0.0)
    with pytest.raises(ValueError):
        IceGradientParams(kind="spiral")
    with pytest.raises(ValueError):
        make_ice_weight_map(IceGradientParams(), (4, 64))


def test_sample_ice_params(rng):
    seen = set()
    for _ in range(50):
        p = sample_ice_params(rng, (64, 80), min_weight_range=(0.4, 0.9), blur_sigma=2.0)
        seen.add(p.kind)
        assert 0.4 <= p.min_weight <= 0.9 and p.blur_sigma == 2.0
        if p.kind == "radial":
            assert 0 <= p.center[0] <= 80 and 0 <= p.center[1] <= 64
    assert seen == {"linear", "radial"}


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["linear", "radial"]), st.floats(0, 2 * math.pi), st.floats(0.05, 1.0), st.floats(0, 6))
def test_ice_never_amplifies(kind, direction, min_w, sigma):
    m = make_ice_weight_map(IceGradientParams(kind, direction, (3.0, 9.0), min_w, sigma), (24, 24)).data
    assert np.all(m > 0) and np.all(m <= 1.0)
    x = np.random.default_rng(0).standard_normal(m.shape)
    assert np.all(np.abs(m * x) <= np.abs(x))


# physical image ------------------------------------------------------------- #


def test_physical_identity_stages(phantom32):
    lay = place_particles(PlacementConfig(5, 0, 8), (96, 96), 5, np.random.default_rng(2))
    clean = composite_projection(lay, [phantom32]).data
    phy, ann = synthesize_physical(lay, [phantom32], _mic(np.ones((96, 96))), np.ones((96, 96)))
    assert np.abs(phy.data - clean).max() <= 1e-6 * np.abs(clean).max()
    skipped, _ = synthesize_physical(lay, [phantom32], None, None)
    assert np.array_equal(skipped.data, clean)
    assert len(ann.particles) == 5 and phy.role == "physical"


def test_physical_empty_layout(phantom32):
    c = ctf_image(CtfParams(defocus=1e4), 64, 64)
    phy, ann = synthesize_physical(_layout((64, 64), []), [phantom32], _mic(np.ones((64, 64))), c)
    assert not phy.data.any() and ann.particles == []


def test_physical_weighting_before_psf(phantom32):
    lay = _layout((64, 64), [Placement(np.eye(3), (30.5, 33.25))])
    ramp = make_ice_weight_map(IceGradientParams("linear", 0.0, None, 0.2, 0.0), (64, 64))
    clean = composite_projection(lay, [phantom32])
    phy, _ = synthesize_physical(lay, [phantom32], ramp, np.ones((64, 64)))
    assert np.allclose(phy.data, ramp.data * clean.data, atol=1e-12)
    c = ctf_image(CtfParams(defocus=5000), 64, 64)
    phy2, _ = synthesize_physical(lay, [phantom32], ramp, c)
    ref = apply_psf(clean.with_data(ramp.data * clean.data), c).data
    assert np.allclose(phy2.data, ref, atol=1e-12)
    wrong_order = ramp.data * apply_psf(clean, c).data
    assert not np.allclose(phy2.data, wrong_order, atol=1e-6)


def test_physical_annotations_carry_params(phantom32):
    lay = place_particles(PlacementConfig(3, 0, 8), (64, 64), 3, np.random.default_rng(1))
    p = CtfParams(defocus=12345.0)
    ip = IceGradientParams("radial", 0.0, (3.0, 4.0), 0.5, 1.0)
    _, ann = synthesize_physical(lay, [phantom32], None, None, mic_id="m7", ctf_params=p, ice_params=ip)
    assert ann.mic_id == "m7" and ann.ctf is p and ann.ice is ip
    assert all(r.defocus == 12345.0 for r in ann.particles)


def test_physical_ice_shape_mismatch(phantom32):
    with pytest.raises(ValueError):
        synthesize_physical(_layout((64, 64), []), [phantom32], _mic(np.ones((32, 32))), None)


# noise ---------------------------------------------------------------------- #


def test_measure_snr_examples(rng):
    s = rng.standard_normal((512, 512))
    n = s + rng.standard_normal(s.shape)
    assert measure_snr(_mic(s), _mic(n)) == pytest.approx(1.0, rel=0.02)
    assert measure_snr(_mic(2 * s), _mic(2 * n)) == pytest.approx(measure_snr(_mic(s), _mic(n)), rel=1e-12)
    with pytest.raises(ValueError, match="infinite SNR"):
        measure_snr(_mic(s), _mic(s))


def _phantom_frame(n=1024, seed=0):
    vol = DensityVolume(gaussian_blob(32, 5.0))
    lay = place_particles(PlacementConfig(150, 0, 16), (n, n), 150, np.random.default_rng(seed))
    return composite_projection(lay, [vol])


def test_gaussian_noise_hits_target_snr():
    clean = _phantom_frame()
    noisy = add_noise(clean, NoiseSpec("gaussian", 0.1), np.random.default_rng(4))
    assert 0.09 <= measure_snr(clean, noisy) <= 0.11


def test_gaussian_noise_high_snr_limit(rng):
    clean = _mic(rng.uniform(1, 2, (128, 128)))
    out = add_noise(clean, NoiseSpec("gaussian", 1e9), rng)
    assert np.abs(out.data - clean.data).max() <= 1e-3 * np.abs(clean.data).max()


def test_poisson_moments():
    x = np.full(1_000_000, 1.0)
    draws = scaled_poisson(x, 100.0, np.random.default_rng(8)) * 100.0
    assert draws.mean() == pytest.approx(100, rel=0.02)
    assert draws.var() == pytest.approx(100, rel=0.02)


@pytest.mark.parametrize("model", ["poisson", "poisson_gaussian"])
@pytest.mark.parametrize("snr", [0.1, 1.0])
def test_poisson_models_hit_target(model, snr):
    clean = _phantom_frame(256, seed=3)
    noisy = add_noise(clean, NoiseSpec(model, snr, 0.5), np.random.default_rng(5))
    assert abs(measure_snr(clean, noisy) - snr) <= 0.1 * snr
    assert noisy.role == f"noisy_{model}"


def test_poisson_constant_image_rejected(rng):
    with pytest.raises(ValueError, match="degenerate signal"):
        add_noise(_mic(np.full((32, 32), 3.0)), NoiseSpec("poisson"), rng)


def test_noise_pure_and_seeded(rng):
    clean = _mic(rng.uniform(0, 1, (64, 64)))
    before = clean.data.copy()
    for model in ("gaussian", "poisson", "poisson_gaussian"):
        a = add_noise(clean, NoiseSpec(model, 0.5), np.random.default_rng(1))
        b = add_noise(clean, NoiseSpec(model, 0.5), np.random.default_rng(1))
        assert np.array_equal(a.data, b.data)
    assert np.array_equal(clean.data, before)


def test_noise_spec_validation():
    for kw in (dict(model="salt"), dict(target_snr=0), dict(mix_ratio=1.5)):
        with pytest.raises(ValueError):
            NoiseSpec(**kw)


# masks ---------------------------------------------------------------------- #


def test_mask_empty(phantom32):
    m = make_particle_mask(_layout((48, 48), []), [phantom32])
    assert not m.data.any() and m.role == "mask"


def test_mask_tiny_threshold_is_support():
    # a box volume projects to a patch with exact compact support
    v = np.zeros((16, 16, 16))
    v[6:11, 5:9, 4:12] = 1.0
    vol = DensityVolume(v)
    lay = _layout((40, 40), [Placement(np.eye(3), (20.0, 20.0))])
    m = make_particle_mask(lay, [vol], threshold_frac=1e-9).data
    expect = np.zeros((40, 40))
    expect[12 + 5:12 + 9, 12 + 4:12 + 12] = 1
    assert np.array_equal(m, expect)


def test_mask_disjoint_area_adds(phantom32):
    places = [Placement(np.eye(3), (20.0, 20.0)), Placement(np.eye(3), (80.3, 70.6))]
    both = make_particle_mask(_layout((100, 100), places), [phantom32]).data
    singles = [make_particle_mask(_layout((100, 100), [p]), [phantom32]).data.sum() for p in places]
    assert both.sum() == sum(singles)
    assert set(np.unique(both)) <= {0.0, 1.0}


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.integers(0, 1000))
def test_mask_rethreshold_idempotent(f1, f2, seed):
    img = np.random.default_rng(seed).uniform(-1, 1, (20, 20))
    m = threshold_mask(img, f1).astype(float)
    if m.any():
        assert np.array_equal(threshold_mask(m, f2).astype(float), m)


def test_threshold_mask_bad_frac():
    with pytest.raises(ValueError):
        threshold_mask(np.ones((4, 4)), 1.0)


# intermediate input --------------------------------------------------------- #


def test_intermediate_identity(rng):
    m = _mic(rng.standard_normal((32, 32)))
    out = intermediate_input(m, 0.0, rng)
    assert np.array_equal(out.data, m.data) and out.data is not m.data


def test_intermediate_zero_mean_and_std():
    m = _phantom_frame(1024, seed=9)
    sig = m.data.std()
    bound = 3 * sig / math.sqrt(m.data.size)
    a = intermediate_input(m, 1.0, np.random.default_rng(1))
    b = intermediate_input(m, 1.0, np.random.default_rng(2))
    assert abs(a.data.mean() - m.data.mean()) < bound
    assert abs(b.data.mean() - m.data.mean()) < bound
    assert not np.array_equal(a.data, b.data)
    assert (a.data - m.data).std() == pytest.approx(sig, rel=0.01)
    with pytest.raises(ValueError):
        intermediate_input(m, -1.0, np.random.default_rng(0))
