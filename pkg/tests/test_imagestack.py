import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image as PILImage

from svdrestore.imagestack import (
    KINDS, DegradationError, DegradationSpec, ImageDecodeError, apply_degradation, gaussian_kernel,
    load_image, motion_kernel, sample_patches, save_image, synthetic_clean, validate_image,
)


def test_load_bytes_over_255(tmp_path):
    raw = np.array([[0, 255], [128, 64]], dtype=np.uint8)
    PILImage.fromarray(raw).save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png")
    assert img.shape == (2, 2, 1)
    np.testing.assert_array_equal(img[:, :, 0], raw.astype(np.float32) / np.float32(255))
    assert img[1, 0, 0] == np.float32(128 / 255)


def test_png_round_trip_bit_exact(tmp_path, rng):
    raw = rng.integers(0, 256, size=(17, 23, 3), dtype=np.uint8)
    PILImage.fromarray(raw).save(tmp_path / "in.png")
    save_image(load_image(tmp_path / "in.png"), tmp_path / "out.png")
    np.testing.assert_array_equal(np.asarray(PILImage.open(tmp_path / "out.png")), raw)


def test_truncated_png_is_decode_error(tmp_path, rng):
    raw = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    PILImage.fromarray(raw).save(tmp_path / "ok.png")
    blob = (tmp_path / "ok.png").read_bytes()
    (tmp_path / "bad.png").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ImageDecodeError):
        load_image(tmp_path / "bad.png")


def test_unsupported_mode_named(tmp_path):
    PILImage.fromarray(np.zeros((8, 8), np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(ImageDecodeError, match="mode"):
        load_image(tmp_path / "deep.png")
    PILImage.new("RGB", (8, 8)).save(tmp_path / "x.jpg", format="JPEG")
    with pytest.raises(ImageDecodeError, match="PNG"):
        load_image(tmp_path / "x.jpg")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_validate_rejects():
    with pytest.raises(ValueError):
        validate_image(np.zeros((4, 16, 3)))
    with pytest.raises(ValueError):
        validate_image(np.full((8, 8, 3), 1.5))
    with pytest.raises(ValueError):
        validate_image(np.zeros((8, 8, 2)))


def test_haze_t1_identity(clean64):
    out = apply_degradation(clean64, DegradationSpec("Haze", {"t": 1.0, "A": 0.9}))
    np.testing.assert_array_equal(out, clean64)


def test_lowlight_identity_and_exact_scale(clean64):
    np.testing.assert_array_equal(apply_degradation(clean64, DegradationSpec("LowLight", {"s": 1.0, "g": 1.0})),
                                  clean64)
    out = apply_degradation(clean64, DegradationSpec("LowLight", {"s": 0.3}))
    np.testing.assert_array_equal(out, clean64 * np.float32(0.3))


def test_haze_formula(clean64):
    out = apply_degradation(clean64, DegradationSpec("Haze", {"t": 0.4, "A": 0.8}))
    ref = np.clip(clean64.astype(np.float64) * 0.4 + 0.8 * 0.6, 0, 1).astype(np.float32)
    np.testing.assert_array_equal(out, ref)


def test_haze_ramp_monotone():
    flat = np.full((32, 32, 1), 0.2, np.float32)
    out = apply_degradation(flat, DegradationSpec("Haze", {"t": 0.9, "t_far": 0.2, "A": 1.0}))
    col = out[:, 0, 0]
    assert col[0] > col[-1]
    assert np.all(np.diff(col) <= 1e-7)


def test_noise_std_within_10pct():
    flat = np.full((128, 128, 1), 0.5, np.float32)
    out = apply_degradation(flat, DegradationSpec("GaussianNoise", {"sigma": 25}, seed=9))
    std = float(np.std(out.astype(np.float64) - 0.5))
    assert abs(std - 25 / 255) <= 0.1 * 25 / 255


def test_kernels_normalized():
    assert gaussian_kernel(2.0).sum() == pytest.approx(1.0)
    assert motion_kernel(9, 30).sum() == pytest.approx(1.0)
    k = gaussian_kernel(1.5)
    np.testing.assert_allclose(k, k.T)


def test_blur_constant_image_invariant():
    flat = np.full((24, 24, 3), 0.3, np.float32)
    for params in ({"sigma_b": 2.0}, {"mode": "motion", "length": 7, "angle": 45}):
        out = apply_degradation(flat, DegradationSpec("Blur", params))
        np.testing.assert_allclose(out, 0.3, atol=1e-6)


def test_rain_adds_bright_streaks(clean64):
    out = apply_degradation(clean64, DegradationSpec("Rain", {}, seed=3))
    diff = out.astype(np.float64) - clean64
    assert diff.min() >= -1e-7
    assert diff.max() > 0.05
    # streaks are near vertical: vertical neighbours correlate more than horizontal ones
    d = diff.mean(axis=2)
    vert = np.corrcoef(d[1:].ravel(), d[:-1].ravel())[0, 1]
    horiz = np.corrcoef(d[:, 1:].ravel(), d[:, :-1].ravel())[0, 1]
    assert vert > horiz


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic_and_clamped(kind, clean64):
    spec = DegradationSpec(kind, {}, seed=2**64 - 1)
    a = apply_degradation(clean64, spec)
    b = apply_degradation(clean64, spec)
    assert a.tobytes() == b.tobytes()
    assert a.dtype == np.float32 and a.shape == clean64.shape
    assert a.min() >= 0.0 and a.max() <= 1.0


@pytest.mark.parametrize("kind,params", [
    ("GaussianNoise", {"sigma": 0.5}), ("GaussianNoise", {"sigma": 101}), ("Haze", {"t": 0.0}),
    ("Haze", {"A": 1.2}), ("LowLight", {"s": 0.0}), ("LowLight", {"s": 1.5}), ("Blur", {"mode": "box"}),
    ("Rain", {"angle_min": 120}), ("GaussianNoise", {"bogus": 1}), ("Fog", {}),
])
def test_invalid_specs(kind, params):
    with pytest.raises(DegradationError):
        DegradationSpec(kind, params)


def test_spec_seed_range():
    with pytest.raises(DegradationError):
        DegradationSpec("Haze", {}, seed=-1)
    with pytest.raises(DegradationError):
        DegradationSpec("Haze", {}, seed=2**64)


def test_spec_json_round_trip():
    spec = DegradationSpec("noise", {"sigma": 15}, seed=42)
    assert spec.kind == "GaussianNoise"
    again = DegradationSpec.from_json(spec.to_json())
    assert again == spec
    with pytest.raises(DegradationError):
        DegradationSpec.from_dict({"kind": "Haze", "colour": 1})


def test_patches_full_image():
    img = synthetic_clean(32, 32, 3, seed=0)
    (p,) = sample_patches(img, 32, 1, seed=7)
    np.testing.assert_array_equal(p, img)


def test_patches_deterministic_and_aligned(clean64):
    deg = apply_degradation(clean64, DegradationSpec("LowLight", {"s": 0.5}))
    a = sample_patches(clean64, 16, 10, seed=3)
    b = sample_patches(clean64, 16, 10, seed=3)
    d = sample_patches(deg, 16, 10, seed=3)
    for x, y, z in zip(a, b, d):
        np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(z, x * np.float32(0.5))


def test_patch_corners_bound_exhaustive():
    img = np.arange(64 * 64, dtype=np.float64).reshape(64, 64, 1)
    for seed in range(20):
        for p in sample_patches(img, 32, 100, seed=seed):
            y, x = divmod(int(p[0, 0, 0]), 64)
            assert 0 <= y <= 32 and 0 <= x <= 32


def test_patch_too_large(clean64):
    with pytest.raises(ValueError):
        sample_patches(clean64, 65, 1, seed=0)


def test_synthetic_clean_properties():
    a = synthetic_clean(40, 56, 3, seed=11)
    assert a.shape == (40, 56, 3) and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, synthetic_clean(40, 56, 3, seed=11))
    assert not np.array_equal(a, synthetic_clean(40, 56, 3, seed=12))
    assert synthetic_clean(16, 16, 1, seed=0).shape == (16, 16, 1)


@settings(max_examples=25, deadline=None)
@given(kind=st.sampled_from(KINDS), seed=st.integers(0, 2**64 - 1), h=st.integers(8, 40), w=st.integers(8, 40))
def test_generators_in_range_property(kind, seed, h, w):
    img = synthetic_clean(h, w, 3, seed=seed % 1000)
    out = apply_degradation(img, DegradationSpec(kind, {}, seed=seed))
    assert out.shape == img.shape
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1
