"""Tests for light-consistent augmentation."""

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from src.augment import (
    AugmentationConfig,
    augment_pair,
    crop_sample,
    crop_window,
    expand_flips,
    flip_normals,
    flip_sample,
    flip_variants,
    jitter_light,
    random_crop,
    sample_rng,
    scale_sample,
)
from src.data_processing import FrameStore, load_manifest
from src.image_io import RasterImage
from src.lighting import DirectionalLight, standard_rig
from src.synth import build_scene, generate_dataset, render_olat


@pytest.fixture(scope="module")
def scene():
    return build_scene(21, 32)


@pytest.fixture
def light():
    return DirectionalLight.from_vector([0.4, -0.3, 0.8], (1.0, 0.9, 0.7))


@pytest.fixture
def frame(scene, light):
    return render_olat(scene, light)


class TestFlips:
    """Test mirroring of frames, normals and lights."""

    @pytest.mark.parametrize("axis", ["horizontal", "vertical"])
    def test_flip_matches_mirrored_render(self, scene, light, frame, axis):
        """Test that flipping a render equals rendering the mirrored scene."""
        flipped = flip_sample(frame, axis)
        mirrored = render_olat(scene.mirrored(axis), light.flipped(axis))
        assert flipped.light == mirrored.light
        for name, image in flipped.rasters().items():
            np.testing.assert_allclose(
                image.data, mirrored.rasters()[name].data, atol=1e-6, err_msg=name
            )

    def test_flip_normals_negates_component(self):
        """Test the normal-component sign change."""
        normals = RasterImage(np.array([[[0.6, 0.0, 0.8], [0.0, 0.6, 0.8]]]))
        horizontal = flip_normals(normals, "horizontal").data
        np.testing.assert_allclose(horizontal[0, 0], [0.0, 0.6, 0.8])
        np.testing.assert_allclose(horizontal[0, 1], [-0.6, 0.0, 0.8])
        vertical = flip_normals(normals, "vertical").data
        np.testing.assert_allclose(vertical[0, 1], [0.0, -0.6, 0.8])

    @pytest.mark.parametrize("axis", ["horizontal", "vertical"])
    def test_double_flip_is_identity(self, frame, axis):
        """Test that flipping twice restores the frame."""
        twice = flip_sample(flip_sample(frame, axis), axis)
        assert twice.light == frame.light
        for name, image in twice.rasters().items():
            np.testing.assert_array_equal(image.data, frame.rasters()[name].data)

    def test_flip_preserves_formation(self, frame):
        """Test I = (A * S + R) * V on every flip variant."""
        variants = flip_variants(frame)
        assert len(variants) == 4
        for variant in variants:
            assert variant.reconstruction_error() <= 1e-6

    def test_unknown_axis(self, frame):
        """Test axis validation."""
        with pytest.raises(ValueError):
            flip_sample(frame, "diagonal")


class TestScaleAndJitter:
    """Test intensity scaling and light jitter."""

    def test_scale_keeps_intrinsics(self, frame):
        """Test that only radiance-like layers and the light intensity scale."""
        scaled = scale_sample(frame, 0.7)
        np.testing.assert_allclose(scaled.image.data, 0.7 * frame.image.data, rtol=1e-6)
        np.testing.assert_allclose(scaled.light.intensity, 0.7 * frame.light.intensity)
        np.testing.assert_array_equal(scaled.albedo.data, frame.albedo.data)
        np.testing.assert_array_equal(scaled.visibility.data, frame.visibility.data)
        assert scaled.reconstruction_error() <= 1e-6

    @pytest.mark.parametrize("factor", [0.0, -1.0])
    def test_scale_rejects_non_positive(self, frame, factor):
        """Test scale factor validation."""
        with pytest.raises(ValueError):
            scale_sample(frame, factor)

    def test_jitter_keeps_unit_direction(self, light):
        """Test that jitter renormalizes and stays close to the original."""
        jittered = jitter_light(light, sample_rng(0, 1), sigma=0.01)
        assert np.linalg.norm(jittered.direction) == pytest.approx(1.0)
        assert np.degrees(np.arccos(jittered.direction @ light.direction)) < 5.0
        np.testing.assert_array_equal(jittered.intensity, light.intensity)

    def test_jitter_spread(self):
        """Test that each direction component moves with a standard deviation near sigma."""
        light = DirectionalLight([0.0, 0.0, 1.0])
        rng = sample_rng(3)
        directions = np.array(
            [jitter_light(light, rng, sigma=0.01).direction for _ in range(4000)]
        )
        assert directions[:, 0].std() == pytest.approx(0.01, rel=0.1)
        assert directions[:, 1].std() == pytest.approx(0.01, rel=0.1)
        assert abs(directions[:, 0].mean()) < 1e-3

    def test_sample_rng_streams(self):
        """Test that streams depend on every key and are reproducible."""
        first = sample_rng(42, 3, 5).random(4)
        np.testing.assert_array_equal(first, sample_rng(42, 3, 5).random(4))
        assert not np.array_equal(first, sample_rng(42, 5, 3).random(4))


class TestCrops:
    """Test shared crop windows."""

    def test_crop_sample(self, frame):
        """Test that every layer is cut to the same window."""
        cropped = crop_sample(frame, 4, 6, 16, 12)
        for name, image in cropped.rasters().items():
            assert (image.height, image.width) == (12, 16)
            np.testing.assert_array_equal(image.data, frame.rasters()[name].data[6:18, 4:20])

    def test_random_crop_reproducible(self, frame):
        """Test that the crop window follows the generator."""
        a = random_crop(frame, 16, 16, sample_rng(7, 0))
        b = random_crop(frame, 16, 16, sample_rng(7, 0))
        np.testing.assert_array_equal(a.image.data, b.image.data)

    def test_crop_window_uniform(self):
        """Test that a 128 crop of a 256 frame places its corner uniformly over 129 offsets."""
        rng = sample_rng(11)
        corners = np.array([crop_window(256, 256, 128, 128, rng) for _ in range(10_000)])
        assert corners.min() == 0 and corners.max() == 128
        # 129 offsets per axis fall into 3 x 3 equal bins of 43
        bins = (corners[:, 0] // 43) * 3 + corners[:, 1] // 43
        counts = np.bincount(bins, minlength=9)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_crop_too_large(self, frame):
        """Test that oversized windows are rejected."""
        with pytest.raises(ValueError):
            random_crop(frame, 64, 16, sample_rng(0))


class TestAugmentPair:
    """Test consistent augmentation of relighting pairs."""

    def test_pair_shares_geometry(self, scene, frame):
        """Test that both frames get the same flips, scale and crop."""
        target = render_olat(scene, DirectionalLight.from_vector([-0.5, 0.2, 0.84]))
        config = AugmentationConfig(crop_size=(20, 20), jitter_sigma=0.0)
        source_aug, target_aug = augment_pair(frame, target, config, sample_rng(3, 1))
        assert source_aug.image.shape == (20, 20, 3)
        np.testing.assert_array_equal(source_aug.albedo.data, target_aug.albedo.data)
        np.testing.assert_array_equal(source_aug.normals.data, target_aug.normals.data)
        ratio = source_aug.light.intensity / frame.light.intensity
        np.testing.assert_allclose(
            target_aug.light.intensity / target.light.intensity, ratio, rtol=1e-9
        )
        for sample in (source_aug, target_aug):
            assert sample.reconstruction_error() <= 1e-5

    def test_crop_clipped_to_frame(self, frame):
        """Test that a crop larger than the frame falls back to the frame size."""
        config = AugmentationConfig(crop_size=(128, 128), flip=False, scale=False)
        source_aug, _ = augment_pair(frame, frame, config, sample_rng(0))
        assert source_aug.image.shape == frame.image.shape

    def test_config_validation(self):
        """Test the scale-range check."""
        with pytest.raises(ValidationError):
            AugmentationConfig(scale_range=(1.2, 0.8))


class TestExpandFlips:
    """Test the offline factor-4 flip expansion."""

    def test_expansion(self, tmp_path):
        """Test scene and light bookkeeping of the expanded dataset."""
        source = generate_dataset(1, standard_rig(4), tmp_path / "src", seed=2, resolution=16)
        expanded = expand_flips(source, tmp_path / "flipped")
        manifest = load_manifest(expanded)
        assert manifest.scene_seeds() == [8, 9, 10, 11]
        assert len(manifest.frames) == 16

        original = FrameStore(source)
        store = FrameStore(expanded)
        assert sorted(store.lights.ids) == list(range(16))
        base = original.load_frame(2, 1)
        horizontal = store.load_frame(9, 5)
        np.testing.assert_array_equal(
            horizontal.image.data, flip_sample(base, "horizontal").image.data
        )
        expected = base.light.flipped("horizontal")
        np.testing.assert_allclose(horizontal.light.direction, expected.direction, atol=1e-8)
        np.testing.assert_array_equal(store.load_frame(8, 1).image.data, base.image.data)
