"""Tests for directional lights, light files and chrome-sphere calibration."""

import math

import numpy as np
import pytest

from src.exceptions import DataError, FormatError
from src.image_io import RasterImage
from src.lighting import (
    DirectionalLight,
    LightSet,
    calibrate_from_sphere,
    load_lights,
    save_lights,
    standard_rig,
)


def _sphere_with_highlight(size, center, radius, highlight, value=(4.0, 2.0, 1.0)):
    """Dim disc on a black background with one bright pixel."""
    rows, cols = np.mgrid[0:size, 0:size]
    data = np.zeros((size, size, 3))
    inside = (cols - center[0]) ** 2 + (rows - center[1]) ** 2 <= radius**2
    data[inside] = 0.05
    data[highlight[1], highlight[0]] = value
    return RasterImage(data)


class TestDirectionalLight:
    """Test the light value type."""

    def test_from_vector_normalizes(self):
        """Test normalization of arbitrary vectors."""
        light = DirectionalLight.from_vector([0.0, 0.0, 2.0])
        np.testing.assert_array_equal(light.direction, [0.0, 0.0, 1.0])
        np.testing.assert_array_equal(light.intensity, [1.0, 1.0, 1.0])

    def test_rejects_non_unit_direction(self):
        """Test that the constructor requires unit vectors."""
        with pytest.raises(ValueError):
            DirectionalLight([0.0, 0.0, 2.0])

    def test_rejects_zero_vector_and_negative_intensity(self):
        """Test invalid inputs."""
        with pytest.raises(ValueError):
            DirectionalLight.from_vector([0.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            DirectionalLight.from_vector([0.0, 0.0, 1.0], [1.0, -0.1, 1.0])

    def test_parse(self):
        """Test parsing of the command-line form."""
        light = DirectionalLight.parse("0 0 1 0.5 0.5 0.5")
        np.testing.assert_array_equal(light.intensity, [0.5, 0.5, 0.5])
        with pytest.raises(ValueError):
            DirectionalLight.parse("0 0 1")

    def test_flipped(self):
        """Test that flips negate the matching direction component."""
        light = DirectionalLight.from_vector([0.3, 0.4, 0.8])
        horizontal = light.flipped("horizontal").direction
        vertical = light.flipped("vertical").direction
        np.testing.assert_allclose(horizontal, light.direction * [-1, 1, 1])
        np.testing.assert_allclose(vertical, light.direction * [1, -1, 1])

    def test_scaled_and_with_intensity(self):
        """Test intensity helpers keep the direction."""
        light = DirectionalLight.from_vector([1.0, 0.0, 1.0], [0.5, 1.0, 2.0])
        scaled = light.scaled(2.0)
        np.testing.assert_allclose(scaled.intensity, [1.0, 2.0, 4.0])
        np.testing.assert_array_equal(scaled.direction, light.direction)
        white = light.with_intensity((1.0, 1.0, 1.0))
        np.testing.assert_array_equal(white.intensity, [1.0, 1.0, 1.0])


class TestLightFiles:
    """Test light-set text files."""

    def test_single_line(self, tmp_path):
        """Test the canonical white light along +z."""
        path = tmp_path / "lights.txt"
        path.write_text("0 0 0 1 1 1 1\n")
        lights = load_lights(path)
        assert lights.ids == [0]
        np.testing.assert_array_equal(lights[0].direction, [0.0, 0.0, 1.0])
        np.testing.assert_array_equal(lights[0].intensity, [1.0, 1.0, 1.0])

    def test_directions_are_normalized_on_load(self, tmp_path):
        """Test normalization of stored directions."""
        path = tmp_path / "lights.txt"
        path.write_text("# comment\n\n5 0 0 2 1 1 1\n")
        lights = load_lights(path)
        np.testing.assert_array_equal(lights[5].direction, [0.0, 0.0, 1.0])

    def test_round_trip(self, tmp_path):
        """Test save then load preserves the rig."""
        rig = standard_rig()
        path = tmp_path / "rig.txt"
        save_lights(rig, path)
        loaded = load_lights(path)
        assert loaded.ids == rig.ids
        np.testing.assert_allclose(loaded.directions(), rig.directions(), rtol=1e-6)
        np.testing.assert_allclose(loaded.intensities(), rig.intensities(), rtol=1e-6)

    def test_parse_error_names_the_line(self, tmp_path):
        """Test the line number of a malformed entry."""
        path = tmp_path / "bad.txt"
        path.write_text("0 0 0 1 1 1 1\n1 0 0 x 1 1 1\n")
        with pytest.raises(FormatError) as excinfo:
            load_lights(path)
        assert excinfo.value.line == 2

    def test_zero_direction_is_rejected(self, tmp_path):
        """Test rejection of zero-length directions."""
        path = tmp_path / "zero.txt"
        path.write_text("0 0 0 0 1 1 1\n")
        with pytest.raises(FormatError) as excinfo:
            load_lights(path)
        assert excinfo.value.line == 1

    def test_duplicate_ids(self, tmp_path):
        """Test rejection of repeated ids."""
        path = tmp_path / "dup.txt"
        path.write_text("1 0 0 1 1 1 1\n1 0 1 1 1 1 1\n")
        with pytest.raises(FormatError):
            load_lights(path)


class TestStandardRig:
    """Test the default 32-light rig."""

    def test_rig_layout(self):
        """Test count, unit length and upper-hemisphere placement."""
        rig = standard_rig()
        directions = rig.directions()
        assert len(rig) == 32
        assert rig.ids == list(range(32))
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0, atol=1e-12)
        assert directions[:, 2].min() >= 0.15
        assert np.all(rig.intensities() == 1.0)

    def test_rig_is_deterministic(self):
        """Test that two rigs are identical."""
        np.testing.assert_array_equal(standard_rig().directions(), standard_rig().directions())

    def test_subset(self):
        """Test selecting lights by id."""
        rig = standard_rig(8)
        subset = rig.subset([3, 5])
        assert subset.ids == [3, 5]
        assert subset[5] == rig[5]

    def test_empty_set_is_rejected(self):
        """Test that light sets are non-empty."""
        with pytest.raises(ValueError):
            LightSet([])


class TestCalibration:
    """Test chrome-sphere light calibration."""

    def test_highlight_at_center(self):
        """Test that a central highlight means a light at the camera."""
        image = _sphere_with_highlight(64, (32, 32), 20, (32, 32))
        light = calibrate_from_sphere(image, (32, 32), 20, top_fraction=1e-6)
        np.testing.assert_allclose(light.direction, [0.0, 0.0, 1.0], atol=1e-12)

    def test_highlight_at_45_degrees(self):
        """Test the closed-form reflection for a normal at 45 degrees."""
        radius = 20 * math.sqrt(2.0)
        image = _sphere_with_highlight(81, (40, 40), radius, (60, 40))
        light = calibrate_from_sphere(image, (40, 40), radius, top_fraction=1e-6)
        np.testing.assert_allclose(light.direction, [1.0, 0.0, 0.0], atol=1e-9)

    def test_highlight_above_center_points_up(self):
        """Test that image rows map to camera +y upwards."""
        image = _sphere_with_highlight(64, (32, 32), 20, (32, 25))
        light = calibrate_from_sphere(image, (32, 32), 20, top_fraction=1e-6)
        assert light.direction[1] > 0
        assert light.direction[0] == pytest.approx(0.0, abs=1e-12)
        assert np.linalg.norm(light.direction) == pytest.approx(1.0)

    def test_intensity_and_reflectance(self):
        """Test intensity recovery divided by the reflectance."""
        image = _sphere_with_highlight(64, (32, 32), 20, (32, 32), value=(4.0, 2.0, 1.0))
        light = calibrate_from_sphere(image, (32, 32), 20, reflectance=0.5, top_fraction=1e-6)
        np.testing.assert_allclose(light.intensity, [8.0, 4.0, 2.0])

    def test_direction_is_invariant_to_image_scale(self):
        """Test that scaling the image scales intensity only."""
        image = _sphere_with_highlight(64, (32, 32), 20, (36, 29))
        brighter = RasterImage(image.data * 3.0)
        base = calibrate_from_sphere(image, (32, 32), 20, top_fraction=1e-6)
        scaled = calibrate_from_sphere(brighter, (32, 32), 20, top_fraction=1e-6)
        np.testing.assert_allclose(scaled.direction, base.direction, atol=1e-12)
        np.testing.assert_allclose(scaled.intensity, 3.0 * base.intensity, rtol=1e-6)

    def test_disc_outside_image(self):
        """Test rejection of a disc that leaves the image."""
        image = _sphere_with_highlight(32, (16, 16), 10, (16, 16))
        with pytest.raises(DataError):
            calibrate_from_sphere(image, (5, 16), 10)

    def test_uniform_disc(self):
        """Test rejection of a saturated disc without a unique highlight."""
        with pytest.raises(DataError):
            calibrate_from_sphere(RasterImage.full(32, 32, 1.0), (16, 16), 10)
