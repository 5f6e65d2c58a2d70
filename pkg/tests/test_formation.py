"""Tests for the image-formation operators."""

import numpy as np
import pytest

from src.exceptions import DataError
from src.formation import (
    FormationBatch,
    IntrinsicSet,
    compose,
    diffuse_render,
    relight_diffuse,
    shading,
)
from src.image_io import RasterImage
from src.lighting import DirectionalLight
from src.synth import (
    Camera,
    Ellipsoid,
    GroundPlane,
    SceneSpec,
    lambertian_sphere_scene,
    render_olat,
)


@pytest.fixture
def normals():
    """2 x 2 normal map: facing up, tilted towards +x, facing away and grazing."""
    s = np.sqrt(0.5)
    data = np.array(
        [
            [[0.0, 0.0, 1.0], [s, 0.0, s]],
            [[0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
        ]
    )
    return RasterImage(data)


@pytest.fixture
def overhead():
    return DirectionalLight([0.0, 0.0, 1.0], (2.0, 1.0, 0.5))


def _occluder_scene(resolution=32):
    """Small sphere hovering over a flat floor."""
    return SceneSpec(
        camera=Camera(width=resolution, height=resolution, pixel_scale=2.0 / resolution),
        ellipsoids=[Ellipsoid(center=(0.0, 0.0, 0.0), radii=(0.3, 0.3, 0.3))],
        ground=GroundPlane(),
    )


class TestShading:
    """Test the clamped cosine shading operator."""

    def test_values(self, normals, overhead):
        """Test shading against hand-computed cosines."""
        result = shading(normals, overhead).data
        np.testing.assert_allclose(result[0, 0], [2.0, 1.0, 0.5], rtol=1e-6)
        expected = np.sqrt(0.5) * np.array([2.0, 1.0, 0.5])
        np.testing.assert_allclose(result[0, 1], expected, rtol=1e-6)

    def test_back_facing_is_zero(self, normals, overhead):
        """Test that n . l <= 0 gives exactly zero."""
        result = shading(normals, overhead).data
        assert np.all(result[1, 0] == 0.0)
        assert np.all(result[1, 1] == 0.0)
        assert result.min() >= 0.0

    def test_requires_three_channels(self, overhead):
        """Test rejection of single-channel normal maps."""
        with pytest.raises(DataError):
            shading(RasterImage.zeros(2, 2, channels=1), overhead)

    def test_linear_in_intensity(self, normals, overhead):
        """Test that scaling the light scales the shading."""
        base = shading(normals, overhead).data
        scaled = shading(normals, overhead.scaled(3.0)).data
        np.testing.assert_allclose(scaled, 3.0 * base, rtol=1e-6)


class TestCompose:
    """Test diffuse rendering and final composition."""

    def test_diffuse_is_product(self):
        """Test D = A * S per channel."""
        albedo = RasterImage.full(2, 3, (0.5, 0.25, 1.0))
        shade = RasterImage.full(2, 3, (2.0, 4.0, 0.5))
        np.testing.assert_allclose(diffuse_render(albedo, shade).data, 1.0)

    def test_visibility_masks(self):
        """Test that V = 0 zeroes the output and V = 1 keeps D + R."""
        diffuse = RasterImage.full(2, 2, 0.4)
        residual = RasterImage.full(2, 2, 0.1)
        vis = RasterImage(np.array([[1.0, 0.0], [0.5, 1.0]]))
        out = compose(diffuse, residual, vis).data
        np.testing.assert_allclose(out[0, 0], 0.5)
        np.testing.assert_allclose(out[0, 1], 0.0)
        np.testing.assert_allclose(out[1, 0], 0.25)

    def test_negative_residual_not_clamped(self):
        """Test that compose never clamps."""
        out = compose(
            RasterImage.full(1, 1, 0.2),
            RasterImage.full(1, 1, -0.5),
            RasterImage.full(1, 1, 1.0, channels=1),
        )
        np.testing.assert_allclose(out.data, -0.3, rtol=1e-6)

    def test_requires_single_channel_visibility(self):
        """Test rejection of RGB visibility."""
        image = RasterImage.full(2, 2, 0.5)
        with pytest.raises(DataError):
            compose(image, image, image)

    def test_shape_mismatch(self):
        """Test rejection of mismatched layer sizes."""
        with pytest.raises(DataError):
            compose(
                RasterImage.zeros(2, 2),
                RasterImage.zeros(3, 2),
                RasterImage.full(2, 2, 1.0, channels=1),
            )

    def test_additive_in_diffuse(self):
        """Test compose(D1 + D2, R, V) = compose(D1, R, V) + compose(D2, 0, V)."""
        rng = np.random.default_rng(3)
        d1, d2, r = (RasterImage(rng.uniform(0, 1, (4, 4, 3))) for _ in range(3))
        vis = RasterImage(rng.uniform(0, 1, (4, 4)))
        zero = RasterImage.zeros(4, 4)
        total = compose(RasterImage(d1.data + d2.data), r, vis).data
        parts = compose(d1, r, vis).data + compose(d2, zero, vis).data
        np.testing.assert_allclose(total, parts, atol=1e-6)


class TestRelightDiffuse:
    """Test diffuse-only relighting."""

    def test_reproduces_unshadowed_lambertian_render(self):
        """Test exact reproduction when nothing is shadowed or specular."""
        light = DirectionalLight([0.0, 0.0, 1.0])
        frame = render_olat(lambertian_sphere_scene(resolution=32), light)
        relit = relight_diffuse(frame.albedo, frame.normals, light)
        np.testing.assert_allclose(relit.data, frame.image.data, atol=1e-5)

    def test_misses_cast_shadows(self):
        """Test that shadowed floor pixels are lit by the diffuse model."""
        light = DirectionalLight.from_vector([0.6, 0.0, 0.8])
        frame = render_olat(_occluder_scene(), light)
        cast = (frame.visibility.data[..., 0] == 0.0) & (frame.shading.data[..., 0] > 0.0)
        assert cast.any()

        relit = relight_diffuse(frame.albedo, frame.normals, light).data
        assert np.all(frame.image.data[cast] == 0.0)
        assert np.all(relit[cast] > 0.0)


class TestFormationBatch:
    """Test stage-wise population of intrinsic slots."""

    def test_populate_from_albedo_and_normals(self, normals, overhead):
        """Test that shading, diffuse and output are derived."""
        albedo = RasterImage.full(2, 2, 0.5)
        batch = FormationBatch(light=overhead, albedo=albedo, normals=normals).populate()
        np.testing.assert_allclose(batch.shading.data, shading(normals, overhead).data)
        np.testing.assert_allclose(batch.output.data, batch.diffuse.data)
        assert set(batch.rasters()) == {"albedo", "normals", "shading", "diffuse", "output"}

    def test_populate_applies_visibility(self, normals, overhead):
        """Test that a provided visibility masks the output."""
        batch = FormationBatch(
            light=overhead,
            albedo=RasterImage.full(2, 2, 0.5),
            normals=normals,
            visibility=RasterImage.zeros(2, 2, channels=1),
        ).populate()
        assert np.all(batch.output.data == 0.0)

    def test_validate_rejects_negative_shading(self, overhead):
        """Test range validation of shading."""
        batch = FormationBatch(light=overhead, shading=RasterImage.full(2, 2, -0.1))
        with pytest.raises(DataError):
            batch.validate()

    def test_validate_rejects_visibility_out_of_range(self, overhead):
        """Test range validation of visibility."""
        batch = FormationBatch(light=overhead, visibility=RasterImage.full(2, 2, 1.5, channels=1))
        with pytest.raises(DataError):
            batch.validate()


class TestIntrinsicSet:
    """Test the frame container."""

    def test_rejects_rgb_visibility(self, overhead):
        """Test the channel-count checks."""
        rgb = RasterImage.zeros(2, 2)
        with pytest.raises(DataError):
            IntrinsicSet(
                image=rgb,
                albedo=rgb,
                normals=rgb,
                shading=rgb,
                visibility=rgb,
                residual=rgb,
                light=overhead,
            )

    def test_map_rasters_keeps_light(self, overhead):
        """Test that mapping preserves the light and transforms every layer."""
        frame = render_olat(_occluder_scene(8), overhead)
        doubled = frame.map_rasters(lambda image: RasterImage(image.data * 2.0))
        assert doubled.light == overhead
        np.testing.assert_allclose(doubled.albedo.data, 2.0 * frame.albedo.data)
