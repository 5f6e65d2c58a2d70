"""
Light-consistent data augmentation.

Flips mirror the rasters, the normal maps and the light direction together;
scaling multiplies radiance-like layers and the light intensity; jitter
perturbs the calibrated direction; crops cut the same window out of every
layer. All steps keep I = (A * S + R) * V intact.
"""

import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .data_processing import DatasetManifest, FrameRecord, FrameStore, SceneRecord, save_manifest
from .formation import IntrinsicSet
from .image_io import RasterImage, crop, flip
from .lighting import DirectionalLight, LightSet, save_lights
from .synth import SceneSpec, save_frame

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FLIP_AXES = ("horizontal", "vertical")
_COMPONENT = {"horizontal": 0, "vertical": 1}


def sample_rng(base_seed: int, *keys: int) -> np.random.Generator:
    """Independent RNG stream for the sample identified by ``keys``."""
    return np.random.default_rng([base_seed, *keys])


def flip_normals(normals: RasterImage, axis: str) -> RasterImage:
    data = flip(normals, axis).data.copy()
    data[:, :, _COMPONENT[axis]] *= -1.0
    return RasterImage(data)


def flip_sample(sample: IntrinsicSet, axis: str) -> IntrinsicSet:
    """Mirror every raster along ``axis`` and adapt normals and light accordingly."""
    if axis not in _COMPONENT:
        raise ValueError(f"Unknown flip axis: {axis}")
    flipped = sample.map_rasters(lambda image: flip(image, axis))
    return flipped.replace(
        normals=flip_normals(sample.normals, axis), light=sample.light.flipped(axis)
    )


def flip_variants(sample: IntrinsicSet) -> List[IntrinsicSet]:
    """The identity, horizontal, vertical and double flip of a sample."""
    horizontal = flip_sample(sample, "horizontal")
    return [
        sample,
        horizontal,
        flip_sample(sample, "vertical"),
        flip_sample(horizontal, "vertical"),
    ]


def scale_sample(sample: IntrinsicSet, factor: float) -> IntrinsicSet:
    """Scale image, shading, residual and light intensity by ``factor`` (> 0)."""
    if not factor > 0:
        raise ValueError(f"Scale factor must be positive, got {factor}")

    def scaled(image: RasterImage) -> RasterImage:
        return RasterImage(image.data.astype(np.float64) * factor)

    return sample.replace(
        image=scaled(sample.image),
        shading=scaled(sample.shading),
        residual=scaled(sample.residual),
        light=sample.light.scaled(factor),
    )


def jitter_light(
    light: DirectionalLight, rng: np.random.Generator, sigma: float = 0.01
) -> DirectionalLight:
    """Add N(0, sigma^2) noise to each direction component and renormalize."""
    noise = rng.normal(0.0, sigma, 3)
    return DirectionalLight.from_vector(light.direction + noise, light.intensity)


def crop_window(
    height: int, width: int, crop_width: int, crop_height: int, rng: np.random.Generator
) -> Tuple[int, int]:
    """Uniform top-left corner for a crop; raises if the window does not fit."""
    if crop_width > width or crop_height > height:
        raise ValueError(f"Crop {crop_width}x{crop_height} exceeds frame {width}x{height}")
    x0 = int(rng.integers(0, width - crop_width + 1))
    y0 = int(rng.integers(0, height - crop_height + 1))
    return x0, y0


def crop_sample(sample: IntrinsicSet, x0: int, y0: int, width: int, height: int) -> IntrinsicSet:
    return sample.map_rasters(lambda image: crop(image, x0, y0, width, height))


def random_crop(
    sample: IntrinsicSet, width: int, height: int, rng: np.random.Generator
) -> IntrinsicSet:
    """Cut the same random window out of every raster; the light is unchanged."""
    x0, y0 = crop_window(sample.height, sample.width, width, height, rng)
    return crop_sample(sample, x0, y0, width, height)


class AugmentationConfig(BaseModel):
    """On-the-fly augmentation settings used during training."""

    flip: bool = True
    scale: bool = True
    scale_range: Tuple[float, float] = (0.6, 1.1)
    jitter_sigma: float = Field(default=0.01, ge=0)
    crop_size: Optional[Tuple[int, int]] = (128, 128)

    @field_validator("scale_range")
    @classmethod
    def _check_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0 < low <= high:
            raise ValueError(f"Scale range must satisfy 0 < low <= high, got {value}")
        return value


def augment_pair(
    source: IntrinsicSet,
    target: IntrinsicSet,
    config: AugmentationConfig,
    rng: np.random.Generator,
) -> Tuple[IntrinsicSet, IntrinsicSet]:
    """
    Apply one consistent augmentation to both frames of a relighting pair.

    Flips, the scale factor and the crop window are shared by the pair; the
    light jitter is drawn independently for each frame's light.
    """
    frames = [source, target]
    if config.flip:
        for axis in FLIP_AXES:
            if rng.random() < 0.5:
                frames = [flip_sample(frame, axis) for frame in frames]
    if config.scale:
        factor = float(rng.uniform(*config.scale_range))
        frames = [scale_sample(frame, factor) for frame in frames]
    if config.crop_size is not None:
        width, height = config.crop_size
        width, height = min(width, source.width), min(height, source.height)
        x0, y0 = crop_window(source.height, source.width, width, height, rng)
        frames = [crop_sample(frame, x0, y0, width, height) for frame in frames]
    if config.jitter_sigma > 0:
        frames = [
            frame.replace(light=jitter_light(frame.light, rng, config.jitter_sigma))
            for frame in frames
        ]
    return frames[0], frames[1]


def expand_flips(manifest_path: PathLike, out_dir: PathLike) -> Path:
    """
    Offline factor-4 expansion of a dataset with all flip combinations.

    Every scene ``s`` becomes scenes ``4s + v`` for the variants
    (identity, horizontal, vertical, both); flipped lights get new ids
    ``v * stride + id`` in the expanded light file.

    Returns:
        Path of the expanded manifest
    """

    store = FrameStore(manifest_path)
    out_path = Path(out_dir)
    stride = max(store.lights.ids) + 1
    variants = [(), ("horizontal",), ("vertical",), ("horizontal", "vertical")]

    lights, light_ids = [], []
    for index, axes in enumerate(variants):
        for light_id, light in store.lights:
            for axis in axes:
                light = light.flipped(axis)
            lights.append(light)
            light_ids.append(index * stride + light_id)
    save_lights(LightSet(lights, light_ids), out_path / "lights.txt")

    scenes, frames = [], []
    for scene in store.manifest.scenes:
        for index, axes in enumerate(variants):
            new_seed = 4 * scene.scene_seed + index
            spec = scene.spec
            if spec is not None:
                mirrored = SceneSpec.model_validate(spec)
                for axis in axes:
                    mirrored = mirrored.mirrored(axis)
                spec = mirrored.model_dump(mode="json")
            scenes.append(SceneRecord(scene_seed=new_seed, spec=spec))
            for light_id in store.light_ids(scene.scene_seed):
                sample = store.load_frame(scene.scene_seed, light_id)
                for axis in axes:
                    sample = flip_sample(sample, axis)
                new_id = index * stride + light_id
                files = save_frame(sample, out_path, f"scene_{new_seed:04d}", f"l{new_id:02d}")
                frames.append(FrameRecord(scene_seed=new_seed, light_id=new_id, files=files))
        logger.info(f"Expanded scene {scene.scene_seed} into 4 flip variants")

    manifest = DatasetManifest(
        light_file="lights.txt",
        supervision=store.supervision,
        scenes=scenes,
        frames=frames,
    )
    return save_manifest(manifest, out_path / "manifest.json")
