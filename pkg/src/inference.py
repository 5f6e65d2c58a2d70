"""Inference utilities: relighting with a trained generator or the diffuse baseline."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .exceptions import DataError
from .formation import relight_diffuse
from .image_io import RasterImage, require_same_shape
from .lighting import DirectionalLight
from .model import Generator, LightBatch, ModelParams, load_model

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _pad_to_multiple(chw: np.ndarray, factor: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    _, height, width = chw.shape
    pad_h, pad_w = (-height) % factor, (-width) % factor
    if pad_h or pad_w:
        chw = np.pad(chw, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    return chw, (height, width)


class GeneratorRelighter:
    """Relights images with frozen generator parameters; safe to share across threads."""

    def __init__(self, params: ModelParams, batch_size: int = 8, dtype=np.float32) -> None:
        self.params = params
        self.batch_size = batch_size
        self.generator = Generator(params, dtype)
        self.dtype = np.dtype(dtype)

    @classmethod
    def from_file(cls, model_path: PathLike, batch_size: int = 8) -> "GeneratorRelighter":
        return cls(load_model(model_path), batch_size=batch_size)

    @property
    def known_source_illumination(self) -> bool:
        return self.params.config.known_source_illumination

    def _source(self, l_src: Optional[DirectionalLight], count: int) -> Optional[LightBatch]:
        if not self.known_source_illumination:
            return None
        if l_src is None:
            raise DataError("This model needs the source light (--src-light)")
        return LightBatch.from_lights([l_src] * count)

    def _input(self, image: RasterImage) -> Tuple[np.ndarray, Tuple[int, int]]:
        if image.channels != 3:
            raise DataError(f"Relighting needs an RGB image, got {image.channels} channels")
        factor = 2**self.params.config.depth
        chw, size = _pad_to_multiple(image.to_chw().astype(self.dtype), factor)
        return chw[None], size

    def predict(
        self, image: RasterImage, l_dst: DirectionalLight, l_src: Optional[DirectionalLight] = None
    ) -> Dict[str, RasterImage]:
        """Every predicted layer (unclamped) for one target light."""
        batch, (height, width) = self._input(image)
        outputs = self.generator(
            ad.constant(batch), LightBatch.from_lights([l_dst]), self._source(l_src, 1)
        )
        layers = {}
        for name, tensor in vars(outputs).items():
            if tensor is not None:
                layers[name] = RasterImage.from_chw(tensor.data[0, :, :height, :width])
        return layers

    def relight(
        self,
        image: RasterImage,
        l_dst: DirectionalLight,
        l_src: Optional[DirectionalLight] = None,
        clamp: bool = True,
    ) -> RasterImage:
        result = self.predict(image, l_dst, l_src)["image"]
        return result.clamp() if clamp else result

    def relight_many(
        self,
        image: RasterImage,
        lights: Sequence[DirectionalLight],
        l_src: Optional[DirectionalLight] = None,
    ) -> List[np.ndarray]:
        """
        Unclamped H x W x 3 relights for many target lights.

        Stage 1 runs once; the structured layers and stage 2 run in batches
        of target lights.
        """
        batch, (height, width) = self._input(image)
        image_tensor = ad.constant(batch)
        shared = None
        if self.params.config.architecture == "structured":
            shared = self.generator.stage1(image_tensor, self._source(l_src, 1))

        results = []
        for start in range(0, len(lights), self.batch_size):
            chunk = list(lights[start : start + self.batch_size])
            count = len(chunk)
            repeated = ad.constant(np.repeat(batch, count, axis=0))
            l_dst = LightBatch.from_lights(chunk)
            source = self._source(l_src, count)
            if shared is None:
                outputs = self.generator(repeated, l_dst, source)
            else:
                albedo, normals = (ad.constant(np.repeat(t.data, count, axis=0)) for t in shared)
                outputs = self.generator.render(repeated, albedo, normals, l_dst, source)
            for data in outputs.image.data:
                results.append(np.moveaxis(data[:, :height, :width], 0, -1).astype(np.float64))
        return results


class DiffuseBaselineRelighter:
    """Lambertian re-rendering A * S(N, l_dst) of fixed (typically PMS) intrinsics."""

    known_source_illumination = False

    def __init__(self, albedo: RasterImage, normals: RasterImage) -> None:
        require_same_shape(albedo, normals)
        self.albedo = albedo
        self.normals = normals

    def relight(
        self,
        image: RasterImage,
        l_dst: DirectionalLight,
        l_src: Optional[DirectionalLight] = None,
        clamp: bool = True,
    ) -> RasterImage:
        require_same_shape(image, self.albedo)
        result = relight_diffuse(self.albedo, self.normals, l_dst)
        return result.clamp() if clamp else result

    def relight_many(
        self,
        image: RasterImage,
        lights: Sequence[DirectionalLight],
        l_src: Optional[DirectionalLight] = None,
    ) -> List[np.ndarray]:
        return [
            self.relight(image, light, clamp=False).data.astype(np.float64) for light in lights
        ]


Relighter = Union[GeneratorRelighter, DiffuseBaselineRelighter]


def relight(
    params: ModelParams,
    image: RasterImage,
    l_dst: DirectionalLight,
    l_src: Optional[DirectionalLight] = None,
) -> RasterImage:
    """Relight ``image`` to ``l_dst``; the output is clamped to [0, 1]."""
    return GeneratorRelighter(params).relight(image, l_dst, l_src)
