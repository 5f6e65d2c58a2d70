"""
Environment-map relighting by additive mixing of directional relights.

An equirectangular map is reduced to one directional light per pixel. The
network relights the input once per light at unit intensity and the results
are summed with the pixel's RGB radiance times its solid angle.
"""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from .exceptions import DataError
from .image_io import RasterImage, center_patch_mean
from .inference import GeneratorRelighter, Relighter
from .lighting import DirectionalLight
from .model import ModelParams

logger = logging.getLogger(__name__)

EnvLight = Tuple[DirectionalLight, np.ndarray]

DEFAULT_SIZE = (64, 32)
PATCH_SIZE = (51, 76)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o averages the input cells overlapping output cell o, weighted by overlap."""
    edges_in = np.linspace(0.0, 1.0, n_in + 1)
    edges_out = np.linspace(0.0, 1.0, n_out + 1)
    low = np.maximum(edges_out[:-1, None], edges_in[None, :-1])
    high = np.minimum(edges_out[1:, None], edges_in[None, 1:])
    overlap = np.clip(high - low, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def downsample_area(image: RasterImage, width: int, height: int) -> np.ndarray:
    """Area-average resampling to ``width`` x ``height`` (H x W x C, float64)."""
    rows = _area_matrix(image.height, height)
    cols = _area_matrix(image.width, width)
    return np.einsum("ih,hwc,jw->ijc", rows, image.data.astype(np.float64), cols)


def pixel_direction(u: np.ndarray, v: np.ndarray, width: int, height: int) -> np.ndarray:
    """Unit direction of equirectangular pixel centres; +y is up, the camera looks along -z."""
    phi = 2.0 * np.pi * (u + 0.5) / width - np.pi
    theta = np.pi * (v + 0.5) / height
    return np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1
    )


def pixel_solid_angles(width: int, height: int, sin_weight: bool = True) -> np.ndarray:
    """
    Solid angle of every row of an equirectangular grid, shape (height,).

    With ``sin_weight`` each row gets its exact spherical-band area divided
    evenly among its pixels; otherwise every pixel gets 4 pi / (W * H).
    """
    if not sin_weight:
        return np.full(height, 4.0 * np.pi / (width * height))
    edges = np.pi * np.arange(height + 1) / height
    return (2.0 * np.pi / width) * (np.cos(edges[:-1]) - np.cos(edges[1:]))


def env_to_lights(
    env: RasterImage,
    target_width: int = DEFAULT_SIZE[0],
    target_height: int = DEFAULT_SIZE[1],
    sin_weight: bool = True,
) -> List[EnvLight]:
    """
    Convert an equirectangular radiance map into weighted directional lights.

    Args:
        env: Longitude x latitude map of linear RGB radiance
        target_width: Longitude resolution after area averaging
        target_height: Latitude resolution after area averaging
        sin_weight: Weight pixels by their true solid angle

    Returns:
        (unit-intensity light, RGB weight) per non-black pixel, row-major
    """
    if env.channels != 3:
        raise DataError(f"Environment maps must be RGB, got {env.channels} channels")
    if env.width != 2 * env.height:
        logger.warning(
            f"Environment map is {env.width}x{env.height}; equirectangular maps are 2:1"
        )
    radiance = downsample_area(env, target_width, target_height)
    v, u = np.meshgrid(np.arange(target_height), np.arange(target_width), indexing="ij")
    directions = pixel_direction(u, v, target_width, target_height)
    weights = radiance * pixel_solid_angles(target_width, target_height, sin_weight)[:, None, None]

    lights = []
    for row, col in zip(*np.nonzero(np.any(weights != 0.0, axis=-1))):
        light = DirectionalLight.from_vector(directions[row, col])
        lights.append((light, weights[row, col].copy()))
    logger.info(
        f"Environment map reduced to {len(lights)} lights "
        f"(total weight {np.round(weights.sum(axis=(0, 1)), 4).tolist()})"
    )
    return lights


def canonical_order(lights: Sequence[EnvLight]) -> List[EnvLight]:
    """Sort lights by direction then weight so that summation order is fixed."""
    return sorted(lights, key=lambda item: (*item[0].direction.tolist(), *item[1].tolist()))


def select_topk(lights: Sequence[EnvLight], topk: Optional[int]) -> List[EnvLight]:
    """Keep the ``topk`` lights with the largest total weight (all when ``None``)."""
    ordered = canonical_order(lights)
    if topk is None or topk >= len(ordered):
        return ordered
    if topk < 1:
        raise DataError(f"topk must be positive, got {topk}")
    strength = np.array([weight.sum() for _, weight in ordered])
    keep = np.sort(np.argsort(-strength, kind="stable")[:topk])
    return [ordered[i] for i in keep]


def relight_env(
    relighter: Union[Relighter, ModelParams],
    image: RasterImage,
    l_src: Optional[DirectionalLight],
    lights: Sequence[EnvLight],
    topk: Optional[int] = None,
    clamp: bool = True,
    n_jobs: int = 1,
) -> RasterImage:
    """
    Sum of per-light relights weighted by the lights' RGB weights.

    Args:
        relighter: Relighter or generator parameters
        image: Source image
        l_src: Source light (required by models trained with it)
        lights: Output of ``env_to_lights``
        topk: Only use the strongest ``topk`` lights
        clamp: Clamp the sum to [0, 1]
        n_jobs: Worker threads; the reduction order is fixed regardless

    Returns:
        The environment-lit image
    """
    if not lights:
        raise DataError("Environment relighting needs at least one light")
    if isinstance(relighter, ModelParams):
        relighter = GeneratorRelighter(relighter)
    selected = select_topk(lights, topk)
    directional = [light.with_intensity((1.0, 1.0, 1.0)) for light, _ in selected]

    chunks = np.array_split(np.arange(len(directional)), max(1, min(n_jobs, len(directional))))
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(relighter.relight_many)(image, [directional[i] for i in chunk], l_src)
        for chunk in chunks
    )
    total = np.zeros((image.height, image.width, 3))
    for relit, (_, weight) in zip((r for part in results for r in part), selected):
        total += weight * relit
    logger.info(f"Relit under {len(selected)} environment lights")
    result = RasterImage(total)
    return result.clamp() if clamp else result


def color_match_linear(
    image: RasterImage,
    reference_stats: Sequence[float],
    patch_width: int = PATCH_SIZE[0],
    patch_height: int = PATCH_SIZE[1],
) -> RasterImage:
    """
    Scale each channel so the center patch mean matches ``reference_stats``.

    Raises:
        DataError: If the patch does not fit or a source channel mean is zero
    """
    target = np.asarray(reference_stats, dtype=np.float64)
    if target.shape != (image.channels,):
        raise DataError(f"Expected {image.channels} reference means, got {target.shape}")
    source = center_patch_mean(image, patch_width, patch_height)
    if np.any(source == 0.0):
        raise DataError(f"Center patch has a zero channel mean: {source.tolist()}")
    gains = target / source
    logger.debug(f"Colour-match gains: {np.round(gains, 4).tolist()}")
    return RasterImage(image.data.astype(np.float64) * gains)
