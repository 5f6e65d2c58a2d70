"""
Calibrated Lambertian photometric stereo.

Recovers per-pixel albedo and normals from an OLAT stack, then splits every
frame into diffuse shading, a non-diffuse residual and an estimated
visibility. The reconstruction manifest it writes has the same schema as the
oracle manifest, so either can supervise training.
"""

import logging
import shutil
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, model_validator

from .data_processing import (
    DatasetManifest,
    FrameRecord,
    FrameStore,
    SceneRecord,
    save_manifest,
)
from .exceptions import DataError
from .formation import IntrinsicSet, diffuse_render, shading
from .image_io import RasterImage, require_same_shape, save_pfm
from .lighting import DirectionalLight, LightSet, save_lights

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LUMINANCE_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


class PMSThresholds(BaseModel):
    """Observation selection and solver guards."""

    low: float = Field(default=0.02, ge=0)
    high: float = Field(default=0.98, gt=0)
    condition_limit: float = Field(default=1e8, gt=1)
    min_observations: int = Field(default=3, ge=3)
    specular_tol: Optional[float] = Field(default=0.02, gt=0)
    shadow_ratio: float = Field(default=0.5, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_window(self) -> "PMSThresholds":
        if self.low >= self.high:
            raise ValueError(f"Threshold low ({self.low}) must be below high ({self.high})")
        return self


def luminance(values: np.ndarray) -> np.ndarray:
    return values @ LUMINANCE_WEIGHTS


def _solve_batch(
    observations: np.ndarray,
    directions: np.ndarray,
    intensities: np.ndarray,
    selected: np.ndarray,
    condition_limit: float,
    min_observations: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-channel weighted least squares over the selected observations.

    Args:
        observations: (P, K, 3) radiance per pixel, light and channel
        directions: (K, 3) unit light directions
        intensities: (K, 3) light intensities
        selected: (P, K) boolean selection

    Returns:
        albedo (P, 3), normals (P, 3), valid (P,)
    """
    weights = selected.astype(np.float64)
    # rows of L are intensity-scaled directions: L_c[k] = i_kc * d_k
    scaled = intensities[:, :, None] * directions[:, None, :]  # (K, C, 3)
    normal_matrix = np.einsum("pk,kci,kcj->pcij", weights, scaled, scaled)
    rhs = np.einsum("pk,pkc,kci->pci", weights, observations, scaled)

    valid = selected.sum(axis=1) >= min_observations
    with np.errstate(divide="ignore", invalid="ignore"):
        condition = np.linalg.cond(normal_matrix)
    well_posed = np.all(np.isfinite(condition) & (condition <= condition_limit), axis=1)
    valid &= well_posed

    safe_matrix = np.where(valid[:, None, None, None], normal_matrix, np.eye(3))
    g = np.linalg.solve(safe_matrix, rhs[..., None])[..., 0]  # (P, C, 3)
    g = np.where(valid[:, None, None], g, 0.0)

    summed = g.sum(axis=1)
    norm = np.linalg.norm(summed, axis=1)
    valid &= norm > 0
    normals = np.where(valid[:, None], summed / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    albedo = np.maximum(0.0, np.einsum("pci,pi->pc", g, normals))
    return albedo, normals, valid


def _select(observations: np.ndarray, intensities: np.ndarray, low: float, high: float):
    light_luma = luminance(intensities)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = luminance(observations) / light_luma[None, :]
    return (light_luma[None, :] > 0) & (ratio >= low) & (ratio <= high)


def _solve_observations(
    observations: np.ndarray, lights: LightSet, thresholds: PMSThresholds
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    directions = lights.directions()
    intensities = lights.intensities()
    selected = _select(observations, intensities, thresholds.low, thresholds.high)
    result = _solve_batch(
        observations,
        directions,
        intensities,
        selected,
        thresholds.condition_limit,
        thresholds.min_observations,
    )
    if thresholds.specular_tol is None:
        return result

    albedo, normals, valid = result
    predicted = (
        albedo[:, None, :]
        * intensities[None, :, :]
        * np.maximum(normals @ directions.T, 0.0)[:, :, None]
    )
    excess = (luminance(observations) - luminance(predicted)) / luminance(intensities)[None, :]
    refined = selected & ~(valid[:, None] & (excess > thresholds.specular_tol))
    if np.array_equal(refined, selected):
        return result
    return _solve_batch(
        observations,
        directions,
        intensities,
        refined,
        thresholds.condition_limit,
        thresholds.min_observations,
    )


def solve_pixel(
    observations: Sequence[Sequence[float]],
    lights: LightSet,
    thresholds: Optional[PMSThresholds] = None,
) -> Tuple[np.ndarray, np.ndarray, bool]:
    """
    Recover albedo and normal of one pixel.

    Args:
        observations: One RGB triple per light, in light-set order
        lights: Calibrated lights (at least 3)
        thresholds: Selection window and solver guards

    Returns:
        Tuple of (albedo RGB, unit normal, valid flag); invalid pixels return zeros
    """
    thresholds = thresholds or PMSThresholds()
    values = np.asarray(observations, dtype=np.float64)
    if values.ndim == 1:
        values = np.repeat(values[:, None], 3, axis=1)
    if len(lights) < 3:
        raise ValueError("Photometric stereo needs at least 3 lights")
    if values.shape != (len(lights), 3):
        raise ValueError(f"Expected {len(lights)} RGB observations, got shape {values.shape}")
    albedo, normals, valid = _solve_observations(values[None], lights, thresholds)
    return albedo[0], normals[0], bool(valid[0])


def solve_image(
    frames: Sequence[RasterImage],
    lights: LightSet,
    thresholds: Optional[PMSThresholds] = None,
    n_jobs: int = 1,
) -> Tuple[RasterImage, RasterImage, RasterImage]:
    """
    Per-pixel photometric stereo over an OLAT stack.

    Args:
        frames: One frame per light, in light-set order
        lights: Calibrated lights
        thresholds: Selection window and solver guards
        n_jobs: Worker threads (rows are split into contiguous blocks)

    Returns:
        Tuple of (albedo, normals, validity mask); invalid pixels are zero

    Raises:
        DataError: If frame sizes differ or the stack does not match the lights
    """
    thresholds = thresholds or PMSThresholds()
    if len(frames) != len(lights):
        raise DataError(f"Got {len(frames)} frames for {len(lights)} lights")
    if len(lights) < 3:
        raise DataError("Photometric stereo needs at least 3 lights")
    require_same_shape(*frames)
    height, width = frames[0].height, frames[0].width
    stack = np.stack([np.broadcast_to(f.data, (height, width, 3)) for f in frames], axis=2)
    stack = stack.reshape(height * width, len(frames), 3).astype(np.float64)

    blocks = np.array_split(np.arange(height * width), max(1, min(n_jobs, height)))
    results = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_solve_observations)(stack[block], lights, thresholds) for block in blocks
    )
    albedo = np.concatenate([r[0] for r in results]).reshape(height, width, 3)
    normals = np.concatenate([r[1] for r in results]).reshape(height, width, 3)
    valid = np.concatenate([r[2] for r in results]).reshape(height, width, 1)

    logger.info(f"PMS valid pixels: {valid.mean():.1%} of {height}x{width}")
    return RasterImage(albedo), RasterImage(normals), RasterImage(valid.astype(np.float32))


def compute_residual(
    image: RasterImage,
    albedo: RasterImage,
    normals: RasterImage,
    light: DirectionalLight,
    visibility: RasterImage,
) -> RasterImage:
    """R = I - A * S(N, l) on lit pixels and 0 where the light is blocked."""
    require_same_shape(image, albedo, normals)
    require_same_shape(image, visibility, channels_may_differ=True)
    diffuse = diffuse_render(albedo, shading(normals, light)).data.astype(np.float64)
    lit = visibility.data > 0
    residual = np.where(lit, image.data.astype(np.float64) - diffuse, 0.0)
    return RasterImage(residual)


def estimate_visibility(
    image: RasterImage,
    albedo: RasterImage,
    normals: RasterImage,
    light: DirectionalLight,
    validity: RasterImage,
    shadow_ratio: float = 0.5,
) -> RasterImage:
    """
    Binary visibility guess for one frame.

    A valid pixel is shadowed when its observed luminance falls below
    ``shadow_ratio`` of the predicted diffuse luminance while the predicted
    shading is positive. All other pixels are treated as lit.
    """
    shade = shading(normals, light).data.astype(np.float64)
    predicted = luminance(albedo.data.astype(np.float64) * shade)
    observed = luminance(np.broadcast_to(image.data, shade.shape).astype(np.float64))
    shadowed = (
        (validity.data[:, :, 0] > 0)
        & (luminance(shade) > 0)
        & (observed < shadow_ratio * predicted)
    )
    return RasterImage((~shadowed).astype(np.float32))


def decompose_frame(
    image: RasterImage,
    albedo: RasterImage,
    normals: RasterImage,
    validity: RasterImage,
    light: DirectionalLight,
    shadow_ratio: float = 0.5,
) -> IntrinsicSet:
    """Split one frame into PMS-derived intrinsic layers."""
    visibility = estimate_visibility(image, albedo, normals, light, validity, shadow_ratio)
    return IntrinsicSet(
        image=image,
        albedo=albedo,
        normals=normals,
        shading=shading(normals, light),
        visibility=visibility,
        residual=compute_residual(image, albedo, normals, light, visibility),
        light=light,
    )


def reconstruct_manifest(
    manifest_path: PathLike,
    out_dir: PathLike,
    thresholds: Optional[PMSThresholds] = None,
    n_jobs: int = 1,
) -> Path:
    """
    Run PMS on every scene of a manifest and write a reconstruction manifest.

    Per scene the output directory receives ``albedo.pfm``, ``normals.pfm`` and
    ``valid.pfm``; per frame a copy of the image and the PMS shading,
    visibility and residual.

    Returns:
        Path of the written ``manifest.json`` (``supervision = "pms"``)
    """
    thresholds = thresholds or PMSThresholds()
    store = FrameStore(manifest_path)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    save_lights(store.lights, out_path / "lights.txt")

    frames: List[FrameRecord] = []
    scenes: List[SceneRecord] = []
    for scene in store.manifest.scenes:
        seed = scene.scene_seed
        light_ids = store.light_ids(seed)
        lights = store.lights.subset(light_ids)
        images = [store.load_image(seed, light_id) for light_id in light_ids]
        albedo, normals, validity = solve_image(images, lights, thresholds, n_jobs)

        scene_dir = f"scene_{seed:04d}"
        save_pfm(albedo, out_path / scene_dir / "albedo.pfm")
        save_pfm(normals, out_path / scene_dir / "normals.pfm")
        save_pfm(validity, out_path / scene_dir / "valid.pfm")

        for light_id, image in zip(light_ids, images):
            light = store.lights[light_id]
            frame = decompose_frame(
                image, albedo, normals, validity, light, thresholds.shadow_ratio
            )
            prefix = f"{scene_dir}/l{light_id:02d}"
            shutil.copyfile(
                store.frame_path(seed, light_id, "image"),
                out_path / f"{prefix}_image.pfm",
            )
            for name in ("shading", "visibility", "residual"):
                save_pfm(getattr(frame, name), out_path / f"{prefix}_{name}.pfm")
            files = {
                "image": f"{prefix}_image.pfm",
                "albedo": f"{scene_dir}/albedo.pfm",
                "normals": f"{scene_dir}/normals.pfm",
                "shading": f"{prefix}_shading.pfm",
                "visibility": f"{prefix}_visibility.pfm",
                "residual": f"{prefix}_residual.pfm",
            }
            frames.append(FrameRecord(scene_seed=seed, light_id=light_id, files=files))
        scenes.append(SceneRecord(scene_seed=seed, spec=scene.spec))
        logger.info(f"Reconstructed scene {seed} from {len(light_ids)} frames")

    manifest = DatasetManifest(
        light_file="lights.txt", supervision="pms", scenes=scenes, frames=frames
    )
    return save_manifest(manifest, out_path / "manifest.json")
