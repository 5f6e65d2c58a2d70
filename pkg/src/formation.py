"""
Explicit image-formation operators.

The array kernels in this module are shared by the ray-traced oracle, the PMS
residual extraction, the generator's structured layers (channel-first tensors)
and inference. ``axis`` selects the channel axis: -1 for H x W x C rasters, 1
for N x C x H x W batches. Light vectors must already be shaped to broadcast
against the channel axis (see ``expand_light``).
"""

import logging
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .exceptions import DataError
from .image_io import RasterImage, require_same_shape
from .lighting import DirectionalLight

logger = logging.getLogger(__name__)


def expand_light(vector: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    """Reshape a (3,) or (N, 3) light vector so it broadcasts along ``axis``."""
    vector = np.asarray(vector, dtype=np.float64)
    axis = axis % ndim
    shape = [1] * ndim
    if vector.ndim == 2:
        shape[0] = vector.shape[0]
    shape[axis] = 3
    return vector.reshape(shape)


def cosine_term(normals: np.ndarray, direction: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.sum(normals * direction, axis=axis, keepdims=True)


def shading_kernel(
    normals: np.ndarray, direction: np.ndarray, intensity: np.ndarray, axis: int = -1
) -> np.ndarray:
    """S_c = intensity_c * max(0, <n, l>); zero normals give zero shading."""
    return intensity * np.maximum(cosine_term(normals, direction, axis), 0.0)


def shading_vjp(
    grad_shading: np.ndarray,
    normals: np.ndarray,
    direction: np.ndarray,
    intensity: np.ndarray,
    axis: int = -1,
) -> np.ndarray:
    """Vector-Jacobian product of ``shading_kernel`` w.r.t. the normals."""
    lit = cosine_term(normals, direction, axis) > 0.0
    weight = np.sum(grad_shading * intensity, axis=axis, keepdims=True)
    return np.where(lit, weight, 0.0) * direction


def diffuse_kernel(albedo: np.ndarray, shading: np.ndarray) -> np.ndarray:
    return albedo * shading


def compose_kernel(diffuse: np.ndarray, residual: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    """(D + R) * V with a single-channel visibility broadcast over colour."""
    return (diffuse + residual) * visibility


# ----------------------------------------------------------------------------
# Raster wrappers


def shading(normals: RasterImage, light: DirectionalLight) -> RasterImage:
    if normals.channels != 3:
        raise DataError(f"Normal maps need 3 channels, got {normals.channels}")
    values = shading_kernel(
        normals.data.astype(np.float64),
        expand_light(light.direction, 3, -1),
        expand_light(light.intensity, 3, -1),
    )
    return RasterImage(values)


def diffuse_render(albedo: RasterImage, shading_image: RasterImage) -> RasterImage:
    require_same_shape(albedo, shading_image)
    return RasterImage(
        diffuse_kernel(albedo.data.astype(np.float64), shading_image.data.astype(np.float64))
    )


def compose(diffuse: RasterImage, residual: RasterImage, visibility: RasterImage) -> RasterImage:
    """Final radiance (D + R) * V; negative residuals are allowed and nothing is clamped."""
    require_same_shape(diffuse, residual)
    require_same_shape(diffuse, visibility, channels_may_differ=True)
    if visibility.channels != 1:
        raise DataError(f"Visibility must be single-channel, got {visibility.channels}")
    return RasterImage(
        compose_kernel(
            diffuse.data.astype(np.float64),
            residual.data.astype(np.float64),
            visibility.data.astype(np.float64),
        )
    )


def relight_diffuse(
    albedo: RasterImage, normals: RasterImage, light_dst: DirectionalLight
) -> RasterImage:
    """Diffuse-only relighting A * S(N, l_dst); misses cast shadows by construction."""
    require_same_shape(albedo, normals)
    return diffuse_render(albedo, shading(normals, light_dst))


@dataclass
class FormationBatch:
    """Stage-wise intrinsic state of one frame, filled in as it is computed."""

    light: DirectionalLight
    albedo: Optional[RasterImage] = None
    normals: Optional[RasterImage] = None
    shading: Optional[RasterImage] = None
    diffuse: Optional[RasterImage] = None
    residual: Optional[RasterImage] = None
    visibility: Optional[RasterImage] = None
    output: Optional[RasterImage] = None

    def rasters(self):
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "light" and getattr(self, f.name) is not None
        }

    def validate(self) -> None:
        """Check that populated slots agree in size and value ranges."""
        populated = list(self.rasters().items())
        if not populated:
            return
        require_same_shape(*[image for _, image in populated], channels_may_differ=True)
        if self.shading is not None and float(self.shading.data.min()) < 0.0:
            raise DataError("Shading must be non-negative")
        if self.visibility is not None:
            v = self.visibility.data
            if float(v.min()) < 0.0 or float(v.max()) > 1.0:
                raise DataError("Visibility must lie in [0, 1]")

    def populate(self) -> "FormationBatch":
        """Derive shading, diffuse and output from whatever is already present."""
        if self.shading is None and self.normals is not None:
            self.shading = shading(self.normals, self.light)
        if self.diffuse is None and self.albedo is not None and self.shading is not None:
            self.diffuse = diffuse_render(self.albedo, self.shading)
        if self.output is None and self.diffuse is not None:
            height, width = self.diffuse.height, self.diffuse.width
            residual = self.residual
            if residual is None:
                residual = RasterImage.zeros(height, width, self.diffuse.channels)
            visibility = self.visibility
            if visibility is None:
                visibility = RasterImage.full(height, width, 1.0, channels=1)
            self.output = compose(self.diffuse, residual, visibility)
        self.validate()
        return self


FRAME_LAYERS = ("image", "albedo", "normals", "shading", "visibility", "residual")


@dataclass(frozen=True)
class IntrinsicSet:
    """One OLAT frame with its intrinsic layers; I = (A * S + R) * V."""

    image: RasterImage
    albedo: RasterImage
    normals: RasterImage
    shading: RasterImage
    visibility: RasterImage
    residual: RasterImage
    light: DirectionalLight

    def __post_init__(self):
        require_same_shape(*self.rasters().values(), channels_may_differ=True)
        if self.visibility.channels != 1 or self.normals.channels != 3:
            raise DataError("Visibility must have 1 channel and normals 3 channels")

    @property
    def height(self) -> int:
        return self.image.height

    @property
    def width(self) -> int:
        return self.image.width

    def rasters(self):
        return {name: getattr(self, name) for name in FRAME_LAYERS}

    def replace(self, **changes) -> "IntrinsicSet":
        values = {**self.rasters(), "light": self.light, **changes}
        return IntrinsicSet(**values)

    def map_rasters(self, fn) -> "IntrinsicSet":
        """Apply ``fn`` to every raster, keeping the light."""
        return self.replace(**{name: fn(image) for name, image in self.rasters().items()})

    def reconstruction_error(self) -> float:
        """Max abs difference between the image and compose(A * S, R, V)."""
        rebuilt = compose(diffuse_render(self.albedo, self.shading), self.residual, self.visibility)
        return float(np.max(np.abs(rebuilt.data.astype(np.float64) - self.image.data)))
