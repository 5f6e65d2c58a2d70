"""
Synthetic OLAT oracle.

Parametric scenes of ellipsoids in front of an optional ground plane are ray
traced under one directional light at a time. Every render exports the exact
intrinsic layers (albedo, normals, shading, visibility, residual) together
with the composited image, which makes the renderer a brute-force ground truth
for photometric stereo, augmentation and the learner.
"""

import logging
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from .data_processing import (
    DatasetManifest,
    FrameFiles,
    FrameRecord,
    SceneRecord,
    save_manifest,
)
from .formation import (
    IntrinsicSet,
    compose_kernel,
    diffuse_kernel,
    expand_light,
    shading_kernel,
)
from .image_io import RasterImage, save_pfm
from .lighting import DirectionalLight, LightSet, save_lights, standard_rig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
Vec3 = Tuple[float, float, float]

CAMERA_HEIGHT = 10.0
SHADOW_OFFSET = 1e-4
_HIT_EPSILON = 1e-9
_AXIS_INDEX = {"horizontal": 0, "vertical": 1}


def _mirror_vector(vector: Vec3, index: int) -> Vec3:
    values = list(vector)
    values[index] = -values[index]
    return tuple(values)


class AlbedoTexture(BaseModel):
    """Procedural RGB albedo evaluated in primitive-local coordinates."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["constant", "gradient", "checker"] = "constant"
    color: Vec3 = (0.5, 0.5, 0.5)
    secondary: Vec3 = (0.5, 0.5, 0.5)
    axis: Vec3 = (1.0, 0.0, 0.0)
    scale: float = Field(default=0.25, gt=0)

    @field_validator("color", "secondary")
    @classmethod
    def _check_range(cls, value: Vec3) -> Vec3:
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError(f"Albedo values must lie in [0, 1], got {value}")
        return value

    def mirrored(self, index: int) -> "AlbedoTexture":
        return self.model_copy(update={"axis": _mirror_vector(self.axis, index)})

    def evaluate(self, local: np.ndarray) -> np.ndarray:
        """Albedo for an (N, 3) array of local points."""
        color = np.asarray(self.color, dtype=np.float64)
        if self.kind == "constant":
            return np.broadcast_to(color, local.shape).copy()
        secondary = np.asarray(self.secondary, dtype=np.float64)
        if self.kind == "gradient":
            axis = np.asarray(self.axis, dtype=np.float64)
            axis = axis / np.linalg.norm(axis)
            t = np.clip(0.5 + (local @ axis) / (2.0 * self.scale), 0.0, 1.0)[:, None]
            return (1.0 - t) * color + t * secondary
        # checker cells are centred on the origin so the pattern is mirror-symmetric
        cells = np.floor(local / self.scale + 0.5).astype(np.int64)
        odd = (cells.sum(axis=1) % 2).astype(bool)[:, None]
        return np.where(odd, secondary, color)


class Material(BaseModel):
    model_config = ConfigDict(frozen=True)

    albedo: AlbedoTexture = AlbedoTexture()
    specular: float = Field(default=0.0, ge=0)
    shininess: float = Field(default=1.0, ge=1)


class Ellipsoid(BaseModel):
    """Ellipsoid (or sphere) with a rotation matrix mapping local to world axes."""

    model_config = ConfigDict(frozen=True)

    center: Vec3
    radii: Vec3
    rotation: Tuple[Vec3, Vec3, Vec3] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    material: Material = Material()

    @field_validator("radii")
    @classmethod
    def _check_radii(cls, value: Vec3) -> Vec3:
        if any(r <= 0 for r in value):
            raise ValueError(f"Radii must be positive, got {value}")
        return value

    @field_validator("rotation")
    @classmethod
    def _check_rotation(cls, value):
        matrix = np.asarray(value, dtype=np.float64)
        if not np.allclose(matrix @ matrix.T, np.eye(3), atol=1e-6):
            raise ValueError("Rotation must be orthonormal")
        if not math.isclose(float(np.linalg.det(matrix)), 1.0, abs_tol=1e-6):
            raise ValueError("Rotation must be proper (det = +1)")
        return value

    @property
    def rotation_matrix(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=np.float64)

    def mirrored(self, index: int) -> "Ellipsoid":
        sign = np.ones(3)
        sign[index] = -1.0
        matrix = sign[:, None] * self.rotation_matrix * sign[None, :]
        return Ellipsoid(
            center=_mirror_vector(self.center, index),
            radii=self.radii,
            rotation=tuple(tuple(float(v) for v in row) for row in matrix),
            material=self.material.model_copy(
                update={"albedo": self.material.albedo.mirrored(index)}
            ),
        )


class GroundPlane(BaseModel):
    model_config = ConfigDict(frozen=True)

    point: Vec3 = (0.0, 0.0, -0.6)
    normal: Vec3 = (0.0, 0.0, 1.0)
    material: Material = Material()

    @field_validator("normal")
    @classmethod
    def _normalize(cls, value: Vec3) -> Vec3:
        vec = np.asarray(value, dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        if norm == 0:
            raise ValueError("Plane normal must be non-zero")
        return tuple(float(v) for v in vec / norm)

    def mirrored(self, index: int) -> "GroundPlane":
        return GroundPlane(
            point=_mirror_vector(self.point, index),
            normal=_mirror_vector(self.normal, index),
            material=self.material.model_copy(
                update={"albedo": self.material.albedo.mirrored(index)}
            ),
        )


class Camera(BaseModel):
    """Orthographic camera looking along -z; pixel centres are symmetric about the axis."""

    model_config = ConfigDict(frozen=True)

    width: int = Field(default=128, ge=1)
    height: int = Field(default=128, ge=1)
    pixel_scale: float = Field(default=2.0 / 128, gt=0)

    def pixel_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every pixel centre, each shaped (H, W)."""
        cols = np.arange(self.width, dtype=np.float64)
        rows = np.arange(self.height, dtype=np.float64)
        x = (cols - (self.width - 1) / 2.0) * self.pixel_scale
        y = ((self.height - 1) / 2.0 - rows) * self.pixel_scale
        return np.meshgrid(x, y)


class SceneSpec(BaseModel):
    """A complete parametric scene."""

    model_config = ConfigDict(frozen=True)

    seed: int = 0
    camera: Camera = Camera()
    ellipsoids: List[Ellipsoid] = []
    ground: Optional[GroundPlane] = None

    @model_validator(mode="after")
    def _check_primitives(self) -> "SceneSpec":
        if not self.ellipsoids and self.ground is None:
            raise ValueError("A scene needs at least one primitive")
        return self

    def primitives(self) -> list:
        return list(self.ellipsoids) + ([self.ground] if self.ground is not None else [])

    def mirrored(self, axis: str) -> "SceneSpec":
        """Scene mirrored across the x (horizontal flip) or y (vertical flip) axis."""
        index = _AXIS_INDEX.get(axis)
        if index is None:
            raise ValueError(f"Unknown flip axis: {axis}")
        return SceneSpec(
            seed=self.seed,
            camera=self.camera,
            ellipsoids=[e.mirrored(index) for e in self.ellipsoids],
            ground=self.ground.mirrored(index) if self.ground is not None else None,
        )


# ----------------------------------------------------------------------------
# Ray casting


def _intersect(primitive, origins: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Nearest positive hit distance per ray, +inf on a miss."""
    if isinstance(primitive, GroundPlane):
        normal = np.asarray(primitive.normal)
        denom = direction @ normal
        if np.ndim(denom) == 0:
            denom = np.full(len(origins), float(denom))
        numer = (np.asarray(primitive.point) - origins) @ normal
        safe = np.where(np.abs(denom) > _HIT_EPSILON, denom, 1.0)
        t = numer / safe
        return np.where((np.abs(denom) > _HIT_EPSILON) & (t > _HIT_EPSILON), t, np.inf)

    rotation = primitive.rotation_matrix
    radii = np.asarray(primitive.radii)
    o = ((origins - np.asarray(primitive.center)) @ rotation) / radii
    d = (np.broadcast_to(direction, origins.shape) @ rotation) / radii
    a = np.sum(d * d, axis=1)
    b = 2.0 * np.sum(o * d, axis=1)
    c = np.sum(o * o, axis=1) - 1.0
    disc = b * b - 4.0 * a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    t_near = (-b - root) / (2.0 * a)
    t_far = (-b + root) / (2.0 * a)
    t = np.where(t_near > _HIT_EPSILON, t_near, np.where(t_far > _HIT_EPSILON, t_far, np.inf))
    return np.where(disc >= 0.0, t, np.inf)


def _surface(primitive, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """World normals and texture coordinates at points on the primitive."""
    if isinstance(primitive, GroundPlane):
        normals = np.broadcast_to(np.asarray(primitive.normal), points.shape).copy()
        return normals, points - np.asarray(primitive.point)
    rotation = primitive.rotation_matrix
    local = (points - np.asarray(primitive.center)) @ rotation
    gradient = local / np.square(np.asarray(primitive.radii))
    normals = gradient @ rotation.T
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, local


def _occluded(primitives, origins: np.ndarray, direction: np.ndarray) -> np.ndarray:
    blocked = np.zeros(len(origins), dtype=bool)
    for primitive in primitives:
        blocked |= np.isfinite(_intersect(primitive, origins, direction))
    return blocked


def render_olat(scene: SceneSpec, light: DirectionalLight) -> IntrinsicSet:
    """
    Ray trace one frame of the scene under a single directional light.

    The residual is a Phong lobe ``k_s * max(0, r_z)^shininess * intensity``
    around the mirror direction of the light. It is zero wherever ``n . l <= 0``,
    so back-facing points never carry a highlight and ``R`` is confined to the
    same pixels as positive shading.

    Args:
        scene: Scene to render
        light: Directional light (unit direction, non-negative intensity)

    Returns:
        Exact intrinsic layers; background pixels are zero in every layer
    """
    camera = scene.camera
    height, width = camera.height, camera.width
    x, y = camera.pixel_grid()
    origins = np.stack([x.ravel(), y.ravel(), np.full(x.size, CAMERA_HEIGHT)], axis=1)
    view_ray = np.array([0.0, 0.0, -1.0])
    primitives = scene.primitives()

    distances = np.stack([_intersect(p, origins, view_ray) for p in primitives])
    nearest = np.argmin(distances, axis=0)
    hit = np.isfinite(distances[nearest, np.arange(len(origins))])

    count = len(origins)
    normals = np.zeros((count, 3))
    albedo = np.zeros((count, 3))
    specular = np.zeros(count)
    shininess = np.ones(count)
    for index, primitive in enumerate(primitives):
        mask = hit & (nearest == index)
        if not mask.any():
            continue
        points = origins[mask] + distances[index, mask][:, None] * view_ray
        n, local = _surface(primitive, points)
        normals[mask] = n
        albedo[mask] = primitive.material.albedo.evaluate(local)
        specular[mask] = primitive.material.specular
        shininess[mask] = primitive.material.shininess

    direction = light.direction
    visibility = np.zeros(count)
    if hit.any():
        points = origins[hit] + distances[nearest[hit], np.flatnonzero(hit)][:, None] * view_ray
        shadow_origins = points + SHADOW_OFFSET * normals[hit]
        visibility[hit] = (~_occluded(primitives, shadow_origins, direction)).astype(np.float64)

    l_vec = expand_light(direction, 2, -1)
    i_vec = expand_light(light.intensity, 2, -1)
    shading = shading_kernel(normals, l_vec, i_vec)

    # Phong lobe around the mirror direction of the light, viewer along +z
    n_dot_l = normals @ direction
    reflect_z = 2.0 * n_dot_l * normals[:, 2] - direction[2]
    lobe = np.where(n_dot_l > 0.0, np.power(np.maximum(reflect_z, 0.0), shininess), 0.0)
    residual = (specular * lobe)[:, None] * i_vec

    image = compose_kernel(diffuse_kernel(albedo, shading), residual, visibility[:, None])

    def raster(values: np.ndarray, channels: int = 3) -> RasterImage:
        return RasterImage(values.reshape(height, width, channels))

    return IntrinsicSet(
        image=raster(image),
        albedo=raster(albedo),
        normals=raster(normals),
        shading=raster(shading),
        visibility=raster(visibility, 1),
        residual=raster(residual),
        light=light,
    )


# ----------------------------------------------------------------------------
# Scene construction


def _random_texture(rng: np.random.Generator) -> AlbedoTexture:
    kind = ("constant", "gradient", "checker")[rng.integers(3)]
    return AlbedoTexture(
        kind=kind,
        color=tuple(float(v) for v in rng.uniform(0.15, 0.9, 3)),
        secondary=tuple(float(v) for v in rng.uniform(0.15, 0.9, 3)),
        axis=tuple(float(v) for v in rng.normal(size=3)),
        scale=float(rng.uniform(0.1, 0.3)),
    )


def _random_material(rng: np.random.Generator, specular: bool) -> Material:
    texture = _random_texture(rng)
    if not specular:
        return Material(albedo=texture)
    return Material(
        albedo=texture,
        specular=float(rng.uniform(0.1, 0.6)),
        shininess=float(rng.uniform(8.0, 64.0)),
    )


def build_scene(seed: int, resolution: int = 128, specular: bool = True) -> SceneSpec:
    """
    Deterministic pseudo-random scene: 2-5 ellipsoids in front of a tilted backdrop.

    The first primitive is placed in the upper half of the frame and the backdrop
    sits behind all primitives, so oblique rig lights cast shadows onto it.

    Args:
        seed: Scene seed
        resolution: Square image size in pixels
        specular: Give primitives Phong highlights (otherwise pure Lambertian)
    """
    rng = np.random.default_rng(seed)
    n_primitives = int(rng.integers(2, 6))
    ellipsoids = []
    for index in range(n_primitives):
        radius = float(rng.uniform(0.15, 0.35))
        if rng.random() < 0.5:
            radii = (radius, radius, radius)
        else:
            radii = tuple(float(r) for r in radius * rng.uniform(0.6, 1.4, 3))
        x, y = rng.uniform(-0.6, 0.6, 2)
        if index == 0:
            y = abs(y)
        z = float(rng.uniform(-0.1, 0.3))
        rotation = Rotation.from_euler("xyz", rng.uniform(-np.pi, np.pi, 3)).as_matrix()
        ellipsoids.append(
            Ellipsoid(
                center=(float(x), float(y), z),
                radii=radii,
                rotation=tuple(tuple(float(v) for v in row) for row in rotation),
                material=_random_material(rng, specular),
            )
        )

    tilt = rng.normal(0.0, 0.1, 2)
    ground = GroundPlane(
        point=(0.0, 0.0, -0.6),
        normal=(float(tilt[0]), float(tilt[1]), 1.0),
        material=Material(albedo=_random_texture(rng)),
    )
    camera = Camera(width=resolution, height=resolution, pixel_scale=2.0 / resolution)
    return SceneSpec(seed=seed, camera=camera, ellipsoids=ellipsoids, ground=ground)


def lambertian_sphere_scene(
    resolution: int = 64, radius: float = 0.8, albedo: Vec3 = (0.5, 0.5, 0.5)
) -> SceneSpec:
    """Single diffuse sphere on a black background."""
    return SceneSpec(
        camera=Camera(width=resolution, height=resolution, pixel_scale=2.0 / resolution),
        ellipsoids=[
            Ellipsoid(
                center=(0.0, 0.0, 0.0),
                radii=(radius, radius, radius),
                material=Material(albedo=AlbedoTexture(color=albedo, secondary=albedo)),
            )
        ],
    )


def chrome_sphere_scene(
    resolution: int = 256, radius_pixels: float = 120.0, shininess: float = 2000.0
) -> SceneSpec:
    """A near-mirror sphere centred in the frame, for light calibration."""
    pixel_scale = 2.0 / resolution
    radius = radius_pixels * pixel_scale
    black = AlbedoTexture(color=(0.0, 0.0, 0.0), secondary=(0.0, 0.0, 0.0))
    return SceneSpec(
        camera=Camera(width=resolution, height=resolution, pixel_scale=pixel_scale),
        ellipsoids=[
            Ellipsoid(
                center=(0.0, 0.0, 0.0),
                radii=(radius, radius, radius),
                material=Material(albedo=black, specular=1.0, shininess=shininess),
            )
        ],
    )


# ----------------------------------------------------------------------------
# Datasets


def save_frame(frame: IntrinsicSet, root: PathLike, subdir: str, prefix: str) -> FrameFiles:
    """Write every layer to ``root/subdir/<prefix>_<layer>.pfm``; paths are relative to root."""
    names = {}
    for name, image in frame.rasters().items():
        relative = f"{subdir}/{prefix}_{name}.pfm"
        save_pfm(image, Path(root) / relative)
        names[name] = relative
    return FrameFiles(**names)


class OLATDatasetGenerator:
    """Renders scenes under a light set and writes frames plus a manifest."""

    def __init__(
        self,
        light_set: Optional[LightSet] = None,
        resolution: int = 128,
        specular: bool = True,
        n_jobs: int = 1,
    ):
        """
        Initialize the generator.

        Args:
            light_set: Lights to render under (defaults to the standard rig)
            resolution: Square frame size in pixels
            specular: Include Phong highlights
            n_jobs: Worker threads for per-light rendering
        """
        self.light_set = light_set if light_set is not None else standard_rig()
        self.resolution = resolution
        self.specular = specular
        self.n_jobs = n_jobs

    def render_scene(self, scene: SceneSpec) -> List[IntrinsicSet]:
        return Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(render_olat)(scene, light) for light in self.light_set.lights
        )

    def generate_dataset(self, n_scenes: int, out_dir: PathLike, seed: int = 0) -> Path:
        """
        Render ``n_scenes`` scenes (seeds ``seed`` .. ``seed + n_scenes - 1``).

        Returns:
            Path of the written ``manifest.json``
        """
        if n_scenes < 1:
            raise ValueError(f"n_scenes must be positive, got {n_scenes}")
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        light_file = "lights.txt"
        save_lights(self.light_set, out_path / light_file)

        logger.info(
            f"Rendering {n_scenes} scenes x {len(self.light_set)} lights "
            f"at {self.resolution}x{self.resolution}"
        )
        scenes, frames = [], []
        for scene_seed in range(seed, seed + n_scenes):
            scene = build_scene(scene_seed, self.resolution, self.specular)
            renders = self.render_scene(scene)
            scene_dir = f"scene_{scene_seed:04d}"
            for light_id, frame in zip(self.light_set.ids, renders):
                files = save_frame(frame, out_path, scene_dir, f"l{light_id:02d}")
                frames.append(FrameRecord(scene_seed=scene_seed, light_id=light_id, files=files))
            scenes.append(SceneRecord(scene_seed=scene_seed, spec=scene.model_dump(mode="json")))
            shadowed = sum(int((f.visibility.data == 0).sum()) for f in renders)
            logger.info(f"Scene {scene_seed}: {len(renders)} frames, {shadowed} shadowed pixels")

        manifest = DatasetManifest(
            light_file=light_file, supervision="oracle", scenes=scenes, frames=frames
        )
        return save_manifest(manifest, out_path / "manifest.json")


def generate_dataset(
    n_scenes: int,
    light_set: LightSet,
    out_dir: PathLike,
    seed: int = 0,
    resolution: int = 128,
    specular: bool = True,
    n_jobs: int = 1,
) -> Path:
    """Convenience wrapper around ``OLATDatasetGenerator``."""
    generator = OLATDatasetGenerator(light_set, resolution, specular, n_jobs)
    return generator.generate_dataset(n_scenes, out_dir, seed)
