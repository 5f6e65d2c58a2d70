"""
Directional lights, light-set files and chrome-sphere calibration.

Camera coordinates are right-handed: the camera looks along -z, +x points
right and +y points up. A light direction points from the surface towards
the light.
"""

import logging
import math
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DataError, FormatError
from .image_io import RasterImage

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

VIEW_DIRECTION = np.array([0.0, 0.0, 1.0])
UNIT_TOLERANCE = 1e-6


class DirectionalLight:
    """A distant light: unit direction plus per-channel intensity."""

    __slots__ = ("_direction", "_intensity")

    def __init__(self, direction: Sequence[float], intensity: Sequence[float] = (1.0, 1.0, 1.0)):
        """
        Args:
            direction: Unit 3-vector towards the light
            intensity: Non-negative RGB radiance scale (a scalar is broadcast)

        Raises:
            ValueError: If the direction is not unit length or intensity is negative
        """
        direction_arr = np.asarray(direction, dtype=np.float64).reshape(3)
        intensity_arr = np.broadcast_to(np.asarray(intensity, dtype=np.float64), (3,)).copy()
        norm = float(np.linalg.norm(direction_arr))
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            raise ValueError(f"Light direction must be unit length, got norm {norm:.8f}")
        if np.any(intensity_arr < 0) or not np.all(np.isfinite(intensity_arr)):
            raise ValueError(f"Light intensity must be finite and non-negative: {intensity_arr}")
        direction_arr.setflags(write=False)
        intensity_arr.setflags(write=False)
        self._direction = direction_arr
        self._intensity = intensity_arr

    @classmethod
    def from_vector(
        cls, vector: Sequence[float], intensity: Sequence[float] = (1.0, 1.0, 1.0)
    ) -> "DirectionalLight":
        """Normalize an arbitrary non-zero vector into a light."""
        vec = np.asarray(vector, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError("Light direction must be a finite non-zero vector")
        return cls(vec / norm, intensity)

    @classmethod
    def parse(cls, text: str) -> "DirectionalLight":
        """Parse ``"dx dy dz ir ig ib"`` (as accepted on the command line)."""
        parts = text.replace(",", " ").split()
        if len(parts) != 6:
            raise ValueError(f"Expected 'dx dy dz ir ig ib', got {text!r}")
        values = [float(part) for part in parts]
        return cls.from_vector(values[:3], values[3:])

    @property
    def direction(self) -> np.ndarray:
        return self._direction

    @property
    def intensity(self) -> np.ndarray:
        return self._intensity

    def scaled(self, factor: float) -> "DirectionalLight":
        return DirectionalLight(self._direction, self._intensity * factor)

    def with_intensity(self, intensity: Sequence[float]) -> "DirectionalLight":
        return DirectionalLight(self._direction, intensity)

    def flipped(self, axis: str) -> "DirectionalLight":
        """Mirror the direction to follow an image flip (x for horizontal, y for vertical)."""
        index = {"horizontal": 0, "vertical": 1}.get(axis)
        if index is None:
            raise ValueError(f"Unknown flip axis: {axis}")
        direction = self._direction.copy()
        direction[index] = -direction[index]
        return DirectionalLight(direction, self._intensity)

    def to_line(self) -> str:
        values = list(self._direction) + list(self._intensity)
        return " ".join(f"{value:.9g}" for value in values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DirectionalLight):
            return NotImplemented
        return np.array_equal(self._direction, other._direction) and np.array_equal(
            self._intensity, other._intensity
        )

    def __repr__(self) -> str:
        d = ", ".join(f"{v:.4f}" for v in self._direction)
        i = ", ".join(f"{v:.4f}" for v in self._intensity)
        return f"DirectionalLight(direction=({d}), intensity=({i}))"


class LightSet:
    """Ordered collection of lights with stable integer ids."""

    def __init__(self, lights: Sequence[DirectionalLight], ids: Optional[Sequence[int]] = None):
        if not lights:
            raise ValueError("A light set must contain at least one light")
        ids = list(range(len(lights))) if ids is None else [int(i) for i in ids]
        if len(ids) != len(lights):
            raise ValueError("Light ids and lights must have the same length")
        if len(set(ids)) != len(ids):
            raise ValueError(f"Light ids must be unique: {ids}")
        self.lights: List[DirectionalLight] = list(lights)
        self.ids: List[int] = ids

    def __len__(self) -> int:
        return len(self.lights)

    def __iter__(self) -> Iterator[Tuple[int, DirectionalLight]]:
        return iter(zip(self.ids, self.lights))

    def __getitem__(self, light_id: int) -> DirectionalLight:
        return self.lights[self.ids.index(light_id)]

    def directions(self) -> np.ndarray:
        """(K, 3) matrix of light directions."""
        return np.stack([light.direction for light in self.lights])

    def intensities(self) -> np.ndarray:
        """(K, 3) matrix of RGB intensities."""
        return np.stack([light.intensity for light in self.lights])

    def subset(self, light_ids: Sequence[int]) -> "LightSet":
        return LightSet([self[i] for i in light_ids], light_ids)


def standard_rig(n_lights: int = 32, min_elevation_z: float = 0.15) -> LightSet:
    """
    Deterministic upper-hemisphere spiral of white unit-intensity lights.

    The z component runs from 1 (at the camera) down to ``min_elevation_z``;
    azimuths advance by the golden angle.
    """
    golden_angle = math.pi * (3.0 - math.sqrt(5.0))
    lights = []
    for k in range(n_lights):
        z = 1.0 - (1.0 - min_elevation_z) * (k + 0.5) / n_lights
        radius = math.sqrt(max(0.0, 1.0 - z * z))
        phi = golden_angle * k
        lights.append(
            DirectionalLight.from_vector([radius * math.cos(phi), radius * math.sin(phi), z])
        )
    return LightSet(lights)


def load_lights(path: PathLike) -> LightSet:
    """
    Read a light-set text file: one ``id dx dy dz ir ig ib`` per line.

    Blank lines and lines starting with ``#`` are ignored; directions are
    re-normalized.

    Raises:
        FormatError: On malformed lines, with the 1-based line number
    """
    lights, ids = [], []
    text = Path(path).read_text(encoding="utf-8")
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise FormatError(f"Expected 7 fields, found {len(parts)}", line=line_number)
        try:
            light_id = int(parts[0])
            values = [float(part) for part in parts[1:]]
        except ValueError:
            raise FormatError(f"Non-numeric light field in {line!r}", line=line_number) from None
        try:
            light = DirectionalLight.from_vector(values[:3], values[3:])
        except ValueError as exc:
            raise FormatError(str(exc), line=line_number) from None
        ids.append(light_id)
        lights.append(light)

    if not lights:
        raise FormatError("Light file contains no lights", line=1)
    try:
        return LightSet(lights, ids)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def save_lights(light_set: LightSet, path: PathLike) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# id dx dy dz ir ig ib"]
    lines.extend(f"{light_id} {light.to_line()}" for light_id, light in light_set)
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved {len(light_set)} lights to {target}")


def calibrate_from_sphere(
    image: RasterImage,
    center: Tuple[float, float],
    radius: float,
    reflectance: float = 1.0,
    top_fraction: float = 0.001,
) -> DirectionalLight:
    """
    Recover a directional light from an orthographic image of a mirror sphere.

    The highlight is the brightness-weighted centroid of the brightest
    ``top_fraction`` of disc pixels. Pixel (column j, row i) sits at image
    coordinates (j, i); the image y axis is negated into camera +y.

    Args:
        image: Linear radiance image containing the sphere
        center: Disc center (x, y) in pixel coordinates
        radius: Disc radius in pixels
        reflectance: Mirror reflectance dividing the recovered intensity

    Returns:
        Calibrated light

    Raises:
        DataError: If the disc leaves the image, is uniform, or the highlight
            falls outside the disc
    """
    cx, cy = float(center[0]), float(center[1])
    if radius <= 0 or reflectance <= 0:
        raise DataError("Sphere radius and reflectance must be positive")
    if cx - radius < -0.5 or cy - radius < -0.5:
        raise DataError("Sphere disc is not fully inside the image")
    if cx + radius > image.width - 0.5 or cy + radius > image.height - 0.5:
        raise DataError("Sphere disc is not fully inside the image")

    rows, cols = np.mgrid[0 : image.height, 0 : image.width]
    inside = (cols - cx) ** 2 + (rows - cy) ** 2 <= radius**2
    radiance = image.data.astype(np.float64)[inside]
    brightness = radiance.mean(axis=1)
    if brightness.max() <= brightness.min():
        raise DataError("Sphere disc is uniform; no unique highlight")

    count = max(1, int(math.ceil(top_fraction * brightness.size)))
    top = np.argpartition(brightness, -count)[-count:]
    weights = brightness[top]
    if weights.sum() <= 0:
        raise DataError("Sphere highlight has no energy")
    hx = float(np.sum(cols[inside][top] * weights) / weights.sum())
    hy = float(np.sum(rows[inside][top] * weights) / weights.sum())

    nx = (hx - cx) / radius
    ny = -(hy - cy) / radius
    planar = nx * nx + ny * ny
    if planar > 1.0:
        raise DataError(f"Highlight centroid ({hx:.2f}, {hy:.2f}) lies outside the disc")
    normal = np.array([nx, ny, math.sqrt(1.0 - planar)])

    direction = 2.0 * float(normal @ VIEW_DIRECTION) * normal - VIEW_DIRECTION
    intensity = radiance[top].mean(axis=0) / reflectance
    light = DirectionalLight.from_vector(direction, np.maximum(intensity, 0.0))
    logger.info(f"Calibrated {light} from highlight at ({hx:.2f}, {hy:.2f})")
    return light
