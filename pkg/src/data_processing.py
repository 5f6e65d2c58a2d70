"""
Dataset manifests, frame loading and scene-level splits.

A manifest lists every OLAT frame of a dataset (oracle renders or a PMS
reconstruction) together with the light-set file. Paths inside a manifest are
relative to the manifest's directory.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ValidationError, model_validator
from sklearn.model_selection import train_test_split

from .exceptions import DataError
from .formation import FRAME_LAYERS, IntrinsicSet
from .image_io import center_patch_mean, load_pfm
from .lighting import LightSet, load_lights

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MANIFEST_VERSION = 1


class FrameFiles(BaseModel):
    image: str
    albedo: str
    normals: str
    shading: str
    visibility: str
    residual: str


class FrameRecord(BaseModel):
    scene_seed: int
    light_id: int
    files: FrameFiles


class SceneRecord(BaseModel):
    scene_seed: int
    spec: Optional[Dict[str, Any]] = None


class DatasetManifest(BaseModel):
    """Schema of a dataset or reconstruction manifest."""

    version: int = MANIFEST_VERSION
    light_file: str
    supervision: Literal["oracle", "pms"] = "oracle"
    scenes: List[SceneRecord]
    frames: List[FrameRecord]

    @model_validator(mode="after")
    def _check_references(self) -> "DatasetManifest":
        if self.version != MANIFEST_VERSION:
            raise ValueError(f"Unsupported manifest version {self.version}")
        seeds = {scene.scene_seed for scene in self.scenes}
        if len(seeds) != len(self.scenes):
            raise ValueError("Duplicate scene seeds in manifest")
        keys = set()
        for frame in self.frames:
            if frame.scene_seed not in seeds:
                raise ValueError(f"Frame references unknown scene {frame.scene_seed}")
            key = (frame.scene_seed, frame.light_id)
            if key in keys:
                raise ValueError(f"Duplicate frame for scene {key[0]}, light {key[1]}")
            keys.add(key)
        return self

    def scene_seeds(self) -> List[int]:
        return [scene.scene_seed for scene in self.scenes]


def save_manifest(manifest: DatasetManifest, path: PathLike) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Saved manifest with {len(manifest.frames)} frames to {target}")
    return target


def load_manifest(path: PathLike, check_files: bool = True) -> DatasetManifest:
    """
    Read and schema-validate a manifest.

    Args:
        path: Manifest JSON file
        check_files: Also verify that every referenced file exists

    Raises:
        DataError: If the file is not valid JSON, violates the schema or
            references missing files
    """
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise DataError(f"Manifest not found: {manifest_path}")
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first.get("loc", ()))
        raise DataError(f"Invalid manifest {manifest_path}: {location} {first['msg']}") from None

    if check_files:
        root = manifest_path.parent
        missing = [
            str(root / relative)
            for frame in manifest.frames
            for relative in frame.files.model_dump().values()
            if not (root / relative).exists()
        ]
        if not (root / manifest.light_file).exists():
            missing.append(str(root / manifest.light_file))
        if missing:
            raise DataError(f"Manifest references {len(missing)} missing files, e.g. {missing[0]}")
    return manifest


class FrameStore:
    """Lazy, cached access to the frames of one manifest."""

    def __init__(self, manifest_path: PathLike, cache_size: int = 256):
        """
        Initialize the frame store.

        Args:
            manifest_path: Path to an oracle or PMS manifest
            cache_size: Number of decoded frames kept in memory
        """
        self.manifest_path = Path(manifest_path)
        self.root = self.manifest_path.parent
        self.manifest = load_manifest(self.manifest_path)
        if not self.manifest.frames:
            raise DataError(f"Manifest {self.manifest_path} contains no frames")
        self.lights: LightSet = load_lights(self.root / self.manifest.light_file)
        self._records = {(f.scene_seed, f.light_id): f for f in self.manifest.frames}
        unknown = {light_id for _, light_id in self._records} - set(self.lights.ids)
        if unknown:
            raise DataError(f"Frames reference unknown light ids: {sorted(unknown)}")
        self.load_frame = lru_cache(maxsize=cache_size)(self._load_frame)

    @property
    def supervision(self) -> str:
        return self.manifest.supervision

    def frames_table(self) -> pd.DataFrame:
        """One row per frame: scene seed, light id and the light's direction."""
        rows = []
        for frame in self.manifest.frames:
            light = self.lights[frame.light_id]
            dx, dy, dz = light.direction
            rows.append(
                {
                    "scene_seed": frame.scene_seed,
                    "light_id": frame.light_id,
                    "dx": dx,
                    "dy": dy,
                    "dz": dz,
                    "image": str(self.root / frame.files.image),
                }
            )
        return pd.DataFrame(rows)

    def light_ids(self, scene_seed: int) -> List[int]:
        return sorted(light_id for seed, light_id in self._records if seed == scene_seed)

    def frame_path(self, scene_seed: int, light_id: int, layer: str) -> Path:
        record = self._records.get((scene_seed, light_id))
        if record is None:
            raise DataError(f"No frame for scene {scene_seed}, light {light_id}")
        return self.root / getattr(record.files, layer)

    def _load_frame(self, scene_seed: int, light_id: int) -> IntrinsicSet:
        record = self._records.get((scene_seed, light_id))
        if record is None:
            raise DataError(f"No frame for scene {scene_seed}, light {light_id}")
        layers = {
            name: load_pfm(self.root / getattr(record.files, name)) for name in FRAME_LAYERS
        }
        return IntrinsicSet(**layers, light=self.lights[light_id])

    def load_image(self, scene_seed: int, light_id: int):
        return self.load_frame(scene_seed, light_id).image


def split_scenes(
    scene_seeds: Sequence[int],
    validation_size: float = 0.2,
    test_size: float = 0.0,
    random_state: int = 42,
) -> Dict[str, List[int]]:
    """
    Split scenes (never frames) into train/validation/test groups.

    Args:
        scene_seeds: All scene seeds of a dataset
        validation_size: Fraction of scenes held out for validation
        test_size: Fraction of scenes held out for testing

    Returns:
        Dictionary with ``train``, ``validation`` and ``test`` seed lists
    """
    seeds = sorted(scene_seeds)
    splits = {"train": seeds, "validation": [], "test": []}
    if not 0 <= validation_size < 1 or not 0 <= test_size < 1:
        raise ValueError("Split fractions must lie in [0, 1)")

    if test_size > 0 and len(splits["train"]) > 1:
        splits["train"], splits["test"] = train_test_split(
            splits["train"], test_size=test_size, random_state=random_state
        )
    if validation_size > 0 and len(splits["train"]) > 1:
        adjusted = min(validation_size / (1 - test_size), 0.5)
        splits["train"], splits["validation"] = train_test_split(
            splits["train"], test_size=adjusted, random_state=random_state
        )

    splits = {name: sorted(int(s) for s in values) for name, values in splits.items()}
    logger.info(
        f"Scene split - Train: {len(splits['train'])}, "
        f"Val: {len(splits['validation'])}, Test: {len(splits['test'])}"
    )
    return splits


def sample_pairs(
    store: FrameStore, scene_seeds: Sequence[int], count: int, rng: np.random.Generator
) -> List[Tuple[int, int, int]]:
    """
    Draw relighting pairs (scene, source light, target light) within scenes.

    Source and target differ whenever a scene has more than one light.
    """
    if not scene_seeds:
        raise DataError("No scenes available to draw relighting pairs from")
    pairs = []
    for _ in range(count):
        scene = int(scene_seeds[rng.integers(len(scene_seeds))])
        ids = store.light_ids(scene)
        src = ids[rng.integers(len(ids))]
        if len(ids) > 1:
            others = [i for i in ids if i != src]
            dst = others[rng.integers(len(others))]
        else:
            dst = src
        pairs.append((scene, int(src), int(dst)))
    return pairs


def dataset_color_stats(
    store: FrameStore,
    scene_seeds: Optional[Sequence[int]] = None,
    patch_width: int = 51,
    patch_height: int = 76,
) -> np.ndarray:
    """Mean RGB of the center patch over the images of the given scenes."""
    seeds = set(store.manifest.scene_seeds() if scene_seeds is None else scene_seeds)
    means = [
        center_patch_mean(
            store.load_image(frame.scene_seed, frame.light_id), patch_width, patch_height
        )
        for frame in store.manifest.frames
        if frame.scene_seed in seeds
    ]
    if not means:
        raise DataError("No frames available for colour statistics")
    stats = np.mean(means, axis=0)
    logger.info(f"Dataset colour statistics: {np.round(stats, 4).tolist()}")
    return stats


def load_json_or_yaml(path: PathLike) -> Dict[str, Any]:
    """Read a JSON or YAML mapping."""

    try:
        content = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise DataError(f"Could not parse {path}: {e}") from None
    if not isinstance(content, dict):
        raise DataError(f"{path} must contain a mapping")
    return content
