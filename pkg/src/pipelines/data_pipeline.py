"""Orchestrated data preparation: oracle rendering, PMS reconstruction and colour stats."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd

from ..config import ConfigManager, resolve_threads
from ..data_processing import FrameStore, dataset_color_stats, split_scenes
from ..lighting import standard_rig
from ..pms import PMSThresholds, reconstruct_manifest
from ..synth import OLATDatasetGenerator

logger = logging.getLogger(__name__)


def _ensure_parent(path: Path) -> None:
    """Create parent directories for a path if they do not yet exist."""
    path.parent.mkdir(parents=True, exist_ok=True)


def load_config(config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Load the pipeline configuration when it is not provided explicitly."""
    if config is not None:
        return config

    manager = ConfigManager()
    return manager.get_pipeline_config()


def pms_thresholds(config: Dict[str, Any]) -> PMSThresholds:
    """Build solver thresholds from the ``pms`` section, ignoring non-solver keys."""
    section = {k: v for k, v in config.get("pms", {}).items() if k != "enabled"}
    return PMSThresholds.model_validate(section)


def generate_oracle_data(
    config: Dict[str, Any], force: bool = False, n_jobs: Optional[int] = None
) -> Path:
    """Render the synthetic OLAT dataset, or reuse an existing manifest."""
    synth_cfg = config.get("synth", {})
    out_dir = Path(config.get("paths", {}).get("dataset_dir", "data/oracle"))
    manifest_path = out_dir / "manifest.json"

    if manifest_path.exists() and not force:
        logger.info(f"Reusing oracle dataset at {manifest_path}")
        return manifest_path

    light_set = standard_rig(
        synth_cfg.get("n_lights", 32), synth_cfg.get("min_elevation_z", 0.15)
    )
    generator = OLATDatasetGenerator(
        light_set,
        resolution=synth_cfg.get("resolution", 128),
        specular=synth_cfg.get("specular", True),
        n_jobs=n_jobs or 1,
    )
    return generator.generate_dataset(
        synth_cfg.get("n_scenes", 16), out_dir, seed=synth_cfg.get("seed", 0)
    )


def run_data_preparation(
    config: Optional[Dict[str, Any]] = None,
    *,
    regenerate_data: bool = False,
    persist: bool = True,
    n_jobs: Optional[int] = None,
) -> Dict[str, Any]:
    """
    Execute the full data preparation workflow.

    Args:
        config: Pipeline configuration; loaded from ``configs/`` when omitted
        regenerate_data: Re-render the oracle dataset even if it exists
        persist: Write the colour statistics file
        n_jobs: Worker threads; resolved from the ``runtime`` section when omitted

    Returns:
        Manifest paths, scene splits, the frame table and colour statistics
    """
    cfg = load_config(config)
    runtime = cfg.get("runtime", {})
    n_jobs = n_jobs or resolve_threads(runtime.get("threads"), runtime.get("deterministic", False))

    manifest_path = generate_oracle_data(cfg, force=regenerate_data, n_jobs=n_jobs)

    pms_manifest: Optional[Path] = None
    if cfg.get("pms", {}).get("enabled", True):
        pms_dir = Path(cfg.get("paths", {}).get("pms_dir", "data/pms"))
        pms_manifest = reconstruct_manifest(manifest_path, pms_dir, pms_thresholds(cfg), n_jobs)

    store = FrameStore(manifest_path)
    split_cfg = cfg.get("splits", {})
    splits = split_scenes(
        store.manifest.scene_seeds(),
        validation_size=split_cfg.get("validation_size", 0.2),
        test_size=split_cfg.get("test_size", 0.0),
        random_state=split_cfg.get("random_state", 42),
    )

    patch_width, patch_height = cfg.get("envrelight", {}).get("patch_size", (51, 76))
    color_stats = dataset_color_stats(store, splits["train"], patch_width, patch_height)
    frames = store.frames_table()

    if persist:
        _persist_outputs(cfg, color_stats.tolist(), splits, manifest_path)

    return {
        "manifest": manifest_path,
        "pms_manifest": pms_manifest,
        "splits": splits,
        "frames": frames,
        "color_stats": color_stats,
    }


def _persist_outputs(
    config: Dict[str, Any],
    color_stats: list,
    splits: Dict[str, list],
    manifest_path: Path,
) -> None:
    """Persist the colour statistics consumed by ``relight --color-match``."""
    stats_path = Path(config.get("paths", {}).get("color_stats_file", "data/color_stats.json"))
    _ensure_parent(stats_path)
    payload = {
        "manifest": str(manifest_path),
        "mean_rgb": color_stats,
        "splits": splits,
        "created_at": pd.Timestamp.utcnow().isoformat(),
    }
    stats_path.write_text(json.dumps(payload, indent=2))
    logger.info(f"Saved colour statistics to {stats_path}")
