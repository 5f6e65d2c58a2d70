"""
Configuration management utilities for the relighting pipeline.

This module provides utilities for loading and validating the YAML
configuration files, setting up logging and resolving the worker count.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "RELIGHT_THREADS"

METRIC_NAMES = ("l1", "l2", "dssim", "msdssim", "msssim")

DEFAULT_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class ConfigManager:
    """Loads, caches and validates the YAML files under ``configs/``."""

    REQUIRED_SECTIONS = {
        "pipeline_config": ("synth", "pms", "envrelight", "runtime", "logging"),
        "training_config": ("training", "model", "losses", "mlflow", "evaluation", "logging"),
    }

    def __init__(self, config_dir: str = "configs"):
        """
        Initialize the configuration manager.

        Args:
            config_dir: Directory containing configuration files; relative
                paths resolve against the repository root
        """
        cfg_path = Path(config_dir)
        if not cfg_path.is_absolute():
            cfg_path = Path(__file__).resolve().parents[1] / cfg_path

        self.config_dir = cfg_path
        self._configs: Dict[str, Dict[str, Any]] = {}

    def config_path(self, config_name: str) -> Path:
        return self.config_dir / f"{config_name}.yaml"

    def load_config(self, config_name: str) -> Dict[str, Any]:
        """
        Load a configuration file, validating it on first use.

        Raises:
            FileNotFoundError: If configuration file doesn't exist
            yaml.YAMLError: If YAML parsing fails
            ValueError: If a required section or value is invalid
        """
        if config_name in self._configs:
            return self._configs[config_name]

        path = self.config_path(config_name)
        if not path.exists():
            raise FileNotFoundError(f"Configuration file not found: {path}")

        try:
            with open(path, "r", encoding="utf-8") as file:
                config = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            logger.error(f"Error parsing YAML file {path}: {e}")
            raise

        self._validate_config(config_name, config)
        self._configs[config_name] = config
        logger.info(f"Loaded configuration: {config_name}")
        return config

    def get_pipeline_config(self) -> Dict[str, Any]:
        """Load data-pipeline configuration (synthesis, PMS, env maps, logging)."""
        return self.load_config("pipeline_config")

    def get_training_config(self) -> Dict[str, Any]:
        """Load training configuration."""
        return self.load_config("training_config")

    def _validate_config(self, config_name: str, config: Dict[str, Any]) -> None:
        missing = [s for s in self.REQUIRED_SECTIONS.get(config_name, ()) if s not in config]
        if missing:
            raise ValueError(f"Missing required section in {config_name}: {', '.join(missing)}")

        if config_name == "pipeline_config":
            self._validate_pipeline_config(config)
        elif config_name == "training_config":
            self._validate_training_config(config)

    @staticmethod
    def _validate_pipeline_config(config: Dict[str, Any]) -> None:
        synth = config["synth"]
        if synth.get("resolution", 128) < 8:
            raise ValueError(f"synth.resolution must be at least 8, got: {synth['resolution']}")

        pms = config["pms"]
        low, high = pms.get("low", 0.02), pms.get("high", 0.98)
        if not 0 <= low < high <= 1:
            raise ValueError(
                f"pms thresholds must satisfy 0 <= low < high <= 1, got: {low}, {high}"
            )

        for key in ("n_scenes", "n_lights"):
            if synth.get(key, 1) < 1:
                raise ValueError(f"synth.{key} must be positive, got: {synth[key]}")

        envrelight = config["envrelight"]
        if envrelight.get("width", 64) < 1 or envrelight.get("height", 32) < 1:
            raise ValueError("envrelight width and height must be positive")

    @staticmethod
    def _validate_training_config(config: Dict[str, Any]) -> None:
        training = config["training"]
        if "learning_rate" in training and not training["learning_rate"] > 0:
            raise ValueError(f"learning_rate must be positive, got: {training['learning_rate']}")

        losses = config["losses"]
        metric = losses.get("metric", "dssim")
        if metric not in METRIC_NAMES:
            raise ValueError(f"Unknown loss metric: {metric}")
        weights = losses.get("weights", {})
        if any(weight < 0 for weight in weights.values()):
            raise ValueError("Loss weights must be non-negative")
        if weights.get("image", 1.0) <= 0:
            raise ValueError("The final-image loss must stay active")

        metrics = config["evaluation"].get("metrics", [])
        unknown = [name for name in metrics if name not in METRIC_NAMES]
        if unknown:
            raise ValueError(f"Unknown evaluation metrics: {unknown}")

    def update_config(self, config_name: str, updates: Dict[str, Any]) -> None:
        """Replace top-level sections of a loaded configuration in memory."""
        config = self.load_config(config_name)
        config.update(updates)
        logger.info(f"Updated configuration: {config_name} ({', '.join(updates)})")

    def save_config(self, config_name: str, config: Dict[str, Any]) -> Path:
        """Validate and write a configuration, replacing the cached copy."""
        self._validate_config(config_name, config)
        path = self.config_path(config_name)
        with open(path, "w", encoding="utf-8") as file:
            yaml.safe_dump(config, file, default_flow_style=False, indent=2)
        self._configs[config_name] = config
        logger.info(f"Saved configuration: {config_name} -> {path}")
        return path


def setup_logging(config: Dict[str, Any], level_override: Optional[str] = None) -> None:
    """
    Configure the root logger from a ``logging`` section.

    Args:
        config: Configuration dictionary containing logging settings
        level_override: Level that takes precedence over the configured one
    """
    logging_config = config.get("logging", {})
    level = level_override or logging_config.get("level", "INFO")
    formatter = logging.Formatter(logging_config.get("format", DEFAULT_LOG_FORMAT))

    handlers: list = [logging.StreamHandler()]
    log_file = logging_config.get("file")
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    for handler in handlers:
        handler.setFormatter(formatter)

    logging.basicConfig(level=getattr(logging, level.upper()), handlers=handlers, force=True)


def resolve_threads(threads: Optional[int] = None, deterministic: bool = False) -> int:
    """
    Worker count: 1 when deterministic, else ``threads``, else $RELIGHT_THREADS, else CPUs.

    Raises:
        ValueError: If the requested or environment value is not a positive integer
    """
    if deterministic:
        return 1
    if threads is None:
        env_value = os.environ.get(THREADS_ENV_VAR)
        if env_value:
            try:
                threads = int(env_value)
            except ValueError:
                raise ValueError(
                    f"{THREADS_ENV_VAR} must be an integer, got {env_value!r}"
                ) from None
    if threads is None:
        return os.cpu_count() or 1
    if threads < 1:
        raise ValueError(f"Thread count must be positive, got {threads}")
    return threads
