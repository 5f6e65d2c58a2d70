"""
Training utilities for the relighting generator.

This module provides the training configuration, the per-intrinsic loss,
Adam updates and a trainer that draws relighting pairs from a manifest,
tracks losses per epoch and optionally reports to MLflow.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import matplotlib.pyplot as plt
import mlflow
import numpy as np
import pandas as pd
import seaborn as sns
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, field_validator, model_validator

from . import autodiff as ad
from .augment import AugmentationConfig, augment_pair, sample_rng
from .data_processing import FrameStore, sample_pairs, split_scenes
from .exceptions import DataError, NumericalError
from .formation import IntrinsicSet
from .image_io import center_crop
from .metrics import canonical_metric
from .model import Generator, GeneratorOutputs, LightBatch, ModelConfig, ModelParams, save_model

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TARGETS = ("image", "albedo", "normals", "shading", "diffuse", "visibility", "residual")
MetricName = Literal["l1", "l2", "dssim", "msdssim", "msssim"]

_VALIDATION_STREAM = 7919


class TrainConfig(BaseModel):
    """Optimization, data and loss settings of one training run."""

    loss: MetricName = "dssim"
    loss_overrides: Dict[str, MetricName] = Field(default_factory=dict)
    loss_weights: Dict[str, float] = Field(default_factory=lambda: {t: 1.0 for t in TARGETS})
    learning_rate: float = Field(default=2e-4, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=4, ge=1)
    pairs_per_epoch: int = Field(default=64, ge=1)
    validation_pairs: int = Field(default=16, ge=0)
    validation_size: float = Field(default=0.2, ge=0, lt=1)
    test_size: float = Field(default=0.0, ge=0, lt=1)
    seed: int = 42
    known_source_illumination: bool = True
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    eval_crop: Optional[Tuple[int, int]] = (128, 128)
    n_jobs: int = 1
    dtype: Literal["float32", "float64"] = "float32"
    model: ModelConfig = Field(default_factory=ModelConfig)

    @field_validator("loss_weights")
    @classmethod
    def _check_weights(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = set(value) - set(TARGETS)
        if unknown:
            raise ValueError(f"Unknown loss targets: {sorted(unknown)}")
        if any(weight < 0 for weight in value.values()):
            raise ValueError("Loss weights must be non-negative")
        weights = {target: 0.0 for target in TARGETS}
        weights.update(value)
        if weights["image"] <= 0:
            raise ValueError("The final-image loss weight must be positive")
        return weights

    @field_validator("loss_overrides")
    @classmethod
    def _check_overrides(cls, value: Dict[str, str]) -> Dict[str, str]:
        unknown = set(value) - set(TARGETS)
        if unknown:
            raise ValueError(f"Unknown loss targets: {sorted(unknown)}")
        return value

    @model_validator(mode="after")
    def _sync_model(self) -> "TrainConfig":
        if self.model.known_source_illumination != self.known_source_illumination:
            self.model = self.model.model_copy(
                update={"known_source_illumination": self.known_source_illumination}
            )
        return self

    def metric_for(self, target: str) -> str:
        if target == "normals":
            return "l2"
        return canonical_metric(self.loss_overrides.get(target, self.loss))

    @classmethod
    def from_sections(cls, config: Dict[str, Any]) -> "TrainConfig":
        """Build from a ``training_config`` mapping with ``training``/``model``/``losses``."""
        values = dict(config.get("training", {}))
        losses = config.get("losses", {})
        if "metric" in losses:
            values["loss"] = losses["metric"]
        if "weights" in losses:
            values["loss_weights"] = losses["weights"]
        if "overrides" in losses:
            values["loss_overrides"] = losses["overrides"]
        if "model" in config:
            values["model"] = config["model"]
        return cls.model_validate(values)


# ----------------------------------------------------------------------------
# Batches and losses


@dataclass
class Batch:
    """Stacked relighting pairs: source images, both lights and target layers."""

    image: np.ndarray
    l_src: LightBatch
    l_dst: LightBatch
    targets: Dict[str, np.ndarray]

    def __len__(self) -> int:
        return self.image.shape[0]


def _targets_of(frame: IntrinsicSet) -> Dict[str, np.ndarray]:
    albedo, shading = frame.albedo.to_chw(), frame.shading.to_chw()
    return {
        "image": frame.image.to_chw(),
        "albedo": albedo,
        "normals": frame.normals.to_chw(),
        "shading": shading,
        "diffuse": albedo * shading,
        "visibility": frame.visibility.to_chw(),
        "residual": frame.residual.to_chw(),
    }


def make_batch(pairs: Sequence[Tuple[IntrinsicSet, IntrinsicSet]], dtype=np.float32) -> Batch:
    """Stack (source, target) frame pairs into one channel-first batch."""
    if not pairs:
        raise DataError("Cannot build a batch from zero pairs")
    targets = [_targets_of(target) for _, target in pairs]
    return Batch(
        image=np.stack([source.image.to_chw() for source, _ in pairs]).astype(dtype),
        l_src=LightBatch.from_lights([source.light for source, _ in pairs]),
        l_dst=LightBatch.from_lights([target.light for _, target in pairs]),
        targets={k: np.stack([t[k] for t in targets]).astype(dtype) for k in TARGETS},
    )


def _target_loss(name: str, metric: str, prediction: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    """
    Loss of one supervised layer.

    Only the structural metrics clamp their inputs to [0, 1], with the signed
    residual shifted by +0.5 first. L1 and L2 training terms compare raw values
    so that out-of-range predictions keep a gradient; evaluation through
    ``metrics.evaluate`` still clamps. Normals always use unclamped L2.
    """
    if name == "normals":
        return ad.metric_loss("l2", prediction, target, clamp=False)
    structural = metric in ("dssim", "msdssim")
    if name == "residual" and structural:
        return ad.metric_loss(metric, ad.affine(prediction, 1.0, 0.5), target + 0.5, clamp=True)
    return ad.metric_loss(metric, prediction, target, clamp=structural)


def compute_losses(
    outputs: GeneratorOutputs, targets: Dict[str, np.ndarray], config: TrainConfig
) -> Tuple[ad.Tensor, Dict[str, float]]:
    """
    Weighted sum of the per-target losses that the architecture produces.

    Returns:
        Tuple of (total loss tensor, per-target loss values)
    """
    terms, values = [], {}
    for name in TARGETS:
        weight = config.loss_weights[name]
        prediction = getattr(outputs, name)
        if prediction is None or weight == 0:
            continue
        loss = _target_loss(name, config.metric_for(name), prediction, targets[name])
        values[name] = loss.item()
        terms.append(ad.affine(loss, weight))
    total = ad.sum_scalars(terms)
    return total, values


def adam_update(params: ModelParams, grads: Dict[str, np.ndarray], config: TrainConfig) -> None:
    """One in-place Adam step with bias correction."""
    params.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1**params.step
    correction2 = 1.0 - b2**params.step
    m, v = params.moments["m"], params.moments["v"]
    for name, grad in grads.items():
        grad = grad.astype(np.float32)
        m[name] = b1 * m[name] + (1.0 - b1) * grad
        v[name] = b2 * v[name] + (1.0 - b2) * grad * grad
        update = config.learning_rate * (m[name] / correction1)
        update /= np.sqrt(v[name] / correction2) + config.epsilon
        params.weights[name] = (params.weights[name] - update).astype(np.float32)


@dataclass
class TrainingResult:
    params: ModelParams
    history: pd.DataFrame
    splits: Dict[str, List[int]]
    validation: Dict[str, float] = field(default_factory=dict)


class ModelTrainer:
    """Relighting generator trainer with optional MLflow tracking."""

    def __init__(self, config: TrainConfig, mlflow_config: Optional[Dict[str, Any]] = None):
        """
        Initialize the trainer.

        Args:
            config: Training configuration
            mlflow_config: ``mlflow`` section (``enabled``, ``tracking_uri``,
                ``experiment_name``); tracking is off when missing
        """
        self.config = config
        self.mlflow_config = mlflow_config or {}
        self.dtype = np.dtype(config.dtype)
        self.use_mlflow = bool(self.mlflow_config.get("enabled", False))
        if self.use_mlflow:
            self._setup_mlflow()

    def _setup_mlflow(self) -> None:
        """Set up MLflow tracking."""
        tracking_uri = self.mlflow_config.get("tracking_uri", "file:./mlruns")
        experiment_name = self.mlflow_config.get("experiment_name", "relighting")

        mlflow.set_tracking_uri(tracking_uri)
        try:
            experiment = mlflow.get_experiment_by_name(experiment_name)
            if experiment is None:
                mlflow.create_experiment(experiment_name)
                logger.info(f"Created MLflow experiment: {experiment_name}")
            else:
                logger.info(f"Using existing MLflow experiment: {experiment_name}")
            mlflow.set_experiment(experiment_name)
        except Exception as e:
            logger.error(f"Error setting up MLflow: {e}")
            raise

    # ------------------------------------------------------------------
    # Data

    def _load_pair(
        self,
        store: FrameStore,
        pair: Tuple[int, int, int],
        rng: Optional[np.random.Generator],
    ) -> Tuple[IntrinsicSet, IntrinsicSet]:
        scene, src, dst = pair
        source, target = store.load_frame(scene, src), store.load_frame(scene, dst)
        if rng is not None:
            return augment_pair(source, target, self.config.augmentation, rng)
        if self.config.eval_crop is not None:
            width = min(self.config.eval_crop[0], source.width)
            height = min(self.config.eval_crop[1], source.height)
            source = source.map_rasters(lambda image: center_crop(image, width, height))
            target = target.map_rasters(lambda image: center_crop(image, width, height))
        return source, target

    def load_batch(
        self,
        store: FrameStore,
        pairs: Sequence[Tuple[int, int, int]],
        augment_keys: Optional[Sequence[Tuple[int, ...]]] = None,
    ) -> Batch:
        """
        Load and stack pairs, augmenting each with its own seeded RNG stream.

        Args:
            store: Frame store of the manifest
            pairs: (scene, source light, target light) triples
            augment_keys: One RNG key per pair; no augmentation when ``None``
        """

        def load(index: int):
            rng = None
            if augment_keys is not None:
                rng = sample_rng(self.config.seed, *augment_keys[index])
            return self._load_pair(store, pairs[index], rng)

        frames = Parallel(n_jobs=self.config.n_jobs, prefer="threads")(
            delayed(load)(index) for index in range(len(pairs))
        )
        return make_batch(frames, self.dtype)

    # ------------------------------------------------------------------
    # Optimization

    def forward(self, generator: Generator, batch: Batch) -> GeneratorOutputs:
        l_src = batch.l_src if self.config.known_source_illumination else None
        return generator(ad.constant(batch.image), batch.l_dst, l_src)

    def train_step(self, params: ModelParams, batch: Batch) -> Dict[str, float]:
        """Forward, backward and one Adam update; raises on non-finite values."""
        generator = Generator(params, self.dtype, trainable=True)
        total, values = compute_losses(self.forward(generator, batch), batch.targets, self.config)
        loss = total.item()
        if not np.isfinite(loss):
            logger.error(f"Non-finite training loss at step {params.step}: {values}")
            raise NumericalError(f"Training loss became {loss} at step {params.step}")
        total.backward()
        adam_update(params, generator.gradients(), self.config)
        if not params.is_finite():
            logger.error(f"Non-finite parameters after step {params.step}")
            raise NumericalError(f"Parameters became non-finite at step {params.step}")
        return {"total": loss, **values}

    def evaluate(
        self, params: ModelParams, store: FrameStore, pairs: Sequence[Tuple[int, int, int]]
    ) -> Dict[str, float]:
        """Mean losses over un-augmented, center-cropped pairs."""
        if not pairs:
            return {}
        generator = Generator(params, self.dtype)
        records = []
        for start in range(0, len(pairs), self.config.batch_size):
            batch = self.load_batch(store, pairs[start : start + self.config.batch_size])
            total, values = compute_losses(
                self.forward(generator, batch), batch.targets, self.config
            )
            records.append({"total": total.item(), **values, "weight": len(batch)})
        frame = pd.DataFrame(records)
        weights = frame.pop("weight")
        return {name: float(np.average(frame[name], weights=weights)) for name in frame.columns}

    def train(
        self,
        manifest_path: PathLike,
        params: Optional[ModelParams] = None,
        out_dir: Optional[PathLike] = None,
    ) -> TrainingResult:
        """
        Train on relighting pairs drawn from the training scenes of a manifest.

        Args:
            manifest_path: Oracle or PMS manifest
            params: Parameters to continue from; freshly initialized when ``None``
            out_dir: Directory for the loss-curve figure

        Returns:
            Trained parameters, per-epoch history and the scene split
        """
        store = FrameStore(manifest_path)
        splits = split_scenes(
            store.manifest.scene_seeds(),
            validation_size=self.config.validation_size,
            test_size=self.config.test_size,
            random_state=self.config.seed,
        )
        if not splits["train"]:
            raise DataError(f"No training scenes in {manifest_path}")
        if params is None:
            params = ModelParams.initialize(self.config.model, self.config.seed)
        elif params.config != self.config.model:
            raise DataError("Initial parameters do not match the configured architecture")

        validation_pairs = []
        if splits["validation"] and self.config.validation_pairs:
            validation_pairs = sample_pairs(
                store,
                splits["validation"],
                self.config.validation_pairs,
                sample_rng(self.config.seed, _VALIDATION_STREAM),
            )

        logger.info(
            f"Training {self.config.model.architecture} generator for {self.config.epochs} "
            f"epochs on {len(splits['train'])} scenes ({store.supervision} supervision)"
        )
        if self.use_mlflow:
            with mlflow.start_run():
                mlflow.log_params(self._loggable_params())
                history = self._run_epochs(params, store, splits, validation_pairs)
                self._create_training_plots(history, out_dir)
        else:
            history = self._run_epochs(params, store, splits, validation_pairs)
            self._create_training_plots(history, out_dir)

        validation = self.evaluate(params, store, validation_pairs)
        return TrainingResult(params=params, history=history, splits=splits, validation=validation)

    def _run_epochs(
        self,
        params: ModelParams,
        store: FrameStore,
        splits: Dict[str, List[int]],
        validation_pairs: List[Tuple[int, int, int]],
    ) -> pd.DataFrame:
        rows = []
        for epoch in range(1, self.config.epochs + 1):
            rng = sample_rng(self.config.seed, epoch)
            pairs = sample_pairs(store, splits["train"], self.config.pairs_per_epoch, rng)
            step_losses = []
            for start in range(0, len(pairs), self.config.batch_size):
                chunk = pairs[start : start + self.config.batch_size]
                keys = [(epoch, start + offset) for offset in range(len(chunk))]
                step_losses.append(self.train_step(params, self.load_batch(store, chunk, keys)))

            train_frame = pd.DataFrame(step_losses)
            row = {"epoch": epoch, "train_loss": float(train_frame["total"].mean())}
            for name in train_frame.columns.drop("total"):
                row[f"train_{name}"] = float(train_frame[name].mean())
            validation = self.evaluate(params, store, validation_pairs)
            row["validation_loss"] = validation.get("total", float("nan"))
            rows.append(row)

            logger.info(
                f"Epoch {epoch}/{self.config.epochs} - train: {row['train_loss']:.5f}, "
                f"validation: {row['validation_loss']:.5f}"
            )
            if self.use_mlflow:
                mlflow.log_metric("train_loss", row["train_loss"], step=epoch)
                if validation:
                    mlflow.log_metric("validation_loss", row["validation_loss"], step=epoch)
        return pd.DataFrame(rows)

    def _loggable_params(self) -> Dict[str, Any]:
        return {
            "architecture": self.config.model.architecture,
            "loss": self.config.loss,
            "learning_rate": self.config.learning_rate,
            "epochs": self.config.epochs,
            "batch_size": self.config.batch_size,
            "known_source_illumination": self.config.known_source_illumination,
            "seed": self.config.seed,
        }

    def _create_training_plots(self, history: pd.DataFrame, out_dir: Optional[PathLike]) -> None:
        """Create and save/log the loss curves."""
        if out_dir is None and not self.use_mlflow:
            return
        try:
            plt.figure(figsize=(8, 5))
            curves = history.melt(
                id_vars="epoch",
                value_vars=[c for c in ("train_loss", "validation_loss") if c in history],
                var_name="split",
                value_name="loss",
            )
            sns.lineplot(data=curves.dropna(), x="epoch", y="loss", hue="split", marker="o")
            plt.title(f"Loss curves - {self.config.model.architecture} ({self.config.loss})")
            plt.grid(True)
            plt.tight_layout()
            if out_dir is not None:
                target = Path(out_dir)
                target.mkdir(parents=True, exist_ok=True)
                plt.savefig(target / "loss_curves.png")
            if self.use_mlflow:
                mlflow.log_figure(plt.gcf(), "loss_curves.png")
            plt.close()
        except Exception as e:
            logger.warning(f"Error creating plots: {e}")

    def save_summary(self, result: TrainingResult, model_path: PathLike) -> Path:
        """Write ``training_summary.json`` next to the model file."""
        target = Path(model_path).with_name("training_summary.json")
        summary = {
            "model": str(model_path),
            "config": self.config.model_dump(mode="json"),
            "splits": result.splits,
            "history": json.loads(result.history.to_json(orient="records")),
            "validation": result.validation,
            "parameters": result.params.num_parameters(),
        }
        target.write_text(json.dumps(summary, indent=2), encoding="utf-8")
        logger.info(f"Saved training summary to {target}")
        return target


def train(
    config: TrainConfig,
    manifest_path: PathLike,
    model_path: Optional[PathLike] = None,
    mlflow_config: Optional[Dict[str, Any]] = None,
) -> TrainingResult:
    """
    Convenience function to train a generator and optionally save it.

    Args:
        config: Training configuration
        manifest_path: Oracle or PMS manifest
        model_path: Where to write the model file and its training summary
        mlflow_config: Optional ``mlflow`` configuration section

    Returns:
        Training result with parameters and loss history
    """
    trainer = ModelTrainer(config, mlflow_config)
    out_dir = Path(model_path).parent if model_path is not None else None
    result = trainer.train(manifest_path, out_dir=out_dir)
    if model_path is not None:
        save_model(
            result.params,
            model_path,
            extra={"train": config.model_dump(mode="json")},
        )
        trainer.save_summary(result, model_path)
    return result
