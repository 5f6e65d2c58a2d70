"""Training, loss-selection study and benchmark orchestration."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib.pyplot as plt
import mlflow
import pandas as pd
import seaborn as sns

from ..augment import sample_rng
from ..config import ConfigManager
from ..data_processing import FrameStore, sample_pairs
from ..exceptions import DataError
from ..formation import IntrinsicSet
from ..image_io import RasterImage, center_crop
from ..inference import DiffuseBaselineRelighter, GeneratorRelighter
from ..metrics import METRICS, canonical_metric, evaluate
from ..model import read_model_header
from ..pms import PMSThresholds, solve_image
from ..train import TrainConfig
from ..train import train as train_model
from .data_pipeline import run_data_preparation

logger = logging.getLogger(__name__)

Pair = Tuple[int, int, int]
Predictor = Callable[[int, IntrinsicSet, IntrinsicSet], RasterImage]

_EVALUATION_STREAM = 104729
BASELINE_NAME = "pms_diffuse"


def load_training_config(config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Load the training configuration when it is not provided explicitly."""
    if config is not None:
        return config
    return ConfigManager().get_training_config()


def run_training_pipeline(
    config: Optional[Dict[str, Any]] = None,
    *,
    manifest_path: Optional[Path] = None,
    model_path: Optional[Path] = None,
    save_model: bool = True,
    overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Train one generator and return artefact metadata.

    Args:
        config: Training configuration mapping; loaded from ``configs/`` when omitted
        manifest_path: Training manifest; the data pipeline runs when omitted
        model_path: Output model file (defaults to ``<models.output_dir>/generator.rlm``)
        save_model: Write the model file and its training summary
        overrides: Field overrides applied on top of the ``training`` section

    Returns:
        Dictionary containing the training result and artefact paths
    """
    cfg = load_training_config(config)
    train_config = TrainConfig.from_sections(cfg)
    if overrides:
        train_config = TrainConfig.model_validate(
            {**train_config.model_dump(), **overrides}
        )

    if manifest_path is None:
        manifest_path = run_data_preparation()["manifest"]

    if save_model and model_path is None:
        output_dir = Path(cfg.get("models", {}).get("output_dir", "models"))
        model_path = output_dir / "generator.rlm"

    result = train_model(
        train_config,
        manifest_path,
        model_path if save_model else None,
        mlflow_config=cfg.get("mlflow"),
    )
    final = result.history.iloc[-1].to_dict() if len(result.history) else {}
    artifact = Path(model_path) if save_model else None
    return {
        "result": result,
        "config": train_config,
        "final_epoch": final,
        "model_artifact_path": artifact,
        "summary_path": artifact.with_name("training_summary.json") if artifact else None,
    }


# ----------------------------------------------------------------------------
# Scoring


def evaluation_pairs(
    store: FrameStore, scene_seeds: Sequence[int], pairs_per_scene: int, seed: int
) -> List[Pair]:
    """Fixed relighting pairs on held-out scenes, independent of the models scored."""
    if not scene_seeds:
        raise DataError("No held-out scenes to evaluate on")
    rng = sample_rng(seed, _EVALUATION_STREAM)
    return sample_pairs(store, sorted(scene_seeds), pairs_per_scene * len(scene_seeds), rng)


def _crop_frame(frame: IntrinsicSet, crop: Optional[Tuple[int, int]]) -> IntrinsicSet:
    if crop is None:
        return frame
    width, height = min(crop[0], frame.width), min(crop[1], frame.height)
    return frame.map_rasters(lambda image: center_crop(image, width, height))


def score_predictor(
    predict: Predictor,
    store: FrameStore,
    pairs: Sequence[Pair],
    metrics: Sequence[str] = METRICS,
    crop: Optional[Tuple[int, int]] = (128, 128),
) -> pd.DataFrame:
    """
    Score one relighting method on center-cropped pairs.

    Args:
        predict: ``(scene, source, target) -> prediction`` on cropped frames
        store: Frame store of the evaluation manifest
        pairs: (scene, source light, target light) triples
        metrics: Metric names
        crop: Center crop (width, height); full frames when ``None``

    Returns:
        One row per pair with one column per metric
    """
    names = [canonical_metric(name) for name in metrics]
    rows = []
    for scene, src, dst in pairs:
        source = _crop_frame(store.load_frame(scene, src), crop)
        target = _crop_frame(store.load_frame(scene, dst), crop)
        prediction = predict(scene, source, target).clamp()
        reference = target.image.clamp()
        row = {"scene_seed": scene, "source": src, "target": dst}
        row.update({name: evaluate(name, prediction, reference) for name in names})
        rows.append(row)
    return pd.DataFrame(rows)


def generator_predictor(model_path: Path) -> Predictor:
    relighter = GeneratorRelighter.from_file(model_path)

    def predict(scene: int, source: IntrinsicSet, target: IntrinsicSet) -> RasterImage:
        return relighter.relight(source.image, target.light, source.light, clamp=False)

    return predict


def pms_baseline_predictor(
    store: FrameStore,
    scene_seeds: Sequence[int],
    crop: Optional[Tuple[int, int]],
    thresholds: Optional[PMSThresholds] = None,
    n_jobs: int = 1,
) -> Predictor:
    """Diffuse re-rendering of PMS albedo and normals solved from each scene's full stack."""
    baselines: Dict[int, DiffuseBaselineRelighter] = {}
    for scene in sorted(set(scene_seeds)):
        light_ids = store.light_ids(scene)
        images = [store.load_image(scene, light_id) for light_id in light_ids]
        lights = store.lights.subset(light_ids)
        albedo, normals, _ = solve_image(images, lights, thresholds, n_jobs)
        if crop is not None:
            width, height = min(crop[0], albedo.width), min(crop[1], albedo.height)
            albedo = center_crop(albedo, width, height)
            normals = center_crop(normals, width, height)
        baselines[scene] = DiffuseBaselineRelighter(albedo, normals)

    def predict(scene: int, source: IntrinsicSet, target: IntrinsicSet) -> RasterImage:
        return baselines[scene].relight(source.image, target.light, clamp=False)

    return predict


# ----------------------------------------------------------------------------
# Reports


def markdown_table(frame: pd.DataFrame, float_format: str = "{:.4f}") -> str:
    """Render a frame (index included) as a GitHub markdown table."""
    header = [frame.index.name or ""] + [str(column) for column in frame.columns]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for label, row in frame.iterrows():
        cells = [float_format.format(value) for value in row.to_numpy(dtype=float)]
        lines.append("| " + " | ".join([str(label)] + cells) + " |")
    return "\n".join(lines) + "\n"


def write_table(frame: pd.DataFrame, out_dir: Path, stem: str) -> Dict[str, Path]:
    """Write ``<stem>.csv`` and ``<stem>.md``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.md"
    frame.to_csv(csv_path, float_format="%.6f")
    md_path.write_text(markdown_table(frame), encoding="utf-8")
    logger.info(f"Wrote {csv_path} and {md_path}")
    return {"csv": csv_path, "markdown": md_path}


def _plot_study(grid: pd.DataFrame, path: Path) -> Optional[Path]:
    try:
        plt.figure(figsize=(6, 4.5))
        sns.heatmap(grid, annot=True, fmt=".4f", cmap="viridis_r")
        plt.title("Evaluation metric by training loss")
        plt.ylabel("training loss")
        plt.xlabel("evaluation metric")
        plt.tight_layout()
        plt.savefig(path)
        plt.close()
        return path
    except Exception as e:
        logger.warning(f"Error creating study heatmap: {e}")
        return None


# ----------------------------------------------------------------------------
# Study and benchmark


def run_study(
    config: Optional[Dict[str, Any]] = None,
    *,
    manifest_path: Path,
    out_dir: Path,
    eval_manifest: Optional[Path] = None,
    losses: Optional[Sequence[str]] = None,
    metrics: Optional[Sequence[str]] = None,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """
    Train one generator per loss and score each with every metric.

    Held-out scenes come from ``eval_manifest`` when given; otherwise the
    ``evaluation.test_size`` fraction of scenes is kept out of training.

    Returns:
        Grid with training losses as rows and evaluation metrics as columns
    """
    cfg = load_training_config(config)
    study_cfg, eval_cfg = cfg.get("study", {}), cfg.get("evaluation", {})
    losses = [canonical_metric(name) for name in (losses or study_cfg.get("losses", METRICS))]
    metrics = [canonical_metric(name) for name in (metrics or eval_cfg.get("metrics", METRICS))]
    crop = tuple(eval_cfg["crop"]) if eval_cfg.get("crop") else None
    out_dir = Path(out_dir)

    base = TrainConfig.from_sections(cfg)
    updates: Dict[str, Any] = {"n_jobs": n_jobs}
    if epochs or study_cfg.get("epochs"):
        updates["epochs"] = epochs or study_cfg["epochs"]
    if seed is not None:
        updates["seed"] = seed
    if eval_manifest is None:
        updates["test_size"] = max(base.test_size, eval_cfg.get("test_size", 0.25))

    rows, held_out = {}, None
    for loss in losses:
        train_config = TrainConfig.model_validate({**base.model_dump(), **updates, "loss": loss})
        model_path = out_dir / "models" / f"{loss}.rlm"
        logger.info(f"Study: training with {loss} loss")
        result = train_model(train_config, manifest_path, model_path)

        if held_out is None:
            store = FrameStore(eval_manifest or manifest_path)
            scenes = store.manifest.scene_seeds() if eval_manifest else result.splits["test"]
            pairs = evaluation_pairs(
                store, scenes, eval_cfg.get("pairs_per_scene", 8), train_config.seed
            )
            held_out = (store, pairs)
        store, pairs = held_out
        scores = score_predictor(generator_predictor(model_path), store, pairs, metrics, crop)
        rows[loss] = scores[metrics].mean()

    grid = pd.DataFrame(rows).T.reindex(columns=metrics)
    grid.index.name = "train_loss"
    write_table(grid, out_dir, "study")
    heatmap = _plot_study(grid, out_dir / "study_heatmap.png")

    mlflow_cfg = cfg.get("mlflow", {})
    if mlflow_cfg.get("enabled", False):
        mlflow.set_tracking_uri(mlflow_cfg.get("tracking_uri", "file:./mlruns"))
        mlflow.set_experiment(mlflow_cfg.get("experiment_name", "relighting"))
        with mlflow.start_run(run_name="loss-study"):
            for loss, row in grid.iterrows():
                mlflow.log_metrics({f"{loss}_{metric}": float(row[metric]) for metric in metrics})
            if heatmap is not None:
                mlflow.log_artifact(str(heatmap))
    return grid


def run_benchmark(
    manifest_path: Path,
    models: Mapping[str, Path],
    *,
    out_dir: Optional[Path] = None,
    metrics: Sequence[str] = METRICS,
    crop: Optional[Tuple[int, int]] = (128, 128),
    pairs_per_scene: int = 8,
    seed: int = 42,
    include_baseline: bool = True,
    thresholds: Optional[PMSThresholds] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """
    Score the PMS diffuse baseline and trained generators on held-out scenes.

    Args:
        manifest_path: Manifest of scenes none of the models were trained on
        models: Display name -> model file
        out_dir: Where ``benchmark.csv``/``benchmark.md`` go; nothing is written when ``None``
        metrics: Metric names (columns)
        crop: Center crop applied to every frame
        pairs_per_scene: Relighting pairs drawn per scene
        seed: Seed of the pair draw
        include_baseline: Add the PMS diffuse baseline row
        thresholds: PMS thresholds of the baseline
        n_jobs: Worker threads of the baseline solve

    Returns:
        Methods as rows and mean metric values as columns
    """
    metrics = [canonical_metric(name) for name in metrics]
    store = FrameStore(manifest_path)
    scenes = store.manifest.scene_seeds()
    pairs = evaluation_pairs(store, scenes, pairs_per_scene, seed)

    predictors: Dict[str, Predictor] = {}
    if include_baseline:
        predictors[BASELINE_NAME] = pms_baseline_predictor(store, scenes, crop, thresholds, n_jobs)
    for name, path in models.items():
        predictors[name] = generator_predictor(Path(path))
    if not predictors:
        raise DataError("Nothing to benchmark: no models and no baseline")

    rows = {}
    for name, predict in predictors.items():
        scores = score_predictor(predict, store, pairs, metrics, crop)
        rows[name] = scores[metrics].mean()
        logger.info(
            f"Benchmark {name}: "
            + ", ".join(f"{metric}={rows[name][metric]:.4f}" for metric in metrics)
        )

    table = pd.DataFrame(rows).T.reindex(columns=metrics)
    table.index.name = "method"
    if out_dir is not None:
        write_table(table, Path(out_dir), "benchmark")
        summary = {
            "manifest": str(manifest_path),
            "scenes": scenes,
            "pairs": len(pairs),
            "models": {name: str(path) for name, path in models.items()},
            "architectures": {
                name: read_model_header(path)["config"] for name, path in models.items()
            },
        }
        (Path(out_dir) / "benchmark.json").write_text(json.dumps(summary, indent=2))
    return table
