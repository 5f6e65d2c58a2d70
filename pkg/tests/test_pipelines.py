"""Tests for the orchestration pipelines."""

import copy
import json

import numpy as np
import pandas as pd
import pytest

from src.config import ConfigManager
from src.data_processing import FrameStore, load_manifest
from src.exceptions import DataError
from src.lighting import standard_rig
from src.model import ModelConfig, ModelParams, save_model
from src.pipelines import run_benchmark, run_data_preparation, run_study, run_training_pipeline
from src.pipelines.data_pipeline import generate_oracle_data, pms_thresholds
from src.pipelines.training_pipeline import (
    BASELINE_NAME,
    evaluation_pairs,
    markdown_table,
    score_predictor,
)
from src.synth import generate_dataset

METRICS = ["l1", "l2", "dssim"]


def _pipeline_config(tmp_path, pms_enabled=True):
    return {
        "paths": {
            "dataset_dir": str(tmp_path / "oracle"),
            "pms_dir": str(tmp_path / "pms"),
            "color_stats_file": str(tmp_path / "color_stats.json"),
        },
        "synth": {"n_scenes": 3, "seed": 5, "resolution": 16, "n_lights": 8},
        "splits": {"validation_size": 0.34, "test_size": 0.0, "random_state": 1},
        "pms": {"enabled": pms_enabled, "low": 0.02, "high": 0.98},
        "envrelight": {"patch_size": [8, 8]},
        "runtime": {"threads": 1},
    }


def _training_config():
    return {
        "training": {
            "epochs": 1,
            "batch_size": 2,
            "pairs_per_epoch": 2,
            "validation_pairs": 2,
            "validation_size": 0.34,
            "eval_crop": [32, 32],
            "augmentation": {"crop_size": [32, 32]},
        },
        "model": {"depth": 2, "base_channels": 4},
        "losses": {"metric": "l2"},
        "evaluation": {"metrics": METRICS, "crop": [32, 32], "pairs_per_scene": 2},
        "study": {"losses": ["l1", "l2"], "epochs": 1},
        "mlflow": {"enabled": False},
    }


class TestDataPipeline:
    """Test data preparation."""

    def test_thresholds_ignore_switch(self):
        """Test that the enable switch is not passed to the solver."""
        thresholds = pms_thresholds({"pms": {"enabled": False, "low": 0.1, "high": 0.9}})
        assert (thresholds.low, thresholds.high) == (0.1, 0.9)

    def test_run_data_preparation(self, tmp_path):
        """Test rendering, PMS, splits and the persisted colour statistics."""
        config = _pipeline_config(tmp_path)
        outputs = run_data_preparation(config, regenerate_data=True)

        manifest = load_manifest(outputs["manifest"])
        assert len(manifest.frames) == 3 * 8
        assert outputs["pms_manifest"] is not None
        assert load_manifest(outputs["pms_manifest"]).scene_seeds() == manifest.scene_seeds()

        splits = outputs["splits"]
        assert sorted(splits["train"] + splits["validation"]) == sorted(manifest.scene_seeds())
        assert splits["validation"] and not splits["test"]

        assert isinstance(outputs["frames"], pd.DataFrame)
        assert len(outputs["frames"]) == 24
        assert outputs["color_stats"].shape == (3,)

        stats = json.loads((tmp_path / "color_stats.json").read_text())
        np.testing.assert_allclose(stats["mean_rgb"], outputs["color_stats"])
        assert stats["splits"] == splits

    def test_pms_can_be_disabled(self, tmp_path):
        """Test that the reconstruction step is optional and nothing is persisted."""
        config = _pipeline_config(tmp_path, pms_enabled=False)
        outputs = run_data_preparation(config, persist=False)
        assert outputs["pms_manifest"] is None
        assert not (tmp_path / "pms").exists()
        assert not (tmp_path / "color_stats.json").exists()

    def test_existing_dataset_is_reused(self, tmp_path):
        """Test that the oracle is rendered once unless forced."""
        config = _pipeline_config(tmp_path, pms_enabled=False)
        manifest_path = generate_oracle_data(config)
        marker = manifest_path.stat().st_mtime_ns
        assert generate_oracle_data(config) == manifest_path
        assert manifest_path.stat().st_mtime_ns == marker
        config["synth"]["n_scenes"] = 1
        assert len(load_manifest(generate_oracle_data(config, force=True)).frames) == 8


class TestScoring:
    """Test held-out pair selection and per-pair scoring."""

    def test_pairs_are_fixed(self, wide_manifest):
        """Test that the same seed draws the same pairs."""
        store = FrameStore(wide_manifest)
        scenes = store.manifest.scene_seeds()[:2]
        pairs = evaluation_pairs(store, scenes, 3, seed=7)
        assert len(pairs) == 6
        assert pairs == evaluation_pairs(store, scenes, 3, seed=7)
        assert {scene for scene, _, _ in pairs} <= set(scenes)

    def test_no_scenes(self, wide_manifest):
        """Test that an empty hold-out is rejected."""
        with pytest.raises(DataError):
            evaluation_pairs(FrameStore(wide_manifest), [], 3, seed=7)

    def test_oracle_predictor_scores_zero(self, wide_manifest):
        """Test that returning the target image scores zero on every metric."""
        store = FrameStore(wide_manifest)
        pairs = evaluation_pairs(store, store.manifest.scene_seeds(), 1, seed=0)
        scores = score_predictor(
            lambda scene, source, target: target.image, store, pairs, METRICS, crop=(32, 32)
        )
        assert list(scores.columns) == ["scene_seed", "source", "target", *METRICS]
        assert len(scores) == 4
        np.testing.assert_allclose(scores[METRICS].to_numpy(), 0.0, atol=1e-7)

    def test_markdown_table(self):
        """Test the rendered report table."""
        frame = pd.DataFrame({"l1": [0.5]}, index=pd.Index(["m"], name="method"))
        assert markdown_table(frame) == "| method | l1 |\n|---|---|\n| m | 0.5000 |\n"


class TestBenchmark:
    """Test benchmarking against the diffuse baseline."""

    def test_baseline_and_model(self, wide_manifest, tmp_path):
        """Test the table layout and the written reports."""
        model = save_model(
            ModelParams.initialize(ModelConfig(depth=2, base_channels=4), seed=1),
            tmp_path / "small.rlm",
        )
        table = run_benchmark(
            wide_manifest,
            {"small": model},
            out_dir=tmp_path / "reports",
            metrics=METRICS,
            crop=(32, 32),
            pairs_per_scene=2,
        )
        assert list(table.index) == [BASELINE_NAME, "small"]
        assert list(table.columns) == METRICS
        assert np.isfinite(table.to_numpy()).all()
        assert (table.to_numpy() >= 0).all()
        for name in ("benchmark.csv", "benchmark.md", "benchmark.json"):
            assert (tmp_path / "reports" / name).exists()
        summary = json.loads((tmp_path / "reports" / "benchmark.json").read_text())
        assert summary["pairs"] == 8
        assert summary["architectures"]["small"]["depth"] == 2

    def test_nothing_to_benchmark(self, wide_manifest):
        """Test that an empty method list is rejected."""
        with pytest.raises(DataError):
            run_benchmark(wide_manifest, {}, include_baseline=False, metrics=METRICS)


@pytest.mark.slow
class TestTrainingPipelines:
    """Test training and the loss-selection study end to end."""

    def test_training_pipeline(self, wide_manifest, tmp_path):
        """Test a short run with an override and the written artefacts."""
        outputs = run_training_pipeline(
            _training_config(),
            manifest_path=wide_manifest,
            model_path=tmp_path / "generator.rlm",
            overrides={"seed": 3},
        )
        assert outputs["config"].seed == 3
        assert outputs["model_artifact_path"].exists()
        assert outputs["summary_path"].exists()
        assert np.isfinite(outputs["final_epoch"]["train_loss"])

    def test_study_grid(self, wide_manifest, tmp_path):
        """Test one row per training loss and one column per metric."""
        grid = run_study(_training_config(), manifest_path=wide_manifest, out_dir=tmp_path)
        assert list(grid.index) == ["l1", "l2"]
        assert grid.index.name == "train_loss"
        assert list(grid.columns) == METRICS
        assert np.isfinite(grid.to_numpy()).all()
        assert (tmp_path / "models" / "l1.rlm").exists()
        assert (tmp_path / "study.md").exists()
        assert (tmp_path / "study_heatmap.png").exists()


def _quality_config(epochs):
    config = _training_config()
    config["training"].update(
        {"epochs": epochs, "pairs_per_epoch": 8, "learning_rate": 2e-3, "validation_pairs": 0}
    )
    config["evaluation"].update({"metrics": ["dssim", "l1"], "pairs_per_scene": 4})
    return config


@pytest.mark.slow
class TestRelativeQuality:
    """Test the direction of the loss study and of training on held-out frames, scaled down."""

    def test_dssim_training_wins_under_dssim(self, wide_manifest, tmp_path):
        """Test that the DSSIM-trained model is best or tied-best under DSSIM."""
        grid = run_study(
            _quality_config(epochs=8),
            manifest_path=wide_manifest,
            out_dir=tmp_path,
            eval_manifest=wide_manifest,
            losses=["l1", "l2", "dssim"],
            metrics=["dssim"],
        )
        assert list(grid.index) == ["l1", "l2", "dssim"]
        assert grid.loc["dssim", "dssim"] <= 1.1 * grid["dssim"].min()

    def test_training_improves_held_out_frames(self, wide_manifest, tmp_path_factory, tmp_path):
        """Test known- and unknown-source models against their initialization and the baseline."""
        held_out = generate_dataset(
            2, standard_rig(8), tmp_path_factory.mktemp("held_out"), seed=100, resolution=48
        )
        config = _quality_config(epochs=15)
        untrained = save_model(
            ModelParams.initialize(ModelConfig(depth=2, base_channels=4), seed=42),
            tmp_path / "untrained.rlm",
        )
        known = run_training_pipeline(
            config, manifest_path=wide_manifest, model_path=tmp_path / "known.rlm"
        )
        unknown = run_training_pipeline(
            config,
            manifest_path=wide_manifest,
            model_path=tmp_path / "unknown.rlm",
            overrides={"known_source_illumination": False},
        )
        models = {
            "untrained": untrained,
            "known": known["model_artifact_path"],
            "unknown": unknown["model_artifact_path"],
        }
        table = run_benchmark(
            held_out, models, metrics=["dssim", "l1"], crop=(32, 32), pairs_per_scene=4
        )
        assert list(table.index) == [BASELINE_NAME, "untrained", "known", "unknown"]
        assert np.isfinite(table.to_numpy()).all()
        assert table.loc["known", "l1"] < table.loc["untrained", "l1"]
        assert table.loc["unknown", "l1"] < table.loc["untrained", "l1"]
        assert table.loc["known", "dssim"] < table.loc["untrained", "dssim"]


@pytest.mark.acceptance
class TestFullScaleQuality:
    """Test the relative-quality claims at full scale: 16 training and 4 held-out scenes."""

    @pytest.fixture(scope="class")
    def datasets(self, tmp_path_factory):
        rig = standard_rig(32)
        train_manifest = generate_dataset(
            16, rig, tmp_path_factory.mktemp("train_full"), seed=0, resolution=128
        )
        held_out = generate_dataset(
            4, rig, tmp_path_factory.mktemp("held_out_full"), seed=1000, resolution=128
        )
        return train_manifest, held_out

    @pytest.fixture(scope="class")
    def full_config(self):
        config = copy.deepcopy(ConfigManager().get_training_config())
        config["mlflow"] = {"enabled": False}
        config["training"]["epochs"] = 30
        return config

    def test_structured_model_beats_diffuse_baseline(self, datasets, full_config, tmp_path):
        """Test a 20% DSSIM gain over the baseline and the place of the unknown-source model."""
        train_manifest, held_out = datasets
        known = run_training_pipeline(
            full_config, manifest_path=train_manifest, model_path=tmp_path / "known.rlm"
        )
        unknown = run_training_pipeline(
            full_config,
            manifest_path=train_manifest,
            model_path=tmp_path / "unknown.rlm",
            overrides={"known_source_illumination": False},
        )
        table = run_benchmark(
            held_out,
            {"known": known["model_artifact_path"], "unknown": unknown["model_artifact_path"]},
            metrics=["dssim"],
            crop=(128, 128),
        )
        baseline = table.loc[BASELINE_NAME, "dssim"]
        with_source, without_source = table.loc["known", "dssim"], table.loc["unknown", "dssim"]
        assert with_source <= 0.8 * baseline
        between = min(with_source, baseline) <= without_source <= max(with_source, baseline)
        assert between or abs(without_source - with_source) <= 0.1 * with_source

    def test_dssim_training_best_in_study(self, datasets, full_config, tmp_path):
        """Test the study grid over every training loss on the held-out scenes."""
        train_manifest, held_out = datasets
        grid = run_study(
            full_config,
            manifest_path=train_manifest,
            out_dir=tmp_path,
            eval_manifest=held_out,
            losses=["l1", "l2", "dssim", "msdssim"],
            metrics=["dssim"],
        )
        assert grid.loc["dssim", "dssim"] <= 1.05 * grid["dssim"].min()
