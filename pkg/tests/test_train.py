"""Tests for losses, optimizer steps and the training loop."""

import json

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from src import autodiff as ad
from src.augment import AugmentationConfig
from src.data_processing import FrameStore
from src.exceptions import NumericalError
from src.lighting import standard_rig
from src.model import Generator, GeneratorOutputs, ModelConfig, ModelParams, load_model
from src.synth import generate_dataset
from src.train import (
    TARGETS,
    ModelTrainer,
    TrainConfig,
    adam_update,
    compute_losses,
    make_batch,
    train,
)

SMALL_MODEL = {"depth": 2, "base_channels": 4}


@pytest.fixture
def config():
    return TrainConfig(
        loss="l2",
        epochs=2,
        batch_size=2,
        pairs_per_epoch=4,
        validation_pairs=2,
        validation_size=0.34,
        augmentation=AugmentationConfig(crop_size=(16, 16)),
        eval_crop=(16, 16),
        model=ModelConfig(**SMALL_MODEL),
    )


class TestTrainConfig:
    """Test training configuration handling."""

    def test_missing_weights_default_to_zero(self):
        """Test that unlisted targets are switched off."""
        config = TrainConfig(loss_weights={"image": 2.0})
        assert config.loss_weights["image"] == 2.0
        assert config.loss_weights["albedo"] == 0.0
        assert set(config.loss_weights) == set(TARGETS)

    def test_image_weight_must_be_positive(self):
        """Test that the final image always contributes."""
        with pytest.raises(ValidationError):
            TrainConfig(loss_weights={"image": 0.0, "albedo": 1.0})

    def test_unknown_target(self):
        """Test rejection of unknown loss targets."""
        with pytest.raises(ValidationError):
            TrainConfig(loss_weights={"specular": 1.0, "image": 1.0})

    def test_metric_for(self):
        """Test per-target metrics and the normals exception."""
        config = TrainConfig(loss="msssim", loss_overrides={"albedo": "l1"})
        assert config.metric_for("image") == "msdssim"
        assert config.metric_for("albedo") == "l1"
        assert config.metric_for("normals") == "l2"

    def test_source_flag_reaches_model(self):
        """Test that the known-source switch is mirrored into the architecture."""
        config = TrainConfig(known_source_illumination=False)
        assert config.model.known_source_illumination is False

    def test_from_sections(self):
        """Test building from the nested configuration layout."""
        config = TrainConfig.from_sections(
            {
                "training": {"epochs": 3, "learning_rate": 1e-3},
                "losses": {"metric": "l1", "weights": {"image": 1.0, "albedo": 0.5}},
                "model": {"architecture": "direct", **SMALL_MODEL},
            }
        )
        assert config.epochs == 3
        assert config.loss == "l1"
        assert config.loss_weights["albedo"] == 0.5
        assert config.model.architecture == "direct"


class TestLosses:
    """Test batch assembly, losses and Adam."""

    def test_make_batch(self, oracle_manifest):
        """Test channel-first stacking of pairs and their lights."""
        store = FrameStore(oracle_manifest)
        pairs = [(store.load_frame(0, 0), store.load_frame(0, 3))] * 2
        batch = make_batch(pairs)
        assert len(batch) == 2
        assert batch.image.shape == (2, 3, 32, 32)
        assert batch.targets["visibility"].shape == (2, 1, 32, 32)
        np.testing.assert_allclose(batch.l_dst.directions[0], store.lights[3].direction)
        target = pairs[0][1]
        np.testing.assert_allclose(
            batch.targets["diffuse"][0],
            target.albedo.to_chw() * target.shading.to_chw(),
            rtol=1e-6,
        )

    def test_perfect_prediction_has_zero_loss(self):
        """Test that matching every target gives a zero total."""
        rng = np.random.default_rng(0)
        targets = {name: rng.uniform(0.1, 0.9, (1, 3, 12, 12)) for name in TARGETS}
        targets["visibility"] = np.ones((1, 1, 12, 12))
        outputs = GeneratorOutputs(**{name: ad.constant(targets[name]) for name in TARGETS})
        total, values = compute_losses(outputs, targets, TrainConfig(loss="dssim"))
        assert total.item() == pytest.approx(0.0, abs=1e-12)
        assert set(values) == set(TARGETS)

    def test_missing_outputs_are_skipped(self):
        """Test that the direct architecture is scored on the image only."""
        targets = {name: np.full((1, 3, 4, 4), 0.5) for name in TARGETS}
        outputs = GeneratorOutputs(image=ad.constant(np.full((1, 3, 4, 4), 0.25)))
        total, values = compute_losses(outputs, targets, TrainConfig(loss="l1"))
        assert list(values) == ["image"]
        assert total.item() == pytest.approx(0.25)

    def test_pixel_losses_see_out_of_range_values(self):
        """Test that L1 penalizes overshoot above 1 while DSSIM clamps it away."""
        targets = {name: np.ones((1, 3, 16, 16)) for name in TARGETS}
        outputs = GeneratorOutputs(image=ad.constant(np.full((1, 3, 16, 16), 1.5)))
        l1_total, _ = compute_losses(outputs, targets, TrainConfig(loss="l1"))
        dssim_total, _ = compute_losses(outputs, targets, TrainConfig(loss="dssim"))
        assert l1_total.item() == pytest.approx(0.5)
        assert dssim_total.item() == pytest.approx(0.0, abs=1e-9)

    def test_weights_scale_terms(self):
        """Test that per-target weights multiply their loss."""
        targets = {name: np.full((1, 3, 4, 4), 0.5) for name in TARGETS}
        outputs = GeneratorOutputs(
            image=ad.constant(np.full((1, 3, 4, 4), 0.25)),
            albedo=ad.constant(np.full((1, 3, 4, 4), 0.75)),
        )
        config = TrainConfig(loss="l1", loss_weights={"image": 1.0, "albedo": 3.0})
        total, _ = compute_losses(outputs, targets, config)
        assert total.item() == pytest.approx(0.25 + 3.0 * 0.25)

    def test_adam_first_step(self):
        """Test that the first bias-corrected step moves each weight by about lr."""
        params = ModelParams.initialize(ModelConfig(**SMALL_MODEL))
        before = {name: value.copy() for name, value in params.weights.items()}
        rng = np.random.default_rng(1)
        grads = {name: rng.normal(size=value.shape) for name, value in params.weights.items()}
        config = TrainConfig(learning_rate=1e-3)
        adam_update(params, grads, config)
        assert params.step == 1
        name = "stage1.enc0.weight"
        step = before[name] - params.weights[name]
        np.testing.assert_allclose(step, 1e-3 * np.sign(grads[name]), rtol=1e-3, atol=1e-7)


class TestTrainer:
    """Test the training loop on the shared fixture dataset."""

    def test_train_step_updates_parameters(self, config, oracle_manifest):
        """Test one optimization step on a loaded batch."""
        trainer = ModelTrainer(config)
        store = FrameStore(oracle_manifest)
        batch = trainer.load_batch(store, [(0, 0, 1), (1, 2, 5)], [(0, 0), (0, 1)])
        assert batch.image.shape == (2, 3, 16, 16)
        params = ModelParams.initialize(config.model)
        before = params.weights["stage2.residual.out.weight"].copy()
        losses = trainer.train_step(params, batch)
        assert np.isfinite(losses["total"])
        assert params.step == 1
        assert not np.array_equal(before, params.weights["stage2.residual.out.weight"])

    def test_non_finite_loss_raises(self, config, oracle_manifest):
        """Test that NaN parameters abort training."""
        trainer = ModelTrainer(config)
        batch = trainer.load_batch(FrameStore(oracle_manifest), [(0, 0, 1)])
        params = ModelParams.initialize(config.model)
        params.weights["stage1.enc0.bias"][:] = np.nan
        with pytest.raises(NumericalError):
            trainer.train_step(params, batch)

    def test_augmented_batches_are_reproducible(self, config, oracle_manifest):
        """Test that the per-pair RNG keys fix the augmentation."""
        trainer = ModelTrainer(config)
        store = FrameStore(oracle_manifest)
        a = trainer.load_batch(store, [(2, 1, 4)], [(1, 0)])
        b = trainer.load_batch(store, [(2, 1, 4)], [(1, 0)])
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.l_dst.directions, b.l_dst.directions)

    @pytest.mark.slow
    def test_train_and_save(self, config, oracle_manifest, tmp_path):
        """Test a short run end to end, including the written artifacts."""
        model_path = tmp_path / "models" / "relight.bin"
        result = train(config, oracle_manifest, model_path)

        assert list(result.history["epoch"]) == [1, 2]
        assert np.all(np.isfinite(result.history["train_loss"]))
        assert result.params.step == 4
        assert result.splits["validation"]
        assert not set(result.splits["train"]) & set(result.splits["validation"])
        assert np.isfinite(result.validation["total"])

        loaded = load_model(model_path)
        np.testing.assert_array_equal(
            loaded.weights["stage1.enc0.weight"], result.params.weights["stage1.enc0.weight"]
        )
        summary = json.loads((model_path.parent / "training_summary.json").read_text())
        assert summary["splits"] == result.splits
        assert len(summary["history"]) == 2
        assert (model_path.parent / "loss_curves.png").exists()

    def test_image_only_weights_reach_stage1(self, oracle_manifest):
        """Test that the final-image loss alone still trains the intrinsic stage."""
        config = TrainConfig(
            loss="l1", loss_weights={"image": 1.0}, model=ModelConfig(**SMALL_MODEL)
        )
        trainer = ModelTrainer(config)
        batch = trainer.load_batch(FrameStore(oracle_manifest), [(0, 0, 1), (1, 2, 5)])
        generator = Generator(ModelParams.initialize(config.model), trainable=True)
        total, values = compute_losses(trainer.forward(generator, batch), batch.targets, config)
        assert list(values) == ["image"]
        total.backward()
        grads = generator.gradients()
        stage1 = [name for name in grads if name.startswith("stage1.")]
        assert stage1
        for name in ("stage1.enc0.weight", "stage1.albedo.out.weight", "stage1.normals.out.weight"):
            assert np.all(np.isfinite(grads[name]))
            assert np.abs(grads[name]).max() > 0

    @pytest.mark.slow
    def test_loss_decreases_on_tiny_dataset(self, tmp_path_factory):
        """Test that the last epoch ends below the first on a one-scene, two-light set."""
        manifest = generate_dataset(
            1, standard_rig(2), tmp_path_factory.mktemp("tiny"), seed=3, resolution=16
        )
        config = TrainConfig(
            loss="l2",
            learning_rate=3e-3,
            epochs=12,
            batch_size=2,
            pairs_per_epoch=4,
            validation_pairs=0,
            validation_size=0.0,
            augmentation=AugmentationConfig(
                flip=False, scale=False, jitter_sigma=0.0, crop_size=None
            ),
            model=ModelConfig(**SMALL_MODEL),
        )
        history = train(config, manifest).history
        assert len(history) == 12
        assert history["train_loss"].iloc[-1] < history["train_loss"].iloc[0]
        assert history["train_image"].iloc[-1] < history["train_image"].iloc[0]

    @pytest.mark.slow
    def test_same_seed_is_reproducible(self, config, oracle_manifest):
        """Test that two deterministic runs with one seed give identical histories."""
        config = config.model_copy(update={"n_jobs": 1, "seed": 11})
        first, second = train(config, oracle_manifest), train(config, oracle_manifest)
        pd.testing.assert_frame_equal(first.history, second.history)
        np.testing.assert_array_equal(
            first.params.weights["stage2.residual.out.weight"],
            second.params.weights["stage2.residual.out.weight"],
        )
