"""Tests for the finite-difference gradient audit."""

import numpy as np
import pytest

from src import autodiff as ad
from src.exceptions import DataError
from src.gradcheck import (
    GradCheckFailure,
    GradCheckReport,
    check_gradients,
    check_ops,
    grad_check,
    op_cases,
    relative_error,
)
from src.model import ModelConfig


def _half_gradient_square(x):
    """x**2 with a backward pass that forgets the factor 2."""

    def backward(g):
        x.accumulate(g * x.data)

    return ad.Tensor(x.data**2, requires_grad=True, parents=(x,), backward=backward)


class TestRelativeError:
    """Test the error measure."""

    def test_scaled_by_larger_magnitude(self):
        """Test normalization by the larger of both values."""
        assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)

    def test_floor_for_tiny_gradients(self):
        """Test that near-zero gradients are compared against the floor."""
        assert relative_error(1e-9, 2e-9) == pytest.approx(1e-9 / 1e-4)


class TestCheckGradients:
    """Test the generic checker."""

    def test_detects_wrong_backward(self):
        """Test that an incorrect derivative is reported."""
        report = check_gradients(
            "broken",
            lambda leaves: ad.project(_half_gradient_square(leaves["x"]), np.ones(4)),
            {"x": np.array([0.5, -1.0, 2.0, 1.5])},
            np.random.default_rng(0),
        )
        assert not report.passed
        assert len(report.failures) == 4
        assert report.failures[0].relative_error == pytest.approx(0.5, rel=1e-4)
        assert "FAIL" in report.summary()
        assert len(report.to_frame()) == 4

    def test_kink_is_skipped(self):
        """Test that samples on a ReLU kink are not scored."""
        report = check_gradients(
            "kink",
            lambda leaves: ad.project(ad.leaky_relu(leaves["x"], 0.0), np.ones(2)),
            {"x": np.array([0.0, 1.0])},
            np.random.default_rng(0),
        )
        assert report.passed
        assert (report.checked, report.skipped) == (1, 1)

    def test_masks_limit_sampling(self):
        """Test that masked-out elements are never sampled."""
        report = check_gradients(
            "masked",
            lambda leaves: ad.project(ad.tanh(leaves["x"]), np.ones(6)),
            {"x": np.linspace(-1.0, 1.0, 6)},
            np.random.default_rng(0),
            masks={"x": np.array([True, False, False, True, False, False])},
        )
        assert report.checked == 2

    def test_scalar_objective_required(self):
        """Test that vector objectives are rejected."""
        with pytest.raises(DataError):
            check_gradients(
                "vector", lambda leaves: leaves["x"], {"x": np.ones(3)}, np.random.default_rng(0)
            )

    def test_report_merge(self):
        """Test combining reports."""
        failure = GradCheckFailure("w", (0,), 1.0, 2.0, 0.5)
        a = GradCheckReport("a", 1e-6, checked=3, max_relative_error=1e-8)
        b = GradCheckReport("b", 1e-6, checked=2, skipped=1, failures=[failure])
        merged = a.merge(b)
        assert (merged.checked, merged.skipped) == (5, 1)
        assert merged.max_relative_error == 1e-8
        assert not merged.passed


class TestOperations:
    """Test every differentiable operation against central differences."""

    def test_all_cases_listed(self):
        """Test that the audit covers the structured layers and every loss."""
        cases = op_cases(np.random.default_rng(0))
        for name in ("conv2d", "conv2d_grouped", "shading", "compose", "loss_msdssim"):
            assert name in cases

    def test_ops_pass(self):
        """Test that every operation agrees to 1e-6."""
        reports = check_ops(tolerance=1e-6, seed=0, samples=8)
        failed = {name: r.summary() for name, r in reports.items() if not r.passed}
        assert not failed
        assert all(r.checked > 0 for r in reports.values())

    def test_unknown_operation(self):
        """Test name validation."""
        with pytest.raises(DataError):
            check_ops(names=["fft"])


class TestGeneratorGradients:
    """Test gradients through the whole generator."""

    SMALL = ModelConfig(depth=2, base_channels=4)

    def test_stage1(self):
        """Test the stage-1 fragment on a small input."""
        report = grad_check("stage1", size=16, model_config=self.SMALL)
        assert report.passed, report.summary()
        assert report.checked > 0

    @pytest.mark.slow
    @pytest.mark.parametrize("metric", ["l2", "dssim"])
    def test_full(self, metric):
        """Test the full structured graph with two image metrics."""
        report = grad_check("full", metric=metric, size=16, model_config=self.SMALL)
        assert report.passed, report.summary()

    def test_ops_fragment_merges_reports(self):
        """Test the per-operation fragment."""
        report = grad_check("ops", tolerance=1e-6)
        assert report.name == "ops"
        assert report.passed, report.summary()

    def test_unknown_fragment(self):
        """Test fragment validation."""
        with pytest.raises(DataError):
            grad_check("stage3", size=16, model_config=self.SMALL)
