"""
Finite-difference audit of the autodiff operations and the generator graph.

Checks run in float64 with central differences. A sample whose one-sided
differences disagree is straddling a kink (ReLU, clamp, shading cut-off or
an L1 tie) and is reported as skipped instead of failed. Samples that miss
the tolerance are re-measured once with a ten times smaller step.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DataError
from .model import Generator, GeneratorOutputs, LightBatch, ModelConfig, ModelParams
from .train import TARGETS, TrainConfig, compute_losses

logger = logging.getLogger(__name__)

Objective = Callable[[Dict[str, Tensor]], Tensor]

DEFAULT_STEP = 1e-5
DEFAULT_FLOOR = 1e-4
KINK_RATIO = 1e-2
SHADING_MARGIN = 1e-4
REFINE_FACTOR = 0.1


@dataclass
class GradCheckFailure:
    tensor: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    relative_error: float


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference audit."""

    name: str
    tolerance: float
    checked: int = 0
    skipped: int = 0
    max_relative_error: float = 0.0
    failures: List[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def merge(self, other: "GradCheckReport") -> "GradCheckReport":
        return GradCheckReport(
            name=self.name,
            tolerance=self.tolerance,
            checked=self.checked + other.checked,
            skipped=self.skipped + other.skipped,
            max_relative_error=max(self.max_relative_error, other.max_relative_error),
            failures=self.failures + other.failures,
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(failure) for failure in self.failures])

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: {self.checked} checked, {self.skipped} skipped, "
            f"max relative error {self.max_relative_error:.3e} (tolerance {self.tolerance:g})"
        )


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    name: str,
    objective: Objective,
    inputs: Dict[str, np.ndarray],
    rng: np.random.Generator,
    tolerance: float = 1e-6,
    samples: int = 16,
    step: float = DEFAULT_STEP,
    masks: Optional[Dict[str, np.ndarray]] = None,
) -> GradCheckReport:
    """
    Compare backpropagated gradients of a scalar objective with central differences.

    Args:
        name: Label of the check in the report
        objective: Builds the scalar output from leaf tensors
        inputs: Leaf values; every leaf is differentiated
        rng: Chooses which elements are sampled
        tolerance: Maximum accepted relative error
        samples: Elements sampled per leaf (all elements if the leaf is smaller)
        step: Finite-difference step
        masks: Optional per-leaf boolean masks of elements eligible for sampling
    """
    leaves = {
        key: Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        for key, value in inputs.items()
    }
    output = objective(leaves)
    if output.data.size != 1:
        raise DataError(f"Gradient check '{name}' needs a scalar objective, got {output.shape}")
    output.backward()
    base = output.item()

    def evaluate(key: str, index: Tuple[int, ...], delta: float) -> float:
        perturbed = {k: Tensor(v.data.copy()) for k, v in leaves.items()}
        perturbed[key].data[index] += delta
        return objective(perturbed).item()

    report = GradCheckReport(name=name, tolerance=tolerance)
    for key, leaf in leaves.items():
        eligible = np.ones(leaf.shape, dtype=bool)
        if masks and key in masks:
            eligible &= masks[key]
        candidates = np.argwhere(eligible)
        if len(candidates) > samples:
            candidates = candidates[rng.choice(len(candidates), samples, replace=False)]
        analytic_grad = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        for position in candidates:
            index = tuple(int(i) for i in position)
            plus, minus = evaluate(key, index, step), evaluate(key, index, -step)
            forward, backward = plus - base, base - minus
            if abs(forward - backward) > KINK_RATIO * max(abs(forward), abs(backward), 1e-12):
                report.skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * step)
            analytic = float(analytic_grad[index])
            error = relative_error(analytic, numeric)
            if error > tolerance:
                # a kink crossed inside the step leaves no one-sided signature
                fine = step * REFINE_FACTOR
                refined = (evaluate(key, index, fine) - evaluate(key, index, -fine)) / (2 * fine)
                if relative_error(analytic, refined) < error:
                    numeric, error = refined, relative_error(analytic, refined)
            report.checked += 1
            report.max_relative_error = max(report.max_relative_error, error)
            if error > tolerance:
                report.failures.append(GradCheckFailure(key, index, analytic, numeric, error))
    logger.info(report.summary())
    return report


# ----------------------------------------------------------------------------
# Per-operation cases on random 2 x 3 x 8 x 8 inputs


def _projected(fn: Callable[..., Tensor], weights: np.ndarray) -> Objective:
    def objective(leaves: Dict[str, Tensor]) -> Tensor:
        return ad.project(fn(**leaves), weights)

    return objective


def _unit_lights(rng: np.random.Generator, n: int) -> LightBatch:
    directions = rng.normal(size=(n, 3))
    directions[:, 2] = np.abs(directions[:, 2]) + 0.5
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return LightBatch(directions, rng.uniform(0.5, 1.5, size=(n, 3)))


def op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Objective, Dict[str, np.ndarray], Dict]]:
    """Objective, inputs and sampling masks for every differentiable operation."""
    shape = (2, 3, 8, 8)
    x = rng.normal(size=shape)
    y = rng.normal(size=shape)
    lights = _unit_lights(rng, 2)
    cos = np.einsum("nchw,nc->nhw", x, lights.directions)[:, None]
    shading_mask = np.broadcast_to(np.abs(cos) > SHADING_MARGIN, shape)

    def w(out_shape):
        return rng.normal(size=out_shape)

    cases = {
        "add": (_projected(ad.add, w(shape)), {"a": x, "b": y}, {}),
        "mul": (_projected(ad.mul, w(shape)), {"a": x, "b": y}, {}),
        "broadcast_mul": (
            _projected(ad.mul, w(shape)),
            {"a": x, "b": rng.normal(size=(2, 1, 8, 8))},
            {},
        ),
        "affine": (_projected(lambda x: ad.affine(x, 2.0, -1.0), w(shape)), {"x": x}, {}),
        "leaky_relu": (_projected(lambda x: ad.leaky_relu(x, 0.2), w(shape)), {"x": x}, {}),
        "sigmoid": (_projected(ad.sigmoid, w(shape)), {"x": x}, {}),
        "tanh": (_projected(ad.tanh, w(shape)), {"x": x}, {}),
        "conv2d": (
            _projected(ad.conv2d, w((2, 4, 8, 8))),
            {"x": x, "weight": rng.normal(size=(4, 3, 3, 3)), "bias": rng.normal(size=4)},
            {},
        ),
        "conv2d_grouped": (
            _projected(lambda x, weight: ad.conv2d(x, weight, groups=2), w((2, 4, 8, 8))),
            {"x": rng.normal(size=(2, 4, 8, 8)), "weight": rng.normal(size=(4, 2, 3, 3))},
            {},
        ),
        "avgpool2": (_projected(ad.avgpool2, w((2, 3, 4, 4))), {"x": x}, {}),
        "upsample2": (_projected(ad.upsample2, w((2, 3, 16, 16))), {"x": x}, {}),
        "concat": (
            _projected(lambda a, b: ad.concat([a, b]), w((2, 6, 8, 8))),
            {"a": x, "b": y},
            {},
        ),
        "slice_channels": (
            _projected(lambda x: ad.slice_channels(x, 1, 3), w((2, 2, 8, 8))),
            {"x": x},
            {},
        ),
        "channel_l2_normalize": (_projected(ad.channel_l2_normalize, w(shape)), {"x": x}, {}),
        "broadcast_const_channels": (
            _projected(lambda v: ad.broadcast_const_channels(v, 8, 8), w(shape)),
            {"v": rng.normal(size=(2, 3))},
            {},
        ),
        "shading": (
            _projected(lambda n: ad.shading(n, lights.directions, lights.intensities), w(shape)),
            {"n": x},
            {"n": shading_mask},
        ),
        "compose": (
            _projected(ad.compose, w(shape)),
            {"diffuse_tensor": x, "residual": y, "visibility": rng.uniform(size=(2, 1, 8, 8))},
            {},
        ),
    }
    target = rng.uniform(0.1, 0.9, size=(2, 3, 16, 16))
    for metric in ("l1", "l2", "dssim"):
        cases[f"loss_{metric}"] = (
            lambda leaves, m=metric: ad.metric_loss(m, leaves["p"], target),
            {"p": rng.uniform(0.05, 0.95, size=(2, 3, 16, 16))},
            {},
        )
    ms_target = rng.uniform(0.1, 0.9, size=(1, 2, 48, 48))
    cases["loss_msdssim"] = (
        lambda leaves: ad.metric_loss("msdssim", leaves["p"], ms_target),
        {"p": rng.uniform(0.05, 0.95, size=(1, 2, 48, 48))},
        {},
    )
    return cases


def check_ops(
    tolerance: float = 1e-6, seed: int = 0, samples: int = 16, names: Optional[List[str]] = None
) -> Dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    selected = names or list(cases)
    unknown = set(selected) - set(cases)
    if unknown:
        raise DataError(f"Unknown operations: {sorted(unknown)}")
    reports = {}
    for name in selected:
        objective, inputs, masks = cases[name]
        reports[name] = check_gradients(
            name, objective, inputs, rng, tolerance, samples, masks=masks
        )
    return reports


# ----------------------------------------------------------------------------
# Generator graph


def randomize_output_layers(
    params: ModelParams, rng: np.random.Generator, scale: float = 0.1
) -> ModelParams:
    """Copy of ``params`` with random output kernels so every path carries gradient."""
    checked = params.copy()
    for name, value in checked.weights.items():
        if name.endswith(".out.weight"):
            checked.weights[name] = rng.normal(0.0, scale, value.shape).astype(np.float32)
    return checked


def generator_objective(
    params: ModelParams,
    image: np.ndarray,
    l_src: LightBatch,
    l_dst: LightBatch,
    targets: Dict[str, np.ndarray],
    config: TrainConfig,
    fragment: str = "full",
) -> Objective:
    """
    Scalar training loss of the generator as a function of its parameters.

    ``stage1`` restricts the loss to albedo and normals; ``full`` covers
    stage 1, the structured layers, stage 2 and the configured image metric.
    """
    if fragment not in ("stage1", "full"):
        raise DataError(f"Unknown generator fragment: {fragment}")
    source = l_src if params.config.known_source_illumination else None
    weights = dict(config.loss_weights)
    if fragment == "stage1":
        weights = {t: (1.0 if t in ("image", "albedo", "normals") else 0.0) for t in TARGETS}
    loss_config = config.model_copy(update={"loss_weights": weights})

    def objective(leaves: Dict[str, Tensor]) -> Tensor:
        generator = Generator(params, np.float64)
        generator.tensors = leaves
        if fragment == "stage1":
            albedo, normals = generator.stage1(ad.constant(image), source)
            shading = ad.shading(normals, l_dst.directions, l_dst.intensities)
            outputs = GeneratorOutputs(
                image=ad.diffuse(albedo, shading), albedo=albedo, normals=normals
            )
        else:
            outputs = generator(ad.constant(image), l_dst, source)
        total, _ = compute_losses(outputs, targets, loss_config)
        return total

    return objective


def grad_check(
    fragment: str = "full",
    tolerance: float = 1e-5,
    metric: str = "dssim",
    size: int = 32,
    seed: int = 0,
    samples: int = 2,
    model_config: Optional[ModelConfig] = None,
) -> GradCheckReport:
    """
    Audit one fragment: ``ops`` (every operation), ``stage1`` or ``full``.

    Generator fragments use a 1 x 3 x size x size input, random targets and
    a small structured model with randomized output layers.
    """
    if fragment == "ops":
        reports = list(check_ops(tolerance=tolerance, seed=seed).values())
        merged = GradCheckReport(name="ops", tolerance=tolerance)
        for report in reports:
            merged = merged.merge(report)
        return merged

    rng = np.random.default_rng(seed)
    model_config = model_config or ModelConfig(depth=2, base_channels=4)
    params = randomize_output_layers(ModelParams.initialize(model_config, seed), rng)
    config = TrainConfig(loss=metric, model=model_config)
    image = rng.uniform(0.1, 0.9, size=(1, 3, size, size))
    normals = rng.normal(size=(1, 3, size, size))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    targets = {t: rng.uniform(0.1, 0.9, size=(1, 3, size, size)) for t in TARGETS}
    targets["normals"] = normals
    targets["visibility"] = (rng.uniform(size=(1, 1, size, size)) > 0.3).astype(np.float64)
    targets["residual"] = rng.normal(0.0, 0.05, size=(1, 3, size, size))

    objective = generator_objective(
        params, image, _unit_lights(rng, 1), _unit_lights(rng, 1), targets, config, fragment
    )
    inputs = {name: value.astype(np.float64) for name, value in params.weights.items()}
    return check_gradients(
        f"{fragment}/{metric}", objective, inputs, rng, tolerance, samples=samples
    )
