"""
Two-stage physics-guided relighting generator.

Stage 1 maps the source image to albedo and normals. The structured layers
render the diffuse image under the target light with the same formation
kernels the oracle uses. Stage 2 sees every intrinsic state and predicts a
sign-free residual and a soft visibility map, and the output is
(D + R) * V. A direct image-to-image U-Net is kept as an unstructured
baseline.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DataError, FormatError
from .lighting import DirectionalLight

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MODEL_MAGIC = b"RLM1"

NORMALS_BIAS = (0.0, 0.0, 1.0)
VISIBILITY_BIAS = 3.0


class ModelConfig(BaseModel):
    """Generator architecture."""

    architecture: Literal["structured", "direct"] = "structured"
    depth: int = Field(default=3, ge=1, le=6)
    base_channels: int = Field(default=16, ge=2)
    kernel_size: int = Field(default=3, ge=1)
    leaky_slope: float = Field(default=0.2, ge=0.0, lt=1.0)
    known_source_illumination: bool = True
    trunk_groups: Literal[1, 2] = 1
    force_diffuse: bool = False

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"Kernel size must be odd, got {value}")
        return value

    @field_validator("base_channels")
    @classmethod
    def _even_channels(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"Base channels must be even, got {value}")
        return value


@dataclass
class LightBatch:
    """Directions and intensities of one light per batch sample, both (N, 3)."""

    directions: np.ndarray
    intensities: np.ndarray

    @classmethod
    def from_lights(cls, lights: Sequence[DirectionalLight]) -> "LightBatch":
        return cls(
            np.stack([light.direction for light in lights]),
            np.stack([light.intensity for light in lights]),
        )

    def __len__(self) -> int:
        return len(self.directions)

    def channels(self, with_intensity: bool, dtype) -> Tensor:
        values = self.directions
        if with_intensity:
            values = np.concatenate([self.directions, self.intensities], axis=1)
        return ad.constant(values, dtype=dtype)


# ----------------------------------------------------------------------------
# Parameters


def _unet_channels(config: ModelConfig) -> List[int]:
    return [config.base_channels * 2**level for level in range(config.depth + 1)]


def _conv_shapes(prefix: str, c_in: int, c_out: int, k: int, groups: int = 1):
    return {
        f"{prefix}.weight": (c_out, c_in // groups, k, k),
        f"{prefix}.bias": (c_out,),
    }


def unet_layout(
    prefix: str, in_channels: int, heads: Dict[str, int], config: ModelConfig
) -> Dict[str, Tuple[int, ...]]:
    """
    Parameter shapes of one U-Net with its output branches.

    The encoder has one convolution per level followed by 2x2 average pooling,
    the decoder upsamples, concatenates the skip and convolves. The trunk's
    last feature map is split into one channel group per head; each group
    passes through two private convolutions.
    """
    k = config.kernel_size
    channels = _unet_channels(config)
    if channels[0] % len(heads):
        raise DataError(f"{channels[0]} trunk channels cannot be split into {len(heads)} heads")
    shapes = dict(_conv_shapes(f"{prefix}.enc0", in_channels, channels[0], k))
    for level in range(1, config.depth + 1):
        shapes.update(_conv_shapes(f"{prefix}.enc{level}", channels[level - 1], channels[level], k))
    for level in reversed(range(config.depth)):
        c_in = channels[level + 1] + channels[level]
        shapes.update(
            _conv_shapes(f"{prefix}.dec{level}", c_in, channels[level], k, config.trunk_groups)
        )
    group = channels[0] // len(heads)
    for head, out_channels in heads.items():
        shapes.update(_conv_shapes(f"{prefix}.{head}.hidden", group, group, k))
        shapes.update(_conv_shapes(f"{prefix}.{head}.out", group, out_channels, k))
    return shapes


def stage1_in_channels(config: ModelConfig) -> int:
    return 3 + (3 if config.known_source_illumination else 0)


def stage2_in_channels(config: ModelConfig) -> int:
    # I, A, N, D plus l_dst direction and intensity
    return 12 + 6 + (3 if config.known_source_illumination else 0)


def direct_in_channels(config: ModelConfig) -> int:
    return 3 + 6 + (3 if config.known_source_illumination else 0)


STAGE1_HEADS = {"albedo": 3, "normals": 3}
STAGE2_HEADS = {"residual": 3, "visibility": 1}
DIRECT_HEADS = {"image": 3}


def model_layout(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    if config.architecture == "direct":
        return unet_layout("direct", direct_in_channels(config), DIRECT_HEADS, config)
    layout = unet_layout("stage1", stage1_in_channels(config), STAGE1_HEADS, config)
    layout.update(unet_layout("stage2", stage2_in_channels(config), STAGE2_HEADS, config))
    return layout


def _output_bias(name: str) -> Optional[np.ndarray]:
    if name == "stage1.normals.out.bias":
        return np.array(NORMALS_BIAS)
    if name == "stage2.visibility.out.bias":
        return np.array([VISIBILITY_BIAS])
    return None


class ModelParams:
    """Named parameter arrays, Adam moments and the architecture they belong to."""

    def __init__(
        self,
        config: ModelConfig,
        weights: Dict[str, np.ndarray],
        moments: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
        step: int = 0,
    ):
        layout = model_layout(config)
        if set(weights) != set(layout):
            missing = sorted(set(layout) - set(weights))
            extra = sorted(set(weights) - set(layout))
            raise DataError(
                f"Parameters do not match the architecture: missing {missing}, extra {extra}"
            )
        for name, shape in layout.items():
            if weights[name].shape != shape:
                raise DataError(
                    f"Parameter {name} has shape {weights[name].shape}, expected {shape}"
                )
        self.config = config
        self.weights = {name: np.asarray(weights[name], dtype=np.float32) for name in layout}
        self.moments = moments or {
            "m": {name: np.zeros_like(value) for name, value in self.weights.items()},
            "v": {name: np.zeros_like(value) for name, value in self.weights.items()},
        }
        self.step = step

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """
        He-initialized kernels, zero biases and zero output kernels.

        Zero output kernels make an untrained structured model emit constant
        intrinsics: albedo 0.5, normals facing the camera, zero residual and
        visibility sigmoid(3).
        """
        rng = np.random.default_rng(seed)
        gain = np.sqrt(2.0 / (1.0 + config.leaky_slope**2))
        weights = {}
        for name, shape in model_layout(config).items():
            if name.endswith(".bias"):
                bias = _output_bias(name)
                weights[name] = np.zeros(shape) if bias is None else bias
            elif name.endswith(".out.weight"):
                weights[name] = np.zeros(shape)
            else:
                fan_in = shape[1] * shape[2] * shape[3]
                weights[name] = rng.normal(0.0, gain / np.sqrt(fan_in), shape)
        params = cls(config, weights)
        logger.info(
            f"Initialized {config.architecture} generator with {params.num_parameters()} parameters"
        )
        return params

    def num_parameters(self) -> int:
        return int(sum(value.size for value in self.weights.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config.model_copy(),
            {name: value.copy() for name, value in self.weights.items()},
            {kind: {n: v.copy() for n, v in vs.items()} for kind, vs in self.moments.items()},
            self.step,
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for value in self.weights.values())


# ----------------------------------------------------------------------------
# Forward passes


@dataclass
class GeneratorOutputs:
    """Every intermediate prediction of one forward pass, as N x C x H x W tensors."""

    image: Tensor
    albedo: Optional[Tensor] = None
    normals: Optional[Tensor] = None
    shading: Optional[Tensor] = None
    diffuse: Optional[Tensor] = None
    residual: Optional[Tensor] = None
    visibility: Optional[Tensor] = None


class Generator:
    """Differentiable view of a ``ModelParams`` in a chosen float precision."""

    def __init__(self, params: ModelParams, dtype=np.float32, trainable: bool = False):
        self.params = params
        self.config = params.config
        self.dtype = np.dtype(dtype)
        self.tensors = {
            name: Tensor(value.astype(self.dtype), requires_grad=trainable, name=name)
            for name, value in params.weights.items()
        }

    def gradients(self) -> Dict[str, np.ndarray]:
        return {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad)
            for name, t in self.tensors.items()
        }

    def _conv(self, prefix: str, x: Tensor, groups: int = 1) -> Tensor:
        return ad.conv2d(
            x, self.tensors[f"{prefix}.weight"], self.tensors[f"{prefix}.bias"], groups=groups
        )

    def _act(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(x, self.config.leaky_slope)

    def unet(self, prefix: str, x: Tensor, heads: Sequence[str]) -> Dict[str, Tensor]:
        """Run one U-Net and return the raw (pre-activation) output of each head."""
        _, _, height, width = x.shape
        factor = 2**self.config.depth
        if height % factor or width % factor:
            raise DataError(
                f"Input {width}x{height} must be divisible by {factor} "
                f"for depth {self.config.depth}"
            )
        skips = [self._act(self._conv(f"{prefix}.enc0", x))]
        for level in range(1, self.config.depth + 1):
            skips.append(self._act(self._conv(f"{prefix}.enc{level}", ad.avgpool2(skips[-1]))))
        features = skips[-1]
        for level in reversed(range(self.config.depth)):
            merged = ad.concat([ad.upsample2(features), skips[level]])
            features = self._act(
                self._conv(f"{prefix}.dec{level}", merged, groups=self.config.trunk_groups)
            )
        group = features.shape[1] // len(heads)
        outputs = {}
        for index, head in enumerate(heads):
            branch = features
            if len(heads) > 1:
                branch = ad.slice_channels(features, index * group, (index + 1) * group)
            hidden = self._act(self._conv(f"{prefix}.{head}.hidden", branch))
            outputs[head] = self._conv(f"{prefix}.{head}.out", hidden)
        return outputs

    def _light_channels(self, lights: LightBatch, with_intensity: bool, height: int, width: int):
        return ad.broadcast_const_channels(
            lights.channels(with_intensity, self.dtype), height, width
        )

    def _check_source(self, l_src: Optional[LightBatch]) -> None:
        if self.config.known_source_illumination and l_src is None:
            raise DataError("This model was trained with known source illumination; pass l_src")

    def stage1(self, image: Tensor, l_src: Optional[LightBatch] = None) -> Tuple[Tensor, Tensor]:
        """Predict albedo in [0, 1] and unit normals from an image in [0, 1]."""
        self._check_source(l_src)
        _, _, height, width = image.shape
        inputs = [ad.affine(image, 2.0, -1.0)]
        if self.config.known_source_illumination:
            inputs.append(self._light_channels(l_src, False, height, width))
        raw = self.unet("stage1", ad.concat(inputs), list(STAGE1_HEADS))
        albedo = ad.sigmoid(raw["albedo"])
        normals = ad.channel_l2_normalize(raw["normals"])
        return albedo, normals

    def stage2(
        self,
        image: Tensor,
        albedo: Tensor,
        normals: Tensor,
        diffuse: Tensor,
        l_dst: LightBatch,
        l_src: Optional[LightBatch] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Predict an unbounded residual and a visibility map in (0, 1)."""
        self._check_source(l_src)
        _, _, height, width = image.shape
        inputs = [
            ad.affine(image, 2.0, -1.0),
            albedo,
            normals,
            diffuse,
            self._light_channels(l_dst, True, height, width),
        ]
        if self.config.known_source_illumination:
            inputs.append(self._light_channels(l_src, False, height, width))
        raw = self.unet("stage2", ad.concat(inputs), list(STAGE2_HEADS))
        return raw["residual"], ad.sigmoid(raw["visibility"])

    def render(
        self,
        image: Tensor,
        albedo: Tensor,
        normals: Tensor,
        l_dst: LightBatch,
        l_src: Optional[LightBatch] = None,
    ) -> GeneratorOutputs:
        """Structured layers and stage 2 for given stage-1 intrinsics."""
        shading = ad.shading(normals, l_dst.directions, l_dst.intensities)
        diffuse = ad.diffuse(albedo, shading)
        if self.config.force_diffuse:
            return GeneratorOutputs(
                image=diffuse, albedo=albedo, normals=normals, shading=shading, diffuse=diffuse
            )
        residual, visibility = self.stage2(image, albedo, normals, diffuse, l_dst, l_src)
        return GeneratorOutputs(
            image=ad.compose(diffuse, residual, visibility),
            albedo=albedo,
            normals=normals,
            shading=shading,
            diffuse=diffuse,
            residual=residual,
            visibility=visibility,
        )

    def direct(
        self, image: Tensor, l_dst: LightBatch, l_src: Optional[LightBatch] = None
    ) -> GeneratorOutputs:
        self._check_source(l_src)
        _, _, height, width = image.shape
        inputs = [ad.affine(image, 2.0, -1.0), self._light_channels(l_dst, True, height, width)]
        if self.config.known_source_illumination:
            inputs.append(self._light_channels(l_src, False, height, width))
        raw = self.unet("direct", ad.concat(inputs), list(DIRECT_HEADS))
        return GeneratorOutputs(image=ad.affine(ad.tanh(raw["image"]), 0.5, 0.5))

    def __call__(
        self, image: Tensor, l_dst: LightBatch, l_src: Optional[LightBatch] = None
    ) -> GeneratorOutputs:
        if len(l_dst) != image.shape[0]:
            raise DataError(f"{len(l_dst)} target lights for a batch of {image.shape[0]} images")
        if self.config.architecture == "direct":
            return self.direct(image, l_dst, l_src)
        albedo, normals = self.stage1(image, l_src)
        return self.render(image, albedo, normals, l_dst, l_src)


def stage1_forward(
    params: ModelParams, image: Tensor, l_src: Optional[LightBatch] = None
) -> Tuple[Tensor, Tensor]:
    return Generator(params, image.dtype).stage1(image, l_src)


def stage2_forward(
    params: ModelParams,
    image: Tensor,
    albedo: Tensor,
    normals: Tensor,
    diffuse: Tensor,
    l_dst: LightBatch,
    l_src: Optional[LightBatch] = None,
) -> Tuple[Tensor, Tensor]:
    return Generator(params, image.dtype).stage2(image, albedo, normals, diffuse, l_dst, l_src)


# ----------------------------------------------------------------------------
# Model file


def _write_blob(handle, array: np.ndarray) -> None:
    handle.write(np.asarray([array.ndim, *array.shape], dtype="<u4").tobytes())
    handle.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_blob(payload: bytes, offset: int) -> Tuple[np.ndarray, int]:
    try:
        ndim = int(np.frombuffer(payload, dtype="<u4", count=1, offset=offset)[0])
        shape = tuple(
            int(s) for s in np.frombuffer(payload, dtype="<u4", count=ndim, offset=offset + 4)
        )
        offset += 4 * (ndim + 1)
        count = int(np.prod(shape))
        values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
    except ValueError:
        raise FormatError("Model file is truncated", offset=offset) from None
    return values.reshape(shape).astype(np.float32), offset + 4 * count


def save_model(params: ModelParams, path: PathLike, extra: Optional[Dict] = None) -> Path:
    """
    Write the model file: magic, JSON header length (u32 LE), JSON header, blobs.

    The header echoes the architecture, the optimizer step and the blob
    order; every blob is a shape-prefixed little-endian float32 array.
    Parameters come first, then the Adam first and second moments.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    names = list(params.weights)
    header = {
        "config": params.config.model_dump(),
        "step": params.step,
        "parameters": names,
        "extra": extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with target.open("wb") as handle:
        handle.write(MODEL_MAGIC)
        handle.write(np.asarray([len(encoded)], dtype="<u4").tobytes())
        handle.write(encoded)
        for group in (params.weights, params.moments["m"], params.moments["v"]):
            for name in names:
                _write_blob(handle, group[name])
    logger.info(f"Saved model ({params.num_parameters()} parameters) to {target}")
    return target


def load_model(path: PathLike) -> ModelParams:
    source = Path(path)
    if not source.exists():
        raise DataError(f"Model file not found: {source}")
    payload = source.read_bytes()
    if payload[:4] != MODEL_MAGIC:
        raise FormatError(f"{source} is not a model file (bad magic)", offset=0)
    if len(payload) < 8:
        raise FormatError(f"{source} is truncated", offset=4)
    length = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    try:
        header = json.loads(payload[8 : 8 + length].decode("utf-8"))
        config = ModelConfig.model_validate(header["config"])
        names = header["parameters"]
    except (ValueError, KeyError) as e:
        raise FormatError(f"Corrupt model header in {source}: {e}", offset=8) from None

    offset = 8 + length
    groups = []
    for _ in range(3):
        values = {}
        for name in names:
            values[name], offset = _read_blob(payload, offset)
        groups.append(values)
    if offset != len(payload):
        raise FormatError(f"{len(payload) - offset} trailing bytes in {source}", offset=offset)
    params = ModelParams(config, groups[0], {"m": groups[1], "v": groups[2]}, int(header["step"]))
    logger.info(f"Loaded {config.architecture} model from {source} (step {params.step})")
    return params


def read_model_header(path: PathLike) -> Dict:
    payload = Path(path).read_bytes()
    if payload[:4] != MODEL_MAGIC:
        raise FormatError(f"{path} is not a model file (bad magic)", offset=0)
    length = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    return json.loads(payload[8 : 8 + length].decode("utf-8"))
