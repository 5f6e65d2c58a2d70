"""
Minimal reverse-mode automatic differentiation over N x C x H x W arrays.

Every operation returns a new ``Tensor`` that remembers its parents and a
closure propagating the upstream gradient to them. ``Tensor.backward`` walks
the graph in reverse topological order. Values keep the dtype of their
inputs, so a graph built from float64 leaves is differentiated in float64.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import formation, metrics
from .exceptions import DataError

logger = logging.getLogger(__name__)


class Tensor:
    """A value in the computation graph with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: Optional[str] = None,
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            raise DataError(f"Gradient shape {grad.shape} does not match value {self.data.shape}")
        grad = grad.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def _topological_order(self) -> List["Tensor"]:
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise DataError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self.accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(self._topological_order()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def constant(data, dtype=None) -> Tensor:
    array = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    return Tensor(array)


def _result(
    value: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]
) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    if not tracked:
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=tracked, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_nchw(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise DataError(f"{op} expects an N x C x H x W tensor, got shape {x.shape}")


# ----------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data + b.data
    except ValueError:
        raise DataError(f"Cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _result(value, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data * b.data
    except ValueError:
        raise DataError(f"Cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(value, (a, b), backward)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * x + shift with constant coefficients."""
    value = x.data * scale + shift

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * scale)

    return _result(value.astype(x.dtype, copy=False), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    value = np.where(positive, x.data, slope * x.data)

    def backward(g: np.ndarray) -> None:
        x.accumulate(np.where(positive, g, slope * g))

    return _result(value, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    value = 0.5 * (np.tanh(0.5 * x.data) + 1.0)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * value * (1.0 - value))

    return _result(value, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    value = np.tanh(x.data)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g * (1.0 - value * value))

    return _result(value, (x,), backward)


def sum_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors in the given order."""
    if not terms:
        raise DataError("Cannot sum an empty list of tensors")
    total = terms[0]
    for term in terms[1:]:
        total = add(total, term)
    return total


# ----------------------------------------------------------------------------
# Convolution and resampling


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, groups: int = 1) -> Tensor:
    """
    Stride-1 "same" convolution (cross-correlation) with zero padding.

    Args:
        x: Input shaped (N, C_in, H, W)
        weight: Kernel shaped (C_out, C_in / groups, k, k), k odd
        bias: Optional (C_out,) bias
        groups: Number of independent channel groups

    Returns:
        Output shaped (N, C_out, H, W)
    """
    _check_nchw(x, "conv2d")
    n, c_in, height, width = x.shape
    c_out, c_group, k, k_w = weight.shape
    if k != k_w or k % 2 == 0:
        raise DataError(f"conv2d needs a square odd kernel, got {k}x{k_w}")
    if c_in % groups or c_out % groups:
        raise DataError(f"Channels {c_in}->{c_out} are not divisible into {groups} groups")
    if c_group != c_in // groups:
        raise DataError(
            f"Kernel expects {c_group} input channels per group, input has {c_in // groups}"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DataError(f"Bias shape {bias.shape} does not match {c_out} output channels")

    pad = k // 2
    spatial = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    padded = np.pad(x.data, spatial)
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))
    windows = windows.reshape(n, groups, c_group, height, width, k, k)
    kernel = weight.data.reshape(groups, c_out // groups, c_group, k, k)
    value = np.einsum("ngchwij,gocij->ngohw", windows, kernel, optimize=True)
    value = value.reshape(n, c_out, height, width)
    if bias is not None:
        value = value + bias.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        grouped = g.reshape(n, groups, c_out // groups, height, width)
        if weight.requires_grad:
            grad_kernel = np.einsum("ngchwij,ngohw->gocij", windows, grouped, optimize=True)
            weight.accumulate(grad_kernel.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            g_windows = sliding_window_view(np.pad(g, spatial), (k, k), axis=(2, 3))
            g_windows = g_windows.reshape(n, groups, c_out // groups, height, width, k, k)
            flipped = kernel[:, :, :, ::-1, ::-1]
            grad_x = np.einsum("ngohwij,gocij->ngchw", g_windows, flipped, optimize=True)
            x.accumulate(grad_x.reshape(x.shape))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(value, parents, backward)


def avgpool2(x: Tensor) -> Tensor:
    """2 x 2 average pooling with stride 2; H and W must be even."""
    _check_nchw(x, "avgpool2")
    n, c, height, width = x.shape
    if height % 2 or width % 2:
        raise DataError(f"avgpool2 needs even spatial size, got {width}x{height}")
    value = x.data.reshape(n, c, height // 2, 2, width // 2, 2).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        x.accumulate(np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _result(value, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _check_nchw(x, "upsample2")
    n, c, height, width = x.shape
    value = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(n, c, height, 2, width, 2).sum(axis=(3, 5)))

    return _result(value, (x,), backward)


# ----------------------------------------------------------------------------
# Channel plumbing


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise DataError("concat needs at least one tensor")
    reference = tensors[0].shape
    for tensor in tensors[1:]:
        other = tensor.shape
        if len(other) != len(reference) or any(
            a != b for i, (a, b) in enumerate(zip(reference, other)) if i != axis % len(reference)
        ):
            raise DataError(f"Cannot concatenate shapes {reference} and {other} on axis {axis}")
    value = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g: np.ndarray) -> None:
        for tensor, part in zip(tensors, np.split(g, bounds, axis=axis)):
            tensor.accumulate(part)

    return _result(value, tuple(tensors), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_nchw(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise DataError(f"Channel slice [{start}, {stop}) outside {x.shape[1]} channels")
    value = x.data[:, start:stop]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x.accumulate(full)

    return _result(value, (x,), backward)


def channel_l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Rescale each pixel's channel vector to unit Euclidean length."""
    _check_nchw(x, "channel_l2_normalize")
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    value = x.data / norm

    def backward(g: np.ndarray) -> None:
        radial = np.sum(g * value, axis=1, keepdims=True)
        x.accumulate((g - value * radial) / norm)

    return _result(value, (x,), backward)


def broadcast_const_channels(values: Tensor, height: int, width: int) -> Tensor:
    """Turn per-sample values (N, K) into K constant channels of size H x W."""
    if values.data.ndim != 2:
        raise DataError(f"broadcast_const_channels expects (N, K) values, got {values.shape}")
    n, k = values.shape
    value = np.broadcast_to(values.data[:, :, None, None], (n, k, height, width)).copy()

    def backward(g: np.ndarray) -> None:
        values.accumulate(g.sum(axis=(2, 3)))

    return _result(value, (values,), backward)


# ----------------------------------------------------------------------------
# Structured image-formation layers


def shading(normals: Tensor, directions: np.ndarray, intensities: np.ndarray) -> Tensor:
    """Per-sample directional shading of a normal map; lights are (N, 3) arrays."""
    _check_nchw(normals, "shading")
    if normals.shape[1] != 3:
        raise DataError(f"Normal tensors need 3 channels, got {normals.shape[1]}")
    direction = formation.expand_light(directions, 4, 1).astype(normals.dtype)
    intensity = formation.expand_light(intensities, 4, 1).astype(normals.dtype)
    value = formation.shading_kernel(normals.data, direction, intensity, axis=1)

    def backward(g: np.ndarray) -> None:
        normals.accumulate(formation.shading_vjp(g, normals.data, direction, intensity, axis=1))

    return _result(value, (normals,), backward)


def diffuse(albedo: Tensor, shading_tensor: Tensor) -> Tensor:
    if albedo.shape != shading_tensor.shape:
        raise DataError(f"Albedo {albedo.shape} and shading {shading_tensor.shape} differ")
    return mul(albedo, shading_tensor)


def compose(diffuse_tensor: Tensor, residual: Tensor, visibility: Tensor) -> Tensor:
    """(D + R) * V with single-channel visibility."""
    if diffuse_tensor.shape != residual.shape:
        raise DataError(f"Diffuse {diffuse_tensor.shape} and residual {residual.shape} differ")
    if visibility.data.ndim != 4 or visibility.shape[1] != 1:
        raise DataError(f"Visibility must be N x 1 x H x W, got {visibility.shape}")
    lit = diffuse_tensor.data + residual.data
    value = formation.compose_kernel(diffuse_tensor.data, residual.data, visibility.data)

    def backward(g: np.ndarray) -> None:
        through = g * visibility.data
        diffuse_tensor.accumulate(through)
        residual.accumulate(through)
        visibility.accumulate(np.sum(g * lit, axis=1, keepdims=True))

    return _result(value, (diffuse_tensor, residual, visibility), backward)


# ----------------------------------------------------------------------------
# Losses


def metric_loss(name: str, prediction: Tensor, target: np.ndarray, clamp: bool = True) -> Tensor:
    """Scalar image loss of ``prediction`` against a constant target."""
    value, grad = metrics.loss_and_grad(name, prediction.data, np.asarray(target), clamp=clamp)
    grad = grad.astype(prediction.dtype)

    def backward(g: np.ndarray) -> None:
        prediction.accumulate(grad * g)

    return _result(np.asarray(value, dtype=prediction.dtype), (prediction,), backward)


def project(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(x * weights) against constant weights of the same shape."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise DataError(f"Projection weights {weights.shape} do not match {x.shape}")
    value = np.sum(x.data * weights)

    def backward(g: np.ndarray) -> None:
        x.accumulate(weights * g)

    return _result(np.asarray(value, dtype=x.dtype), (x,), backward)
