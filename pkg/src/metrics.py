"""
Image losses and evaluation metrics with analytic gradients.

Metrics operate on stacks of planes shaped (..., H, W): a raster becomes
(C, H, W), a training batch (N, C, H, W). Every plane is scored
independently and the scores are averaged. ``loss_and_grad`` returns the
gradient with respect to the first argument; the public raster API wraps it.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy.signal import fftconvolve
from scipy.signal.windows import gaussian

from .exceptions import DataError
from .image_io import RasterImage, require_same_shape

logger = logging.getLogger(__name__)

METRICS = ("l1", "l2", "dssim", "msdssim")

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
DATA_RANGE = 1.0
C1 = (0.01 * DATA_RANGE) ** 2
C2 = (0.03 * DATA_RANGE) ** 2
MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])

_WINDOW_1D = gaussian(WINDOW_SIZE, WINDOW_SIGMA)
WINDOW = np.outer(_WINDOW_1D, _WINDOW_1D) / np.outer(_WINDOW_1D, _WINDOW_1D).sum()


def _window(ndim: int) -> np.ndarray:
    return WINDOW.reshape((1,) * (ndim - 2) + WINDOW.shape)


def _filter(x: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local mean over every full window ("valid" positions)."""
    return fftconvolve(x, _window(x.ndim), mode="valid", axes=(-2, -1))


def _filter_adjoint(g: np.ndarray) -> np.ndarray:
    return fftconvolve(g, _window(g.ndim), mode="full", axes=(-2, -1))


def _check_size(x: np.ndarray) -> None:
    if min(x.shape[-2:]) < WINDOW_SIZE:
        raise DataError(
            f"Image {x.shape[-1]}x{x.shape[-2]} is smaller than the "
            f"{WINDOW_SIZE}x{WINDOW_SIZE} SSIM window"
        )


@dataclass
class _SSIMTerms:
    mu_x: np.ndarray
    mu_y: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    @property
    def ssim(self) -> np.ndarray:
        return (self.a1 * self.a2) / (self.b1 * self.b2)

    @property
    def cs(self) -> np.ndarray:
        return self.a2 / self.b2


def _ssim_terms(x: np.ndarray, y: np.ndarray) -> _SSIMTerms:
    mu_x = _filter(x)
    mu_y = _filter(y)
    sigma_xx = _filter(x * x) - mu_x * mu_x
    sigma_yy = _filter(y * y) - mu_y * mu_y
    sigma_xy = _filter(x * y) - mu_x * mu_y
    return _SSIMTerms(
        mu_x=mu_x,
        mu_y=mu_y,
        a1=2.0 * mu_x * mu_y + C1,
        a2=2.0 * sigma_xy + C2,
        b1=mu_x * mu_x + mu_y * mu_y + C1,
        b2=sigma_xx + sigma_yy + C2,
    )


def _backprop_terms(
    x: np.ndarray, y: np.ndarray, g_mu: np.ndarray, g_xx: np.ndarray, g_xy: np.ndarray
) -> np.ndarray:
    """Pull gradients of (mu_x, E[x^2], E[xy]) maps back to the input plane."""
    return _filter_adjoint(g_mu) + 2.0 * x * _filter_adjoint(g_xx) + y * _filter_adjoint(g_xy)


def _ssim_map_grad(x: np.ndarray, y: np.ndarray, upstream: np.ndarray, t: _SSIMTerms):
    s = t.ssim
    g_mu = upstream * s * (
        2.0 * t.mu_y / t.a1 - 2.0 * t.mu_y / t.a2 - 2.0 * t.mu_x / t.b1 + 2.0 * t.mu_x / t.b2
    )
    g_xy = upstream * 2.0 * s / t.a2
    g_xx = -upstream * s / t.b2
    return _backprop_terms(x, y, g_mu, g_xx, g_xy)


def _cs_map_grad(x: np.ndarray, y: np.ndarray, upstream: np.ndarray, t: _SSIMTerms):
    cs = t.cs
    g_mu = upstream * cs * (-2.0 * t.mu_y / t.a2 + 2.0 * t.mu_x / t.b2)
    g_xy = upstream * 2.0 * cs / t.a2
    g_xx = -upstream * cs / t.b2
    return _backprop_terms(x, y, g_mu, g_xx, g_xy)


# ----------------------------------------------------------------------------
# Plane-level losses: each returns (value, d value / d x)


def _l1(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = x - y
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _l2(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = x - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def _dssim(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    _check_size(x)
    terms = _ssim_terms(x, y)
    ssim = terms.ssim
    value = (1.0 - float(np.mean(ssim))) / 2.0
    upstream = np.full(ssim.shape, -0.5 / ssim.size)
    return value, _ssim_map_grad(x, y, upstream, terms)


def _pool(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd trailing rows/columns are cropped first."""
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return 0.25 * (
        x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2]
    )


def _pool_adjoint(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    out = np.zeros(shape)
    h, w = g.shape[-2] * 2, g.shape[-1] * 2
    out[..., :h, :w] = 0.25 * np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
    return out


def ms_levels(height: int, width: int, max_levels: int = len(MS_WEIGHTS)) -> int:
    """Number of MS-SSIM scales whose coarsest level still fits the window."""
    levels = max_levels
    while levels > 1 and min(height, width) < WINDOW_SIZE * 2 ** (levels - 1):
        levels -= 1
    return levels


def ms_weights(levels: int) -> np.ndarray:
    weights = MS_WEIGHTS[:levels]
    return weights / weights.sum()


def _ms_dssim(x: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    _check_size(x)
    levels = ms_levels(*x.shape[-2:])
    weights = ms_weights(levels)
    lead = x.shape[:-2]

    pyramid = [(x, y)]
    for _ in range(levels - 1):
        px, py = pyramid[-1]
        pyramid.append((_pool(px), _pool(py)))

    factors: List[np.ndarray] = []
    cache = []
    for level, (px, py) in enumerate(pyramid):
        terms = _ssim_terms(px, py)
        local = terms.ssim if level == levels - 1 else terms.cs
        mean = local.reshape(lead + (-1,)).mean(axis=-1)
        factors.append(np.maximum(mean, 0.0))
        cache.append((px, py, terms, local.shape[-2] * local.shape[-1]))

    factors_arr = np.stack(factors)  # (levels, ...)
    per_plane = np.prod(factors_arr ** weights.reshape((-1,) + (1,) * len(lead)), axis=0)
    value = (1.0 - float(np.mean(per_plane))) / 2.0

    # d value / d per_plane, then through each factor's power and relu
    d_plane = np.full(per_plane.shape, -0.5 / max(per_plane.size, 1))
    grad = np.zeros(x.shape)
    for level in reversed(range(levels)):
        px, py, terms, count = cache[level]
        factor = factors_arr[level]
        positive = factor > 0
        d_factor = np.where(
            positive, d_plane * per_plane * weights[level] / np.where(positive, factor, 1.0), 0.0
        )
        upstream = np.broadcast_to(
            (d_factor / count)[..., None, None], terms.a2.shape
        ).copy()
        if level == levels - 1:
            g_level = _ssim_map_grad(px, py, upstream, terms)
        else:
            g_level = _cs_map_grad(px, py, upstream, terms)
        # pull the level gradient back to full resolution
        for inner in reversed(range(level)):
            g_level = _pool_adjoint(g_level, cache[inner][0].shape)
        grad += g_level
    return value, grad


_LOSSES: Dict[str, Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]] = {
    "l1": _l1,
    "l2": _l2,
    "dssim": _dssim,
    "msdssim": _ms_dssim,
}


def canonical_metric(name: str) -> str:
    key = name.lower().replace("-", "").replace("_", "")
    if key == "msssim":
        key = "msdssim"
    if key not in _LOSSES:
        raise ValueError(f"Unsupported metric {name!r}; choose from {', '.join(METRICS)}")
    return key


def loss_and_grad(
    name: str, prediction: np.ndarray, target: np.ndarray, clamp: bool = True
) -> Tuple[float, np.ndarray]:
    """
    Evaluate a metric on plane stacks and its gradient w.r.t. ``prediction``.

    Args:
        name: One of ``l1``, ``l2``, ``dssim``, ``msdssim``
        prediction: Array shaped (..., H, W)
        target: Array of the same shape
        clamp: Clamp both inputs to [0, 1] first; the gradient is then masked
            to predictions inside the (inclusive) range

    Returns:
        Tuple of (scalar value, gradient shaped like ``prediction``)
    """
    loss = _LOSSES[canonical_metric(name)]
    x = np.asarray(prediction, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"Metric inputs differ in shape: {x.shape} vs {y.shape}")
    if not clamp:
        return loss(x, y)
    value, grad = loss(np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0))
    inside = (x >= 0.0) & (x <= 1.0)
    return value, np.where(inside, grad, 0.0)


# ----------------------------------------------------------------------------
# Raster API


def _planes(a: RasterImage, b: RasterImage) -> Tuple[np.ndarray, np.ndarray]:
    require_same_shape(a, b)
    return a.to_chw().astype(np.float64), b.to_chw().astype(np.float64)


def evaluate(name: str, a: RasterImage, b: RasterImage) -> float:
    x, y = _planes(a, b)
    return loss_and_grad(name, x, y)[0]


def l1(a: RasterImage, b: RasterImage) -> float:
    return evaluate("l1", a, b)


def l2(a: RasterImage, b: RasterImage) -> float:
    return evaluate("l2", a, b)


def dssim(a: RasterImage, b: RasterImage) -> float:
    """(1 - mean SSIM) / 2 with an 11x11 Gaussian window, averaged over channels."""
    return evaluate("dssim", a, b)


def ms_dssim(a: RasterImage, b: RasterImage) -> float:
    return evaluate("msdssim", a, b)


def ssim_map(a: RasterImage, b: RasterImage) -> RasterImage:
    """Local SSIM over valid window positions, one channel per input channel."""
    x, y = _planes(a, b)
    x, y = np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0)
    _check_size(x)
    return RasterImage.from_chw(_ssim_terms(x, y).ssim)


@dataclass
class MSSSIMResult:
    value: float
    levels: int
    reduced: bool
    weights: np.ndarray


def ms_dssim_detailed(a: RasterImage, b: RasterImage) -> MSSSIMResult:
    """MS-DSSIM together with the number of scales actually used."""
    levels = ms_levels(a.height, a.width)
    if levels < len(MS_WEIGHTS):
        logger.warning(f"MS-SSIM reduced to {levels} scales for {a.width}x{a.height} input")
    return MSSSIMResult(
        value=ms_dssim(a, b),
        levels=levels,
        reduced=levels < len(MS_WEIGHTS),
        weights=ms_weights(levels),
    )


def grad(name: str, a: RasterImage, b: RasterImage) -> RasterImage:
    """Analytic gradient of the metric w.r.t. ``a``."""
    x, y = _planes(a, b)
    return RasterImage.from_chw(loss_and_grad(name, x, y)[1])
