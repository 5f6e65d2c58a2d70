"""
Raster storage, file formats and colour-space conversion.

Every image-like quantity in the pipeline (radiance, albedo, normals, shading,
residual, visibility) is carried as a ``RasterImage``: an immutable
height x width x channels array of 32-bit linear values.
"""

import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from .exceptions import DataError, FormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SRGB_KNEE_LINEAR = 0.0031308
SRGB_KNEE_ENCODED = 0.04045

_PFM_CHANNELS = {b"PF": 3, b"Pf": 1}


class RasterImage:
    """Immutable H x W x C raster of linear radiance values."""

    __slots__ = ("_data",)

    def __init__(self, data: np.ndarray):
        """
        Wrap an array as a raster.

        Args:
            data: Array of shape (H, W) or (H, W, C) with C in {1, 3}

        Raises:
            DataError: If the shape is not a valid raster layout
        """
        array = np.array(data, dtype=np.float32)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3 or array.shape[2] not in (1, 3):
            raise DataError(f"Raster must be HxW or HxWx{{1,3}}, got shape {array.shape}")
        if array.shape[0] == 0 or array.shape[1] == 0:
            raise DataError("Raster must have at least one pixel")
        array.setflags(write=False)
        self._data = array

    @classmethod
    def zeros(cls, height: int, width: int, channels: int = 3) -> "RasterImage":
        return cls(np.zeros((height, width, channels), dtype=np.float32))

    @classmethod
    def full(cls, height: int, width: int, value, channels: int = 3) -> "RasterImage":
        return cls(np.full((height, width, channels), value, dtype=np.float32))

    @classmethod
    def from_chw(cls, planes: np.ndarray) -> "RasterImage":
        """Build a raster from a channel-first (C, H, W) array."""
        return cls(np.moveaxis(np.asarray(planes), 0, -1))

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def channels(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self._data.shape

    def to_chw(self) -> np.ndarray:
        """Return a writable channel-first copy of the data."""
        return np.ascontiguousarray(np.moveaxis(self._data, -1, 0))

    def clamp(self, low: float = 0.0, high: float = 1.0) -> "RasterImage":
        return RasterImage(np.clip(self._data, low, high))

    def normalized(self) -> "RasterImage":
        """Rescale each pixel to unit length; all-zero pixels stay zero."""
        if self.channels != 3:
            raise DataError("Only 3-channel rasters hold normal vectors")
        vectors = self._data.astype(np.float64)
        norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return RasterImage(np.where(norm > 0, vectors / safe, 0.0))

    def with_data(self, data: np.ndarray) -> "RasterImage":
        return RasterImage(data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._data, other._data)

    def __repr__(self) -> str:
        return f"RasterImage(height={self.height}, width={self.width}, channels={self.channels})"


def require_same_shape(*images: RasterImage, channels_may_differ: bool = False) -> None:
    """Raise a DataError unless all rasters share height and width (and channels)."""
    first = images[0]
    for image in images[1:]:
        if (image.height, image.width) != (first.height, first.width):
            raise DataError(
                f"Shape mismatch: {first.height}x{first.width} vs {image.height}x{image.width}"
            )
        if not channels_may_differ and image.channels != first.channels:
            raise DataError(f"Channel mismatch: {first.channels} vs {image.channels}")


# ----------------------------------------------------------------------------
# PFM


def _read_token(payload: bytes, offset: int) -> Tuple[bytes, int]:
    """Return the next whitespace-delimited token and the offset just past it."""
    length = len(payload)
    while offset < length and payload[offset : offset + 1].isspace():
        offset += 1
    start = offset
    while offset < length and not payload[offset : offset + 1].isspace():
        offset += 1
    if start == offset:
        raise FormatError("Unexpected end of PFM header", offset=start)
    return payload[start:offset], offset


def load_pfm(path: PathLike) -> RasterImage:
    """
    Read a Portable Float Map.

    Scanlines are stored bottom-up in PFM; the returned raster is top-down.

    Args:
        path: Path to a ``.pfm`` file

    Returns:
        Raster holding the stored values without clamping

    Raises:
        FormatError: On malformed headers, truncated payloads or unknown identifiers
    """
    payload = Path(path).read_bytes()

    identifier, offset = _read_token(payload, 0)
    if identifier not in _PFM_CHANNELS:
        raise FormatError(f"Unsupported PFM identifier {identifier!r}", offset=0)
    channels = _PFM_CHANNELS[identifier]

    fields = []
    for name in ("width", "height", "scale"):
        token_start = offset
        token, offset = _read_token(payload, offset)
        try:
            fields.append(float(token) if name == "scale" else int(token))
        except ValueError:
            raise FormatError(f"Invalid PFM {name} {token!r}", offset=token_start) from None
    width, height, scale = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"Invalid PFM size {width}x{height}", offset=offset)
    if scale == 0:
        raise FormatError("PFM scale must be non-zero", offset=offset)

    # exactly one whitespace byte separates the header from the payload
    data_start = offset + 1
    expected = width * height * channels * 4
    available = len(payload) - data_start
    if available < expected:
        raise FormatError(
            f"Truncated PFM payload: expected {expected} bytes, found {max(available, 0)}",
            offset=len(payload),
        )

    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    values = np.frombuffer(payload, dtype=dtype, count=width * height * channels, offset=data_start)
    raster = values.reshape(height, width, channels)[::-1]
    return RasterImage(raster.astype(np.float32))


def save_pfm(image: RasterImage, path: PathLike) -> None:
    """
    Write a raster as a little-endian PFM with bottom-up scanlines.

    Args:
        image: Raster with 1 or 3 channels
        path: Destination file
    """
    if image.channels not in (1, 3):
        raise DataError(f"PFM supports 1 or 3 channels, got {image.channels}")
    identifier = "PF" if image.channels == 3 else "Pf"
    header = f"{identifier}\n{image.width} {image.height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(image.data[::-1]).astype("<f4").tobytes()

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "wb") as handle:
        handle.write(header)
        handle.write(body)


# ----------------------------------------------------------------------------
# Colour transfer


def linear_to_srgb(values):
    """IEC 61966-2-1 transfer from linear to display values; input is clamped to [0, 1]."""
    x = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    encoded = np.where(
        x <= SRGB_KNEE_LINEAR,
        12.92 * x,
        1.055 * np.power(x, 1.0 / 2.4) - 0.055,
    )
    return encoded if encoded.ndim else float(encoded)


def srgb_to_linear(values):
    """Inverse of ``linear_to_srgb``."""
    x = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    decoded = np.where(
        x <= SRGB_KNEE_ENCODED,
        x / 12.92,
        np.power((x + 0.055) / 1.055, 2.4),
    )
    return decoded if decoded.ndim else float(decoded)


def save_png_srgb(image: RasterImage, path: PathLike) -> None:
    """Clamp, sRGB-encode and quantize a raster to an 8-bit PNG."""
    if image.channels not in (1, 3):
        raise DataError(f"PNG export supports 1 or 3 channels, got {image.channels}")
    encoded = linear_to_srgb(image.data)
    quantized = np.round(encoded * 255.0).astype(np.uint8)
    if image.channels == 1:
        picture = Image.fromarray(np.ascontiguousarray(quantized[:, :, 0]))
    else:
        picture = Image.fromarray(quantized)

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    picture.save(target, format="PNG")
    logger.debug(f"Saved PNG {target}")


# ----------------------------------------------------------------------------
# Geometry


def crop(image: RasterImage, x0: int, y0: int, width: int, height: int) -> RasterImage:
    """Extract the window with top-left corner (x0, y0)."""
    if width <= 0 or height <= 0:
        raise DataError(f"Crop size must be positive, got {width}x{height}")
    if x0 < 0 or y0 < 0 or x0 + width > image.width or y0 + height > image.height:
        raise DataError(
            f"Crop window ({x0},{y0},{width},{height}) outside "
            f"{image.width}x{image.height} raster"
        )
    return RasterImage(image.data[y0 : y0 + height, x0 : x0 + width])


def center_crop(image: RasterImage, width: int, height: int) -> RasterImage:
    x0 = (image.width - width) // 2
    y0 = (image.height - height) // 2
    return crop(image, x0, y0, width, height)


def flip(image: RasterImage, axis: str) -> RasterImage:
    """
    Mirror the raster data.

    Args:
        image: Input raster
        axis: ``"horizontal"`` mirrors columns (left-right), ``"vertical"`` mirrors rows
    """
    if axis == "horizontal":
        return RasterImage(image.data[:, ::-1])
    if axis == "vertical":
        return RasterImage(image.data[::-1, :])
    raise ValueError(f"Unknown flip axis: {axis}")


def center_patch_mean(image: RasterImage, width: int = 51, height: int = 76) -> np.ndarray:
    """Per-channel mean of the centered ``width`` x ``height`` patch."""
    patch = center_crop(image, width, height)
    return patch.data.astype(np.float64).reshape(-1, image.channels).mean(axis=0)
