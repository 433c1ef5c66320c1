"""Image decoding, resizing, normalization, and stochastic augmentation.

The ingestion contract of the whole pipeline is
``normalize(resize(decode_image(bytes)))``: a float32 tensor of the
configured spatial size, channels replicated to RGB, values in [0, 1].
Augmentation draws one random affine transform per image (rotation,
shift, shear, zoom, optional horizontal flip) and applies it by inverse
mapping with bilinear sampling and edge-clamp padding, so it neither
changes the shape nor introduces values outside the input range.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, ShapeMismatchError
from .rng import Rng
from .tensor import Tensor


@dataclass
class RawImage:
    """Decoded 8-bit pixels, shape (height, width, channels)."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DecodeError(f"channels must be 1 or 3, got {self.channels}")
        expected = (self.height, self.width, self.channels)
        if self.pixels.shape != expected or self.pixels.dtype != np.uint8:
            raise DecodeError(
                f"pixel buffer is {self.pixels.dtype}{self.pixels.shape}, expected u8{expected}"
            )


@dataclass(frozen=True)
class AugmentPolicy:
    rotation_deg_max: float = 10.0
    shift_frac_max: float = 0.1
    shear_deg_max: float = 10.0
    zoom_frac_max: float = 0.1
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        for name in ("rotation_deg_max", "shift_frac_max", "shear_deg_max", "zoom_frac_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")


_16BIT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def decode_image(data: bytes) -> RawImage:
    """Decode PNG or 8-bit JPEG bytes; grayscale is replicated to 3 channels."""
    try:
        img = Image.open(io.BytesIO(data))
        if img.format not in ("PNG", "JPEG"):
            raise DecodeError(f"unsupported container {img.format!r} (PNG/JPEG only)")
        if img.mode in _16BIT_MODES:
            raise DecodeError(f"unsupported bit depth (mode {img.mode!r}); 8-bit only")
        img.load()
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode image: {exc}") from exc

    if img.mode != "RGB":
        img = img.convert("RGB")
    arr = np.asarray(img, dtype=np.uint8)
    return RawImage(width=arr.shape[1], height=arr.shape[0], channels=3, pixels=arr)


def read_image(path: str) -> RawImage:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    return decode_image(data)


def _sample_grid(n_out: int, n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel-centred source coordinates, clamped to the valid range
    coords = (np.arange(n_out) + 0.5) * (n_src / n_out) - 0.5
    coords = np.clip(coords, 0.0, n_src - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, coords - lo


def resize(img: RawImage, out_h: int = 224, out_w: int = 224) -> RawImage:
    """Bilinear resize with half-pixel-centred sampling.

    A source already at the target size is returned value-identical, and
    constant images stay constant.
    """
    src = img.pixels.astype(np.float64)
    y0, y1, fy = _sample_grid(out_h, img.height)
    x0, x1, fx = _sample_grid(out_w, img.width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    pixels = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return RawImage(width=out_w, height=out_h, channels=img.channels, pixels=pixels)


def normalize(img: RawImage, height: int = 224, width: int = 224) -> Tensor:
    """Map u8 pixels to float32 in [0, 1] by dividing by 255."""
    if (img.height, img.width, img.channels) != (height, width, 3):
        raise ShapeMismatchError(
            f"expected {height}x{width}x3 image, got {img.height}x{img.width}x{img.channels}"
        )
    return Tensor(img.pixels.astype(np.float32) / np.float32(255.0))


def _affine_matrix(policy: AugmentPolicy, rng: Rng, size: tuple[int, int]) -> np.ndarray:
    """Forward source->output 3x3 transform about the image centre.

    Draw order is fixed (rotation, shift x/y, shear, zoom, flip) so a
    given rng always produces the same transform.
    """
    h, w = size
    rot = math.radians(rng.gen.uniform(-policy.rotation_deg_max, policy.rotation_deg_max))
    tx = rng.gen.uniform(-policy.shift_frac_max, policy.shift_frac_max) * w
    ty = rng.gen.uniform(-policy.shift_frac_max, policy.shift_frac_max) * h
    shear = math.radians(rng.gen.uniform(-policy.shear_deg_max, policy.shear_deg_max))
    zoom = rng.gen.uniform(1.0 - policy.zoom_frac_max, 1.0 + policy.zoom_frac_max)
    flip = rng.gen.random() < policy.hflip_prob

    def mat(a, b, c, d, e, f):
        return np.array([[a, b, c], [d, e, f], [0.0, 0.0, 1.0]])

    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    to_centre = mat(1, 0, -cx, 0, 1, -cy)
    from_centre = mat(1, 0, cx, 0, 1, cy)
    flip_m = mat(-1.0 if flip else 1.0, 0, 0, 0, 1, 0)
    zoom_m = mat(zoom, 0, 0, 0, zoom, 0)
    shear_m = mat(1, math.tan(shear), 0, 0, 1, 0)
    rot_m = mat(math.cos(rot), -math.sin(rot), 0, math.sin(rot), math.cos(rot), 0)
    shift_m = mat(1, 0, tx, 0, 1, ty)
    return from_centre @ shift_m @ rot_m @ shear_m @ zoom_m @ flip_m @ to_centre


def augment(img: Tensor, policy: AugmentPolicy, rng: Rng) -> Tensor:
    """One random affine warp of a normalized H x W x 3 tensor.

    Disabled policies return the input unchanged. Out-of-range samples
    clamp to the nearest edge pixel, so the value range never grows.
    """
    if not policy.enabled:
        return img
    if img.data.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatchError(f"augment expects HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    forward = _affine_matrix(policy, rng, (h, w))
    inv = np.linalg.inv(forward)

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    src_x = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    src_y = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    src_x = np.clip(src_x, 0.0, w - 1)
    src_y = np.clip(src_y, 0.0, h - 1)

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (src_x - x0)[..., None].astype(np.float32)
    fy = (src_y - y0)[..., None].astype(np.float32)

    data = img.data
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bot = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return Tensor(top * (1 - fy) + bot * fy)


def ingest_file(path: str, height: int, width: int) -> Tensor:
    """File path -> normalized tensor: the model's sole ingestion route."""
    return normalize(resize(read_image(path), height, width), height, width)
