"""Decoding, resizing, normalization, and augmentation."""

import struct
import zlib

import numpy as np
import pytest

from osteonet.errors import DecodeError, ShapeMismatchError
from osteonet.preprocessing import (
    AugmentPolicy,
    RawImage,
    augment,
    decode_image,
    normalize,
    resize,
)
from osteonet.rng import Rng
from osteonet.tensor import Tensor

import oracles


def write_png(pixels: np.ndarray) -> bytes:
    """Minimal PNG encoder (filter 0 rows), independent of any image library."""
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    color_type = {1: 0, 3: 2}[c]

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    raw = b"".join(b"\x00" + pixels[y].tobytes() for y in range(h))
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


def write_png16(value: int, h: int = 2, w: int = 2) -> bytes:
    """16-bit grayscale PNG, used to exercise the unsupported-depth error."""
    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)
    row = b"\x00" + struct.pack(f">{w}H", *([value] * w))
    raw = row * h
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw)) + chunk(b"IEND", b""))


class TestDecode:
    def test_single_white_pixel(self):
        img = decode_image(write_png(np.full((1, 1, 3), 255, dtype=np.uint8)))
        assert (img.width, img.height, img.channels) == (1, 1, 3)
        assert np.array_equal(img.pixels, np.full((1, 1, 3), 255, dtype=np.uint8))

    def test_grayscale_replicated_to_three_channels(self):
        img = decode_image(write_png(np.full((2, 2), 7, dtype=np.uint8)))
        assert img.channels == 3
        assert np.array_equal(img.pixels, np.full((2, 2, 3), 7, dtype=np.uint8))

    def test_truncated_stream_is_a_decode_error(self):
        data = write_png(np.zeros((8, 8, 3), dtype=np.uint8))
        with pytest.raises(DecodeError):
            decode_image(data[: len(data) // 3])

    def test_garbage_bytes_rejected(self):
        with pytest.raises(DecodeError):
            decode_image(b"not an image at all")

    def test_16bit_depth_rejected(self):
        with pytest.raises(DecodeError, match="bit depth"):
            decode_image(write_png16(1000))

    def test_jpeg_roundtrip(self, tmp_path):
        # JPEG fixture written via Pillow; decode only needs to be close (lossy)
        from PIL import Image

        arr = np.full((16, 16, 3), 128, dtype=np.uint8)
        p = tmp_path / "x.jpg"
        Image.fromarray(arr).save(p, quality=95)
        img = decode_image(p.read_bytes())
        assert img.channels == 3
        assert abs(int(img.pixels.mean()) - 128) <= 2


class TestResize:
    def test_constant_source_stays_constant(self):
        for size in [(3, 5), (100, 40), (224, 224)]:
            src = RawImage(size[1], size[0], 3,
                           np.full((size[0], size[1], 3), 77, dtype=np.uint8))
            out = resize(src, 224, 224)
            assert out.pixels.shape == (224, 224, 3)
            assert np.all(out.pixels == 77)

    def test_matching_size_is_identity(self):
        rng = Rng(21)
        pix = rng.gen.integers(0, 256, (224, 224, 3)).astype(np.uint8)
        out = resize(RawImage(224, 224, 3, pix), 224, 224)
        assert np.array_equal(out.pixels, pix)

    def test_checkerboard_corners_and_interior_match_reference(self):
        pix = np.zeros((2, 2, 3), dtype=np.uint8)
        pix[0, 0] = pix[1, 1] = 0
        pix[0, 1] = pix[1, 0] = 255
        out = resize(RawImage(2, 2, 3, pix), 4, 4)
        assert np.array_equal(out.pixels[0, 0], pix[0, 0])
        assert np.array_equal(out.pixels[0, 3], pix[0, 1])
        assert np.array_equal(out.pixels[3, 0], pix[1, 0])
        assert np.array_equal(out.pixels[3, 3], pix[1, 1])
        ref = oracles.bilinear_resize_scalar(pix, 4, 4)
        assert np.max(np.abs(out.pixels.astype(int) - ref.astype(int))) <= 1

    def test_random_sources_match_scalar_reference(self):
        rng = Rng(22)
        for _ in range(5):
            h = int(rng.gen.integers(2, 9))
            w = int(rng.gen.integers(2, 9))
            pix = rng.gen.integers(0, 256, (h, w, 3)).astype(np.uint8)
            out = resize(RawImage(w, h, 3, pix), 7, 5)
            ref = oracles.bilinear_resize_scalar(pix, 7, 5)
            assert np.max(np.abs(out.pixels.astype(int) - ref.astype(int))) <= 1


class TestNormalize:
    def test_endpoints(self):
        pix = np.zeros((224, 224, 3), dtype=np.uint8)
        pix[0, 0] = 255
        out = normalize(RawImage(224, 224, 3, pix))
        assert out.data[0, 0, 0] == 1.0
        assert out.data[1, 1, 0] == 0.0

    def test_direct_division(self):
        pix = np.full((224, 224, 3), 51, dtype=np.uint8)
        out = normalize(RawImage(224, 224, 3, pix))
        assert abs(out.data[0, 0, 0] - 0.2) < 1e-7

    def test_range_for_random_images(self):
        rng = Rng(23)
        pix = rng.gen.integers(0, 256, (224, 224, 3)).astype(np.uint8)
        out = normalize(RawImage(224, 224, 3, pix))
        assert out.shape == (224, 224, 3)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_wrong_dims_rejected(self):
        pix = np.zeros((100, 224, 3), dtype=np.uint8)
        with pytest.raises(ShapeMismatchError):
            normalize(RawImage(224, 100, 3, pix))


def random_image_tensor(seed) -> Tensor:
    return Tensor(Rng(seed).gen.random((224, 224, 3)).astype(np.float32))


class TestAugment:
    def test_disabled_policy_returns_input_unchanged(self):
        x = random_image_tensor(24)
        out = augment(x, AugmentPolicy(enabled=False), Rng(1))
        assert out is x

    def test_identity_affine_within_1e6(self):
        x = random_image_tensor(25)
        policy = AugmentPolicy(rotation_deg_max=0, shift_frac_max=0,
                               shear_deg_max=0, zoom_frac_max=0, hflip_prob=0)
        out = augment(x, policy, Rng(2))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_forced_hflip_mirrors_columns_and_is_involution(self):
        x = random_image_tensor(26)
        policy = AugmentPolicy(rotation_deg_max=0, shift_frac_max=0,
                               shear_deg_max=0, zoom_frac_max=0, hflip_prob=1.0)
        once = augment(x, policy, Rng(3))
        np.testing.assert_allclose(once.data, x.data[:, ::-1, :], atol=1e-6)
        twice = augment(once, policy, Rng(4))
        np.testing.assert_allclose(twice.data, x.data, atol=1e-6)

    def test_shape_and_range_preserved(self):
        x = random_image_tensor(27)
        out = augment(x, AugmentPolicy(), Rng(5))
        assert out.shape == (224, 224, 3)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_same_seed_bitwise_identical(self):
        x = random_image_tensor(28)
        a = augment(x, AugmentPolicy(), Rng(6))
        b = augment(x, AugmentPolicy(), Rng(6))
        assert np.array_equal(a.data, b.data)

    def test_policy_validation(self):
        with pytest.raises(ValueError):
            AugmentPolicy(rotation_deg_max=-1)
        with pytest.raises(ValueError):
            AugmentPolicy(hflip_prob=1.5)
