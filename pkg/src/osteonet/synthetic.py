"""Procedural two-class texture dataset.

Stands in for real radiographs in benchmarks and smoke tests: one class
is built from low-spatial-frequency gratings (smooth, dense-looking
texture), the other from high-frequency gratings (fine, porous-looking
texture). Orientation, phase, and noise vary per image, so the classes
are only separable through their frequency signature.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import Rng

CLASS_NAMES = ("Normal", "Osteoporosis")
LOW_FREQ_CYCLES = (1.0, 3.0)      # cycles per image: smooth structure
HIGH_FREQ_PERIOD_PX = (3.0, 5.0)  # grating period in pixels: fine porous texture
# the fine band is pinned in pixels (well above Nyquist) so it survives
# bilinear resampling during augmentation at any image size


def texture_image(label: int, size: int, rng: Rng) -> np.ndarray:
    """One grayscale texture as u8 HxW; label selects the frequency band."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size), dtype=np.float64)
    for _ in range(2):
        if label == 0:
            cycles = rng.gen.uniform(*LOW_FREQ_CYCLES)
        else:
            cycles = size / rng.gen.uniform(*HIGH_FREQ_PERIOD_PX)
        theta = rng.gen.uniform(0.0, math.pi)
        phase = rng.gen.uniform(0.0, 2.0 * math.pi)
        freq = 2.0 * math.pi * cycles / size
        img += 0.5 * np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    img += 0.15 * rng.gen.standard_normal((size, size))
    img = 0.5 + 0.4 * img / np.abs(img).max()
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def generate_texture_dataset(root: str, per_class: int, size: int = 64,
                             seed: int = 0) -> str:
    """Write per_class PNGs for each class under root/<class>/; returns root."""
    base = Rng(seed)
    root_path = Path(root)
    for label, cname in enumerate(CLASS_NAMES):
        d = root_path / cname
        d.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            pix = texture_image(label, size, base.derive("texture", label, i))
            Image.fromarray(pix, mode="L").save(d / f"{cname.lower()}_{i:05d}.png")
    return str(root_path)
