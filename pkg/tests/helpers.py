"""Image builders shared by the tests"""
from pathlib import Path

import numpy as np
from PIL import Image

from color_pipeline import ColorState, PlanarImage


def constant_image(value, size=(8, 8), state=ColorState.SRGB_ENCODED) -> PlanarImage:
    data = np.empty(size + (3,))
    data[...] = value
    return PlanarImage(data, state)


def gradient_image(size=(16, 24), state=ColorState.SRGB_ENCODED) -> PlanarImage:
    h, w = size
    v, u = np.mgrid[0:h, 0:w]
    data = np.stack([0.2 + 0.6 * u / (w - 1), 0.3 + 0.4 * v / (h - 1),
                     0.5 + 0.3 * (u + v) / (h + w - 2)], axis=2)
    return PlanarImage(data, state)


def write_png(path: Path, array: np.ndarray) -> Path:
    Image.fromarray(array).save(path, format="PNG")
    return path
