import io
import logging
import os
from typing import Optional

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PGM_MAGIC = b"P5"


class ImageFormatError(ValueError):
    pass


def image_to_bytes(image: Image.Image, format: str = "PNG") -> bytes:
    with io.BytesIO() as output:
        if format == "PNG":
            image.save(output, format=format, compress_level=9)
        else:
            image.save(output, format=format)
        return output.getvalue()


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    "Quantise [0, 1] intensities to 8 bits."
    return np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path: str):
    "Write a 2D [0, 1] array as an 8-bit binary PGM."
    Image.fromarray(to_uint8(pixels)).save(path, format="PPM")


def read_pgm(path: str, shape: Optional[tuple] = None) -> np.ndarray:
    """Read an 8-bit binary PGM ("P5") as float32 values in [0, 1].

    `shape` is the expected (height, width).
    """
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic != PGM_MAGIC:
        raise ImageFormatError(f"{path}: not a binary PGM (magic {magic!r})")

    with Image.open(path) as im:
        if im.mode != "L":
            raise ImageFormatError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        width, height = im.size
        if shape is not None and (height, width) != tuple(shape):
            raise ImageFormatError(f"{path}: image is {width}x{height}, expected {shape[1]}x{shape[0]}")
        return np.asarray(im, dtype=np.float32) / 255.0


def make_grid(rows, scale: int = 4, padding: int = 1) -> Image.Image:
    """Tile rows of equally sized [0, 1] grayscale images into one picture."""
    rows = [[np.asarray(img).reshape(np.asarray(img).shape[-2:]) for img in row] for row in rows]
    if not rows or not rows[0]:
        raise ValueError("make_grid needs at least one image")
    h, w = rows[0][0].shape
    n_cols = max(len(row) for row in rows)
    cell_h, cell_w = h * scale + padding, w * scale + padding
    canvas = np.full((len(rows) * cell_h + padding, n_cols * cell_w + padding), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            tile = to_uint8(img).repeat(scale, axis=0).repeat(scale, axis=1)
            top, left = padding + r * cell_h, padding + c * cell_w
            canvas[top : top + h * scale, left : left + w * scale] = tile
    return Image.fromarray(canvas)


def save_reconstruction_grid(originals: np.ndarray, reconstructions: np.ndarray, path: str, count: int = 8):
    "Originals in the first row, their reconstructions in the second."
    count = min(count, len(originals))
    grid = make_grid([list(originals[:count]), list(reconstructions[:count])])
    with open(path, "wb") as f:
        f.write(image_to_bytes(grid))
    logger.info(f"Wrote reconstruction grid of {count} images to {path}")


def svg_to_png(svg_path: str, png_path: Optional[str] = None, scale: float = 2.0) -> str:
    "Rasterise an SVG chart next to it."
    import cairosvg

    png_path = png_path or os.path.splitext(svg_path)[0] + ".png"
    with open(svg_path, "rb") as f:
        png_image = cairosvg.svg2png(bytestring=f.read(), scale=scale)
    with open(png_path, "wb") as f:
        f.write(png_image)
    return png_path
