"""
Figure grids in the "Input | Target | model samples" layout, one example per row.
"""
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from errors import ShapeMismatchError

logger = logging.getLogger(__name__)

HEADER_HEIGHT = 14
BACKGROUND = (255, 255, 255)
EMPTY_TILE = 128


def to_rgb_uint8(image: np.ndarray) -> np.ndarray:
    """[C, H, W] float in [0, 1] -> [H, W, 3] uint8"""
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if data.shape[0] == 1:
        data = np.repeat(data, 3, axis=0)
    return np.ascontiguousarray(data.transpose(1, 2, 0))


def tile_box(row: int, col: int, tile_h: int, tile_w: int, gap: int, header: int) -> Tuple[int, int, int, int]:
    """Pixel box (left, top, right, bottom) of a tile"""
    left = col * (tile_w + gap)
    top = header + row * (tile_h + gap)
    return left, top, left + tile_w, top + tile_h


def render_grid(rows: Sequence[Sequence[Optional[np.ndarray]]], labels: Optional[Sequence[Optional[str]]] = None,
                gap: int = 2) -> Image.Image:
    """
    Paste [C, H, W] tiles into one image. None tiles are drawn gray.
    Labels, one per column (None leaves a column unlabeled), go in a header band.
    """
    if not rows or not rows[0]:
        raise ShapeMismatchError("a grid needs at least one tile")
    n_cols = len(rows[0])
    tile_shape = next(t.shape for row in rows for t in row if t is not None)
    for row in rows:
        if len(row) != n_cols:
            raise ShapeMismatchError("all grid rows need the same number of columns")
        for tile in row:
            if tile is not None and tile.shape[-2:] != tile_shape[-2:]:
                raise ShapeMismatchError(f"tile shape {tile.shape} differs from {tile_shape}")

    tile_h, tile_w = tile_shape[-2:]
    header = HEADER_HEIGHT if labels else 0
    width = n_cols * tile_w + (n_cols - 1) * gap
    height = header + len(rows) * tile_h + (len(rows) - 1) * gap
    canvas = Image.new('RGB', (width, height), BACKGROUND)

    for r, row in enumerate(rows):
        for c, tile in enumerate(row):
            box = tile_box(r, c, tile_h, tile_w, gap, header)
            if tile is None:
                patch = Image.new('RGB', (tile_w, tile_h), (EMPTY_TILE,) * 3)
            else:
                patch = Image.fromarray(to_rgb_uint8(tile))
            canvas.paste(patch, box[:2])

    if labels:
        draw = ImageDraw.Draw(canvas)
        font = ImageFont.load_default()
        for c, label in enumerate(labels):
            if label:
                draw.text((c * (tile_w + gap) + 1, 1), label, fill=(0, 0, 0), font=font)
    return canvas


def figure_rows(inputs: np.ndarray, targets: np.ndarray, samples: Dict[str, np.ndarray],
                k_max: int = 3) -> Tuple[List[List[Optional[np.ndarray]]], List[Optional[str]]]:
    """
    Rows of [input_1..input_kmax, target, samples of each model...].

    inputs [N, K, C, H, W] with K <= k_max (missing inputs stay empty),
    targets [N, C, H, W], samples[name] [N, S, C, H, W].
    """
    labels: List[Optional[str]] = ['Input'] + [None] * (k_max - 1) + ['Target']
    for name, arr in samples.items():
        labels += [name] + [None] * (arr.shape[1] - 1)

    rows = []
    for n in range(targets.shape[0]):
        row: List[Optional[np.ndarray]] = [inputs[n, k] if k < inputs.shape[1] else None for k in range(k_max)]
        row.append(targets[n])
        for arr in samples.values():
            row.extend(arr[n, s] for s in range(arr.shape[1]))
        rows.append(row)
    return rows, labels


def save_grid(image: Image.Image, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    image.save(path)
    logger.info(f"✅ Saved grid {path}")
    return path
