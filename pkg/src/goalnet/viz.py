"""Raster figures: observed track in cyan, ground truth in red, predicted modes in green."""
from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .core import Sample, ShapeError
from .trajectory import PredictionBundle

OBSERVED_COLOR = (0, 255, 255)
GT_COLOR = (255, 0, 0)
PRED_COLOR = (0, 255, 0)
BOX_COLOR = (255, 255, 0)


def _line(draw: ImageDraw.ImageDraw, pts: np.ndarray, color, width: int) -> None:
    pts = [tuple(map(float, p)) for p in np.asarray(pts)]
    if len(pts) == 1:
        x, y = pts[0]
        draw.ellipse([x - width, y - width, x + width, y + width], fill=color)
    elif pts:
        draw.line(pts, fill=color, width=width, joint="curve")


def render_prediction(bundle: PredictionBundle | None, sample: Sample, image=None, width: int = 2,
                      box_mode: int | None = None, box_every: int = 15) -> Image.Image:
    """Draw one sample's tracks over ``image`` (array, PIL image, or ``None`` for black).

    Predictions are drawn first so the observed and ground-truth tracks stay
    visible on top.  ``box_mode`` overlays that mode's predicted boxes every
    ``box_every`` steps (requires ``per_mode_bbox``).
    """
    w, h = sample.image_size
    if image is None:
        canvas = Image.new("RGB", (w, h))
    else:
        canvas = image.convert("RGB") if isinstance(image, Image.Image) else Image.fromarray(np.asarray(image))
        canvas = canvas.convert("RGB")
        if canvas.size != (w, h):
            raise ShapeError(f"image is {canvas.size[0]}x{canvas.size[1]}, sample frame is {w}x{h}")
    draw = ImageDraw.Draw(canvas)
    if bundle is not None:
        for mode in bundle.modes:
            _line(draw, mode, PRED_COLOR, width)
        if box_mode is not None:
            if bundle.per_mode_bbox is None:
                raise ValueError("bundle has no per-mode boxes to overlay")
            boxes = bundle.per_mode_bbox[box_mode]
            for b in list(boxes[box_every - 1::box_every]) + [boxes[-1]]:
                draw.rectangle(tuple(map(float, b)), outline=BOX_COLOR, width=1)
    _line(draw, sample.future.centers(), GT_COLOR, width)
    _line(draw, sample.observed.centers(), OBSERVED_COLOR, width)
    return canvas
