from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.dataset_types import TILE_SIZES, UNKNOWN, SlideRaster, TileRecord
from histo_ssl.errors import ParameterError
from histo_ssl.tissue.hsv_filter import DEFAULT_HSV_RANGES, tissue_coverage
from histo_ssl.tissue.synthetic import class_name, render_magnifications


def tile_grid(
    slide: SlideRaster,
    L: int,
    min_coverage: float,
    magnification: Optional[int] = None,
    ranges: Sequence[Tuple[int, int]] = DEFAULT_HSV_RANGES,
    rendered: Optional[Dict[int, Tuple[npt.NDArray, npt.NDArray, npt.NDArray]]] = None,
) -> List[TileRecord]:
    """Cut non-overlapping L x L grid tiles and keep those with enough tissue.

    Partial strips along the right and bottom borders are dropped. A slide
    smaller than one tile gives an empty list. ``magnification`` defaults to the
    highest magnification the slide carries. Pass ``rendered`` (the output of
    ``render_magnifications``) to tile several magnifications of one slide
    without rendering it again.
    """
    if L not in TILE_SIZES:
        raise ParameterError(f"tile size must be one of {TILE_SIZES}, got {L}")
    if not 0.0 <= min_coverage <= 1.0:
        raise ParameterError(f"min coverage must be in [0, 1], got {min_coverage}")

    if magnification is None:
        magnification = max(slide.available_magnifications)
    if rendered is None:
        rendered = render_magnifications(slide)
    if magnification not in rendered:
        raise ParameterError(
            f"slide {slide.slide_id} has no {magnification}x magnification"
        )
    pixels, labels, background = rendered[magnification]

    tiles = []
    h, w = pixels.shape[:2]
    for y in range(0, h - L + 1, L):
        for x in range(0, w - L + 1, L):
            window = pixels[y : y + L, x : x + L]
            coverage = tissue_coverage(window, ranges)
            if coverage < min_coverage:
                continue
            tissue = labels[y : y + L, x : x + L][~background[y : y + L, x : x + L]]
            tissue_label = (
                class_name(int(np.bincount(tissue).argmax())) if tissue.size else UNKNOWN
            )
            tiles.append(
                TileRecord(
                    pixels=window.copy(),
                    slide_id=slide.slide_id,
                    magnification=magnification,
                    stain=slide.stain,
                    tissue_label=tissue_label,
                    diagnosis=slide.diagnosis,
                    coverage=coverage,
                    x=x,
                    y=y,
                    patient_id=slide.patient_id,
                )
            )
    return tiles
