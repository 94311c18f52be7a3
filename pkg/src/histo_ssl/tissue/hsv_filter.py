"""HSV tissue filter on the 8-bit half-degree hue scale (h in [0, 180))."""

from typing import Sequence, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import DimensionError

# Inclusive (lo, hi) intervals for hue, saturation and value
DEFAULT_HSV_RANGES: Tuple[Tuple[int, int], ...] = ((90, 180), (8, 255), (103, 255))


def _round_half_up(numerator: npt.NDArray, denominator: npt.NDArray) -> npt.NDArray:
    """Exact round(numerator / denominator) for non-negative integer ratios."""
    return (2 * numerator + denominator) // (2 * denominator)


def rgb_to_hsv8(pixels: npt.ArrayLike) -> npt.NDArray[np.int64]:
    """Convert 8-bit RGB (shape (..., 3)) to integer HSV with hue on 0-180.

    Computed in integer arithmetic, so there is no floating point tie
    ambiguity: values are rounded half up to the nearest integer.
    """
    rgb = np.asarray(pixels, dtype=np.int64)
    if rgb.shape[-1] != 3:
        raise DimensionError(f"expected RGB triples in the last axis, got shape {rgb.shape}")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = np.max(rgb, axis=-1)
    diff = v - np.min(rgb, axis=-1)

    safe_v = np.where(v == 0, 1, v)
    s = np.where(v == 0, 0, _round_half_up(255 * diff, safe_v))

    safe_diff = np.where(diff == 0, 1, diff)
    numerator = np.where(
        v == r,
        30 * (g - b),
        np.where(v == g, 30 * (b - r) + 60 * diff, 30 * (r - g) + 120 * diff),
    )
    numerator = np.where(numerator < 0, numerator + 180 * diff, numerator)
    h = _round_half_up(numerator, safe_diff) % 180
    h = np.where(diff == 0, 0, h)

    return np.stack([h, s, v], axis=-1)


def tissue_mask(
    tile: npt.NDArray, ranges: Sequence[Tuple[int, int]] = DEFAULT_HSV_RANGES
) -> npt.NDArray[np.bool_]:
    """Per-pixel tissue classification: inside all three HSV intervals."""
    hsv = rgb_to_hsv8(tile)
    inside = np.ones(hsv.shape[:-1], dtype=bool)
    for channel, (lo, hi) in enumerate(ranges):
        inside &= (hsv[..., channel] >= lo) & (hsv[..., channel] <= hi)
    return inside


def tissue_coverage(
    tile: npt.NDArray, ranges: Sequence[Tuple[int, int]] = DEFAULT_HSV_RANGES
) -> float:
    """Fraction of pixels whose HSV values fall inside all three intervals."""
    mask = tissue_mask(tile, ranges)
    if mask.size == 0:
        return 0.0
    return float(np.count_nonzero(mask)) / mask.size
