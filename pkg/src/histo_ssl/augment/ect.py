"""
Crop geometry: extended-context translation and random resized crops.

Extended-context translation (ECT) samples a crop whose area is close to the
L x L target from a larger N x N source, so the final resize barely changes the
pixel scale; the view varies by where the crop sits, not by how much it is
zoomed. The random resized crop is the usual multi-crop baseline.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt

from histo_ssl.errors import ConfigError, ParameterError
from histo_ssl.tensor_kernel import Rng, bilinear_resize

Range = Tuple[float, float]

CROP_RESIZE_ATTEMPTS = 10
DEFAULT_CROP_ASPECT = (3.0 / 4.0, 4.0 / 3.0)
GLOBAL_CROP_SCALE = (0.32, 1.0)
LOCAL_CROP_SCALE = (0.05, 0.32)


@dataclass(frozen=True)
class CropRect:
    """Crop rectangle in source pixel coordinates"""

    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return (
            self.x >= 0
            and self.y >= 0
            and self.w >= 1
            and self.h >= 1
            and self.x + self.w <= width
            and self.y + self.h <= height
        )


def _check_range(name: str, value: Range) -> Range:
    lo, hi = float(value[0]), float(value[1])
    if not 0 < lo <= hi:
        raise ConfigError(f"{name} must be a positive interval (lo <= hi), got {value}")
    return lo, hi


@dataclass
class EctConfig:
    """Geometry of the multi-crop views"""

    source_size: int = 392
    global_size: int = 224
    local_size: int = 98
    scale_range: Range = (0.9, 1.1)
    aspect_range: Range = (0.95, 1.05)
    n_global: int = 2
    n_local: int = 8

    def __post_init__(self):
        self.scale_range = _check_range("scale range", self.scale_range)
        self.aspect_range = _check_range("aspect range", self.aspect_range)
        if not self.source_size >= self.global_size > self.local_size >= 1:
            raise ConfigError(
                "view sizes must satisfy source >= global > local >= 1, got "
                f"{self.source_size}, {self.global_size}, {self.local_size}"
            )
        if self.n_global < 1 or self.n_local < 0:
            raise ConfigError(
                f"need >= 1 global and >= 0 local views, got {self.n_global}, {self.n_local}"
            )
        for size in (self.global_size, self.local_size):
            w_max, h_max = _extreme_crop(size, self.scale_range, self.aspect_range)
            if max(w_max, h_max) > self.source_size:
                raise ConfigError(
                    f"a {size}px view with scale {self.scale_range} and aspect "
                    f"{self.aspect_range} needs up to {max(w_max, h_max)}px, "
                    f"larger than the {self.source_size}px source"
                )


def _extreme_crop(L: int, scale: Range, aspect: Range) -> Tuple[int, int]:
    """Largest crop width and height the sampling formula can produce."""
    return (
        round(L * math.sqrt(scale[1] * aspect[1])),
        round(L * math.sqrt(scale[1] / aspect[0])),
    )


def _draw(rng: Rng, lo: float, hi: float, size=None, log: bool = False):
    """Uniform (or log-uniform) draw that tolerates degenerate lo == hi."""
    if lo == hi:
        return lo if size is None else np.full(size, lo)
    if log:
        return np.exp(rng.uniform(math.log(lo), math.log(hi), size))
    return rng.uniform(lo, hi, size)


def sample_ect_rects(
    source_size: int, L: int, cfg: EctConfig, rng: Rng, n: int
) -> npt.NDArray[np.int64]:
    """Sample ``n`` ECT crop rectangles as an (n, 4) array of x, y, w, h."""
    s = _draw(rng, *cfg.scale_range, size=n)
    a = _draw(rng, *cfg.aspect_range, size=n, log=True)
    w = np.clip(np.rint(L * np.sqrt(s * a)), 1, source_size).astype(np.int64)
    h = np.clip(np.rint(L * np.sqrt(s / a)), 1, source_size).astype(np.int64)
    x = rng.integers(0, source_size - w + 1)
    y = rng.integers(0, source_size - h + 1)
    return np.stack([x, y, w, h], axis=1)


def sample_ect(
    source: npt.NDArray, L: int, cfg: EctConfig, rng: Rng
) -> Tuple[CropRect, npt.NDArray]:
    """One ECT view: translate a near-L-sized crop inside the source and
    resize it to L x L."""
    n_source = source.shape[0]
    if source.shape[1] != n_source:
        raise ParameterError(f"ECT sources must be square, got {source.shape[:2]}")
    w_max, h_max = _extreme_crop(L, cfg.scale_range, cfg.aspect_range)
    if max(w_max, h_max) > n_source:
        raise ConfigError(
            f"a {L}px ECT crop needs up to {max(w_max, h_max)}px, source is {n_source}px"
        )
    x, y, w, h = (int(v) for v in sample_ect_rects(n_source, L, cfg, rng, 1)[0])
    rect = CropRect(x, y, w, h)
    return rect, bilinear_resize(source[y : y + h, x : x + w], L, L)


def sample_crop_resize(
    image: npt.NDArray,
    L: int,
    scale_range: Range = GLOBAL_CROP_SCALE,
    aspect_range: Range = DEFAULT_CROP_ASPECT,
    rng: Optional[Rng] = None,
) -> Tuple[CropRect, npt.NDArray]:
    """Random resized crop: area fraction of the whole input, log-uniform
    aspect, up to 10 attempts before a centre crop."""
    if rng is None:
        raise ParameterError("sample_crop_resize needs an rng")
    scale_range = _check_range("scale range", scale_range)
    aspect_range = _check_range("aspect range", aspect_range)
    height, width = image.shape[:2]
    area = height * width

    rect = None
    for _ in range(CROP_RESIZE_ATTEMPTS):
        target_area = area * float(_draw(rng, *scale_range))
        aspect = float(_draw(rng, *aspect_range, log=True))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            y = int(rng.integers(0, height - h + 1))
            x = int(rng.integers(0, width - w + 1))
            rect = CropRect(x, y, w, h)
            break

    if rect is None:
        # Centre crop at the closest allowed aspect ratio
        in_ratio = width / height
        if in_ratio < aspect_range[0]:
            w, h = width, int(round(width / aspect_range[0]))
        elif in_ratio > aspect_range[1]:
            w, h = int(round(height * aspect_range[1])), height
        else:
            w, h = width, height
        rect = CropRect((width - w) // 2, (height - h) // 2, w, h)

    crop = image[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w]
    return rect, bilinear_resize(crop, L, L)


def pair_iou(r1: CropRect, r2: CropRect) -> float:
    """Intersection over union of two rectangles in the same frame."""
    ix = max(0, min(r1.x + r1.w, r2.x + r2.w) - max(r1.x, r2.x))
    iy = max(0, min(r1.y + r1.h, r2.y + r2.h) - max(r1.y, r2.y))
    intersection = ix * iy
    union = r1.area + r2.area - intersection
    return intersection / union if union > 0 else 0.0


def _pair_iou_arrays(a: npt.NDArray, b: npt.NDArray) -> npt.NDArray[np.float64]:
    ix = np.clip(
        np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]),
        0,
        None,
    )
    iy = np.clip(
        np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]),
        0,
        None,
    )
    intersection = (ix * iy).astype(np.float64)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - intersection
    return intersection / union


def expected_iou(cfg: EctConfig, n_samples: int, rng: Rng) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of the IoU between two independent
    global ECT crops."""
    if n_samples < 1000:
        raise ParameterError(f"expected_iou needs >= 1000 samples, got {n_samples}")
    first = sample_ect_rects(cfg.source_size, cfg.global_size, cfg, rng, n_samples)
    second = sample_ect_rects(cfg.source_size, cfg.global_size, cfg, rng, n_samples)
    iou = _pair_iou_arrays(first, second)
    return float(iou.mean()), float(iou.std(ddof=1) / math.sqrt(n_samples))


def adjusted_scale_range(cfg: EctConfig, L: Optional[int] = None) -> Range:
    """Crop-and-resize scale range equivalent to the ECT scale range: the area
    fraction of the whole source that an ECT crop covers."""
    L = cfg.global_size if L is None else L
    ratio = (L / cfg.source_size) ** 2
    return cfg.scale_range[0] * ratio, cfg.scale_range[1] * ratio
