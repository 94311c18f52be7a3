"""
Synthetic Slide Generator

Generates procedural whole-slide stand-ins (textured tissue regions in H&E- or
IHC-like palettes on a near-white background) for training and probing without
access to real slides.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.ndimage import gaussian_filter

from histo_ssl.dataset_types import (
    MAGNIFICATIONS,
    OBSERVED_DIAGNOSIS_FREQUENCIES,
    UNKNOWN,
    SlideRaster,
    SlideSpec,
    Stain,
)
from histo_ssl.errors import ParameterError
from histo_ssl.tensor_kernel import Rng, bilinear_resize

logger = logging.getLogger(__name__)

TEXTURE_KINDS = ("blob", "stripe", "dot", "mesh")
BACKGROUND_RGB = np.array([242.0, 240.0, 244.0])
PALETTES = {
    Stain.HE: {
        "base": np.array([232.0, 150.0, 200.0]),  # eosin pink
        "ink": np.array([118.0, 72.0, 165.0]),  # hematoxylin purple
    },
    Stain.IHC: {
        "base": np.array([196.0, 200.0, 236.0]),  # pale counterstain
        "ink": np.array([92.0, 104.0, 178.0]),  # hematoxylin blue
        "accent": np.array([160.0, 110.0, 70.0]),  # DAB brown
    },
}
MIN_SLIDE_SIZE = 224


def class_name(label: int) -> str:
    return f"class_{label}"


def _smooth_noise(shape: Tuple[int, int], sigma: float, rng: Rng) -> npt.NDArray:
    """Gaussian-smoothed noise rescaled to unit standard deviation."""
    field = gaussian_filter(rng.normal(size=shape), sigma=sigma)
    return field / (field.std() + 1e-12)


def _point_field(
    shape: Tuple[int, int], density: float, sigma: float, rng: Rng
) -> npt.NDArray:
    """Sparse random points blurred into soft blobs, saturating towards 1."""
    points = (rng.random(shape) < density).astype(np.float64)
    blurred = gaussian_filter(points, sigma=sigma)
    peak = 1.0 / (2.0 * np.pi * sigma**2)
    return 1.0 - np.exp(-blurred / peak)


def _texture_field(label: int, shape: Tuple[int, int], rng: Rng) -> npt.NDArray:
    """Ink intensity in [0, 1] for texture class ``label``."""
    kind = TEXTURE_KINDS[label % len(TEXTURE_KINDS)]
    scale = 1.0 + label // len(TEXTURE_KINDS)
    h, w = shape

    if kind == "blob":
        # Large nuclei-like blobs
        return _point_field(shape, 0.0012 / scale**2, 3.5 * scale, rng)

    if kind == "dot":
        # Small dense lymphocyte-like dots
        return _point_field(shape, 0.008 / scale**2, 1.2 * scale, rng)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "stripe":
        # Oriented fibres with a slowly varying phase
        theta = rng.uniform(0.0, np.pi)
        period = 12.0 * scale
        phase = _smooth_noise(shape, 24.0, rng) * 1.5
        wave = np.sin(
            2.0 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase
        )
        return (0.5 + 0.5 * wave) ** 3

    # mesh: glandular lattice
    period = 20.0 * scale
    lattice = np.abs(np.sin(np.pi * xx / period)) * np.abs(np.sin(np.pi * yy / period))
    return 1.0 - lattice**0.5


def _label_map(spec: SlideSpec, rng: Rng) -> npt.NDArray[np.int16]:
    """Voronoi regions with wobbly borders; every class owns at least one region."""
    size = spec.size
    seeds = rng.uniform(0.0, size, size=(spec.n_regions, 2))
    classes = np.concatenate(
        [
            rng.permutation(spec.n_classes),
            rng.integers(0, spec.n_classes, size=spec.n_regions - spec.n_classes),
        ]
    )
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    wobble = size / 24.0
    yy += (_smooth_noise((size, size), size / 16.0, rng) * wobble).astype(np.float32)
    xx += (_smooth_noise((size, size), size / 16.0, rng) * wobble).astype(np.float32)
    best = np.full((size, size), np.inf, dtype=np.float32)
    region = np.zeros((size, size), dtype=np.int16)
    for index, (sy, sx) in enumerate(seeds):
        dist = (yy - sy) ** 2 + (xx - sx) ** 2
        closer = dist < best
        best[closer] = dist[closer]
        region[closer] = index
    # Pin each seed pixel to its own region so no class can vanish
    for index, (sy, sx) in enumerate(seeds):
        region[min(int(sy), size - 1), min(int(sx), size - 1)] = index
    return classes[region].astype(np.int16)


def _background_mask(spec: SlideSpec, rng: Rng) -> npt.NDArray[np.bool_]:
    size = spec.size
    if spec.background_fraction >= 1.0:
        return np.ones((size, size), dtype=bool)
    if spec.background_fraction <= 0.0:
        return np.zeros((size, size), dtype=bool)
    field = gaussian_filter(rng.normal(size=(size, size)), sigma=size / 10.0)
    threshold = np.quantile(field, spec.background_fraction)
    return field < threshold


def gen_synthetic_slide(seed: int, spec: SlideSpec) -> SlideRaster:
    """
    Generate one synthetic slide at 40x.

    Parameters
    ----------
    seed : int
        Random seed; the same (seed, spec) always gives the same slide
    spec : SlideSpec
        Size, class count, background fraction and optional fixed metadata

    Returns
    -------
    SlideRaster
        RGB pixels, per-pixel texture classes and slide metadata
    """
    if spec.size < MIN_SLIDE_SIZE:
        raise ParameterError(
            f"slide size {spec.size} is smaller than one {MIN_SLIDE_SIZE}px tile"
        )
    rng = Rng(seed)
    meta_rng, label_rng, texture_rng, noise_rng = (rng.fork(i) for i in range(4))

    stain = spec.stain
    if stain is None:
        stain = Stain.IHC if meta_rng.random() < spec.ihc_probability else Stain.HE
    diagnosis = spec.diagnosis
    if diagnosis is None:
        options = list(OBSERVED_DIAGNOSIS_FREQUENCIES)
        probabilities = np.array([OBSERVED_DIAGNOSIS_FREQUENCIES[d] for d in options])
        diagnosis = options[meta_rng.choice(len(options), p=probabilities)]
    magnifications = spec.magnifications
    if magnifications is None:
        has_40x = meta_rng.random() >= spec.missing_40x_probability
        magnifications = MAGNIFICATIONS if has_40x else MAGNIFICATIONS[1:]

    labels = _label_map(spec, label_rng)
    background = _background_mask(spec, label_rng.fork(0))
    shape = labels.shape

    palette = PALETTES[stain]
    ink = np.zeros(shape, dtype=np.float64)
    for label in range(spec.n_classes):
        inside = labels == label
        if not inside.any():
            continue
        field = _texture_field(label, shape, texture_rng.fork(label))
        ink[inside] = field[inside]

    pixels = palette["base"] * (1.0 - ink[..., None]) + palette["ink"] * ink[..., None]
    if stain is Stain.IHC:
        dab = _point_field(shape, 0.0006, 4.0, texture_rng.fork(1000)) > 0.6
        pixels[dab] = palette["accent"]
    pixels += noise_rng.normal(0.0, spec.noise, size=pixels.shape)
    pixels[background] = BACKGROUND_RGB + noise_rng.normal(
        0.0, 1.0, size=(int(background.sum()), 3)
    )
    pixels = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)

    tissue_labels = labels[~background]
    if tissue_labels.size:
        tissue_label = class_name(int(np.bincount(tissue_labels).argmax()))
    else:
        tissue_label = UNKNOWN

    return SlideRaster(
        pixels=pixels,
        slide_id=f"slide_{seed:06d}",
        available_magnifications=tuple(sorted(magnifications, reverse=True)),
        stain=stain,
        tissue_label=tissue_label,
        diagnosis=diagnosis,
        label_map=labels,
        background_mask=background,
        patient_id=f"patient_{seed // 2:06d}",
    )


def gen_synthetic_slides(
    seeds: Sequence[int], spec: SlideSpec, workers: int = 1
) -> List[SlideRaster]:
    """Generate slides for each seed, in parallel when ``workers`` > 1."""
    logger.info(f"Generating {len(seeds)} synthetic slides with {workers} worker(s)")
    if workers <= 1:
        return [gen_synthetic_slide(seed, spec) for seed in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(gen_synthetic_slide, seeds, [spec] * len(seeds)))


def render_magnifications(
    slide: SlideRaster,
) -> Dict[int, Tuple[npt.NDArray, npt.NDArray, npt.NDArray]]:
    """Rasters at each available magnification.

    Each halving of magnification is one 2x bilinear downsample of the 40x
    raster. Returns mag -> (pixels, label map, background mask).
    """
    h, w = slide.shape
    rendered = {}
    for magnification in slide.available_magnifications:
        factor = 40 // magnification
        if factor == 1:
            rendered[magnification] = (
                slide.pixels,
                slide.label_map,
                slide.background_mask,
            )
            continue
        out_h, out_w = max(1, h // factor), max(1, w // factor)
        pixels = bilinear_resize(slide.pixels, out_h, out_w)
        offset = factor // 2
        labels = slide.label_map[offset::factor, offset::factor][:out_h, :out_w]
        background = slide.background_mask[offset::factor, offset::factor][
            :out_h, :out_w
        ]
        rendered[magnification] = (pixels, labels, background)
    return rendered


def gen_localized_feature_tiles(
    n: int, size: int, rng: Rng
) -> Tuple[npt.NDArray[np.uint8], npt.NDArray[np.int64]]:
    """
    Tiles whose label depends on a small feature confined to one quadrant.

    Every tile shares the same stromal background texture; positives carry a
    cluster of dark mitosis-like figures in one random quadrant.

    Returns
    -------
    tuple
        (n x size x size x 3 uint8 tiles, n binary labels)
    """
    palette = PALETTES[Stain.HE]
    labels = np.arange(n) % 2
    labels = rng.permutation(labels)
    tiles = np.empty((n, size, size, 3), dtype=np.uint8)
    half = size // 2
    yy, xx = np.mgrid[0:half, 0:half].astype(np.float64)
    sigma = max(1.5, size / 48.0)
    for index in range(n):
        tile_rng = rng.fork(index)
        ink = _texture_field(1, (size, size), tile_rng)
        pixels = palette["base"] * (1.0 - ink[..., None]) + palette["ink"] * ink[..., None]
        if labels[index] == 1:
            qy, qx = tile_rng.integers(0, 2, size=2)
            figure = np.zeros((half, half))
            for _ in range(4):
                cy, cx = tile_rng.uniform(half * 0.2, half * 0.8, size=2)
                figure = np.maximum(
                    figure, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
                )
            dark = np.array([60.0, 30.0, 90.0])
            block = pixels[qy * half : (qy + 1) * half, qx * half : (qx + 1) * half]
            block[:] = block * (1.0 - figure[..., None]) + dark * figure[..., None]
        pixels += tile_rng.normal(0.0, 4.0, size=pixels.shape)
        tiles[index] = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return tiles, labels.astype(np.int64)
