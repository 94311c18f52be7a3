from histo_ssl.tissue.hsv_filter import (
    DEFAULT_HSV_RANGES,
    rgb_to_hsv8,
    tissue_coverage,
    tissue_mask,
)
from histo_ssl.tissue.manifest import build_manifest, read_manifest, write_manifest
from histo_ssl.tissue.raster_io import read_ppm, write_ppm
from histo_ssl.tissue.sampler import (
    BalancedSampler,
    balanced_sampler,
    targets_for_manifest,
)
from histo_ssl.tissue.synthetic import (
    gen_localized_feature_tiles,
    gen_synthetic_slide,
    gen_synthetic_slides,
    render_magnifications,
)
from histo_ssl.tissue.tiling import tile_grid

__all__ = [
    "DEFAULT_HSV_RANGES",
    "BalancedSampler",
    "balanced_sampler",
    "build_manifest",
    "gen_localized_feature_tiles",
    "gen_synthetic_slide",
    "gen_synthetic_slides",
    "read_manifest",
    "read_ppm",
    "render_magnifications",
    "rgb_to_hsv8",
    "tile_grid",
    "tissue_coverage",
    "targets_for_manifest",
    "tissue_mask",
    "write_manifest",
    "write_ppm",
]
