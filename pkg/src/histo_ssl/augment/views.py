from dataclasses import dataclass, field
from enum import Enum
from typing import List

import numpy as np
import numpy.typing as npt

from histo_ssl.augment.ect import (
    DEFAULT_CROP_ASPECT,
    GLOBAL_CROP_SCALE,
    LOCAL_CROP_SCALE,
    CropRect,
    EctConfig,
    sample_crop_resize,
    sample_ect,
)
from histo_ssl.augment.photometric import PhotometricPolicy, apply_photometric
from histo_ssl.errors import ParameterError
from histo_ssl.tensor_kernel import Rng


class ViewMethod(Enum):
    """How view geometry is sampled"""

    ECT = "ect"
    CROP_RESIZE = "crop_resize"


@dataclass
class ViewSet:
    """Multi-crop views of one source tile"""

    global_views: List[npt.NDArray[np.uint8]] = field(default_factory=list)
    global_rects: List[CropRect] = field(default_factory=list)
    local_views: List[npt.NDArray[np.uint8]] = field(default_factory=list)
    local_rects: List[CropRect] = field(default_factory=list)
    photometric_log: List[List[str]] = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.global_views) + len(self.local_views)


def make_views(
    tile: npt.NDArray[np.uint8],
    policy: PhotometricPolicy,
    cfg: EctConfig,
    rng: Rng,
    method: ViewMethod | str = ViewMethod.ECT,
) -> ViewSet:
    """
    Build the global and local views of one extended-context tile.

    With ``method="ect"`` every view is an ECT crop of the full N x N source.
    With ``method="crop_resize"`` the views are random resized crops of the
    central L_g x L_g region, the usual multi-crop recipe on a plain tile;
    rectangles are still reported in source coordinates.

    Every view draws from its own forked stream, so view k does not depend on
    how much randomness views 0..k-1 consumed.
    """
    method = ViewMethod(method)
    n_source = cfg.source_size
    if tile.shape[:2] != (n_source, n_source):
        raise ParameterError(
            f"expected a {n_source}x{n_source} source tile, got {tile.shape[:2]}"
        )

    if method is ViewMethod.CROP_RESIZE:
        offset = (n_source - cfg.global_size) // 2
        centre = tile[offset : offset + cfg.global_size, offset : offset + cfg.global_size]

    views = ViewSet()
    specs = [(True, cfg.global_size)] * cfg.n_global + [(False, cfg.local_size)] * cfg.n_local
    for index, (is_global, size) in enumerate(specs):
        view_rng = rng.fork(index)
        if method is ViewMethod.ECT:
            rect, view = sample_ect(tile, size, cfg, view_rng)
        else:
            scale = GLOBAL_CROP_SCALE if is_global else LOCAL_CROP_SCALE
            rect, view = sample_crop_resize(
                centre, size, scale, DEFAULT_CROP_ASPECT, view_rng
            )
            rect = CropRect(rect.x + offset, rect.y + offset, rect.w, rect.h)
        view, applied = apply_photometric(view, policy, view_rng.fork(0))
        if is_global:
            views.global_views.append(view)
            views.global_rects.append(rect)
        else:
            views.local_views.append(view)
            views.local_rects.append(rect)
        views.photometric_log.append(applied)
    return views


def batch_views(view_sets: List[ViewSet]) -> tuple[npt.NDArray, npt.NDArray]:
    """Stack a batch of view sets into view-major float arrays in [0, 1].

    Returns (globals [n_global, B, Lg, Lg, 3], locals [n_local, B, Ll, Ll, 3]).
    """
    n_global = len(view_sets[0].global_views)
    globals_ = np.stack(
        [np.stack([vs.global_views[k] for vs in view_sets]) for k in range(n_global)]
    )
    n_local = len(view_sets[0].local_views)
    if n_local:
        locals_ = np.stack(
            [np.stack([vs.local_views[k] for vs in view_sets]) for k in range(n_local)]
        )
    else:
        locals_ = np.zeros((0, len(view_sets), 1, 1, 3), dtype=np.uint8)
    return (
        globals_.astype(np.float32) / 255.0,
        locals_.astype(np.float32) / 255.0,
    )
