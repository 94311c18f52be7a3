import json
import logging
import pathlib
from typing import Iterable

import pandas as pd

from histo_ssl.dataset_types import (
    MANIFEST_COLUMNS,
    UNKNOWN,
    Manifest,
    ManifestRecord,
    SlideRaster,
)
from histo_ssl.errors import DataError
from histo_ssl.tissue.raster_io import write_ppm
from histo_ssl.tissue.synthetic import render_magnifications
from histo_ssl.tissue.tiling import tile_grid
from histo_ssl.utils import read_json_file

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"


def _meta_path(path: pathlib.Path) -> pathlib.Path:
    return path.with_suffix(".json")


def write_manifest(manifest: Manifest, path: pathlib.Path) -> None:
    """Write the manifest TSV plus a small JSON sidecar holding the seed."""
    path.parent.mkdir(parents=True, exist_ok=True)
    df = manifest.to_dataframe().fillna(UNKNOWN)
    df.to_csv(path, sep="\t", index=False, encoding="utf-8", float_format="%.17g")
    with open(_meta_path(path), "w") as f:
        json.dump({"seed": manifest.seed}, f)


def read_manifest(path: pathlib.Path) -> Manifest:
    if not path.exists():
        raise DataError(f"manifest not found: {path}", missing_path=True)
    df = pd.read_csv(
        path,
        sep="\t",
        dtype={col: str for col in MANIFEST_COLUMNS if col not in ("magnification", "coverage")},
        keep_default_na=False,
        encoding="utf-8",
    )
    if list(df.columns) != MANIFEST_COLUMNS:
        raise DataError(
            f"manifest header must be {' '.join(MANIFEST_COLUMNS)}, "
            f"got {' '.join(df.columns)}"
        )
    meta = _meta_path(path)
    seed = read_json_file(meta)["seed"] if meta.exists() else 0
    manifest = Manifest.from_dataframe(df, seed=seed, root=path.parent)
    for record in manifest.records:
        if not manifest.resolve(record).exists():
            raise DataError(
                f"manifest entry does not resolve: {record.path}", missing_path=True
            )
    return manifest


def build_manifest(
    slides: Iterable[SlideRaster],
    out_dir: pathlib.Path,
    L: int,
    min_coverage: float,
    seed: int = 0,
) -> Manifest:
    """Tile every slide at every magnification it carries and write the tiles
    as PPM files under ``out_dir/tiles`` plus ``out_dir/manifest.tsv``."""
    records = []
    for slide in slides:
        rendered = render_magnifications(slide)
        for magnification in slide.available_magnifications:
            tiles = tile_grid(
                slide, L, min_coverage, magnification=magnification, rendered=rendered
            )
            for tile in tiles:
                relative = (
                    pathlib.Path("tiles")
                    / slide.slide_id
                    / f"{magnification}x_{tile.y:05d}_{tile.x:05d}.ppm"
                )
                write_ppm(out_dir / relative, tile.pixels)
                records.append(
                    ManifestRecord(
                        path=relative.as_posix(),
                        slide_id=tile.slide_id,
                        patient_id=tile.patient_id or UNKNOWN,
                        magnification=tile.magnification,
                        stain=tile.stain.value,
                        tissue=tile.tissue_label or UNKNOWN,
                        diagnosis=tile.diagnosis.value,
                        coverage=tile.coverage,
                    )
                )
    manifest = Manifest(records=records, seed=seed, root=out_dir)
    write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(records)} tiles to {out_dir}")
    return manifest
