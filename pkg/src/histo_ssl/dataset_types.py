"""
Tile and slide type definitions for the synthetic pathology pipeline

Slides, tiles, manifests and sampler targets, with the validation each carries.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
import pandas as pd

from histo_ssl.errors import ConfigError, ParameterError

TILE_SIZES = (224, 392)
MAGNIFICATIONS = (40, 20, 10, 5)
UNKNOWN = "unknown"

MANIFEST_COLUMNS = [
    "path",
    "slide_id",
    "patient_id",
    "magnification",
    "stain",
    "tissue",
    "diagnosis",
    "coverage",
]


class Diagnosis(Enum):
    """Most severe diagnosis of a slide"""

    CANCER = "cancer"
    PRECURSOR = "precursor"
    BENIGN = "benign"
    BENIGN_NEOPLASM = "benign_neoplasm"
    UNKNOWN = "unknown"


class Stain(Enum):
    """Staining protocol"""

    HE = "HE"  # Hematoxylin and eosin
    IHC = "IHC"  # Immunohistochemistry


# Sampling targets used when training on balanced data
DEFAULT_DIAGNOSIS_WEIGHTS = {
    Diagnosis.CANCER: 0.40,
    Diagnosis.PRECURSOR: 0.15,
    Diagnosis.BENIGN: 0.08,
    Diagnosis.BENIGN_NEOPLASM: 0.02,
    Diagnosis.UNKNOWN: 0.35,
}
DEFAULT_MAGNIFICATION_WEIGHTS = {40: 0.20, 20: 0.40, 10: 0.20, 5: 0.20}
DEFAULT_NO40X_BOOST = 1.5

# Frequencies used to draw slide diagnoses for synthetic data
OBSERVED_DIAGNOSIS_FREQUENCIES = {
    Diagnosis.CANCER: 0.30,
    Diagnosis.PRECURSOR: 0.18,
    Diagnosis.BENIGN: 0.28,
    Diagnosis.BENIGN_NEOPLASM: 0.04,
    Diagnosis.UNKNOWN: 0.20,
}


@dataclass
class SlideSpec:
    """Recipe for one synthetic slide"""

    size: int = 1792  # side length at 40x, pixels
    n_classes: int = 4  # texture classes
    background_fraction: float = 0.3
    n_regions: int = 8
    ihc_probability: float = 0.1
    missing_40x_probability: float = 0.4
    stain: Optional[Stain] = None  # drawn when None
    diagnosis: Optional[Diagnosis] = None  # drawn when None
    magnifications: Optional[Tuple[int, ...]] = None  # drawn when None
    noise: float = 6.0

    def __post_init__(self):
        if isinstance(self.stain, str):
            self.stain = Stain(self.stain)
        if isinstance(self.diagnosis, str):
            self.diagnosis = Diagnosis(self.diagnosis)
        if self.n_classes < 2:
            raise ParameterError(f"need at least 2 texture classes, got {self.n_classes}")
        if not 0.0 <= self.background_fraction <= 1.0:
            raise ParameterError(
                f"background fraction must be in [0, 1], got {self.background_fraction}"
            )
        if self.n_regions < self.n_classes:
            self.n_regions = self.n_classes
        if self.magnifications is not None:
            unknown = set(self.magnifications) - set(MAGNIFICATIONS)
            if unknown:
                raise ParameterError(f"invalid magnifications {sorted(unknown)}")


@dataclass
class SlideRaster:
    """A synthetic whole slide at 40x with its region labels"""

    pixels: npt.NDArray[np.uint8]  # H x W x 3
    slide_id: str
    available_magnifications: Tuple[int, ...]
    stain: Stain
    tissue_label: str
    diagnosis: Diagnosis
    label_map: npt.NDArray[np.int16]  # H x W texture class per pixel
    background_mask: npt.NDArray[np.bool_]
    patient_id: str = UNKNOWN

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class TileRecord:
    """One L x L tile with its slide metadata"""

    pixels: npt.NDArray[np.uint8]
    slide_id: str
    magnification: int
    stain: Stain
    tissue_label: str
    diagnosis: Diagnosis
    coverage: float
    x: int = 0  # top-left corner in the magnification's raster
    y: int = 0
    patient_id: str = UNKNOWN

    def __post_init__(self):
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise ParameterError(f"tiles must be square, got {self.pixels.shape[:2]}")
        if self.pixels.shape[0] not in TILE_SIZES:
            raise ParameterError(
                f"tile size must be one of {TILE_SIZES}, got {self.pixels.shape[0]}"
            )
        if self.magnification not in MAGNIFICATIONS:
            raise ParameterError(f"invalid magnification {self.magnification}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class SamplerTargets:
    """Target sampling frequencies for the balanced sampler"""

    diagnosis_weights: Dict[Diagnosis, float] = field(
        default_factory=lambda: dict(DEFAULT_DIAGNOSIS_WEIGHTS)
    )
    magnification_weights: Dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_MAGNIFICATION_WEIGHTS)
    )
    no40x_boost: float = DEFAULT_NO40X_BOOST
    tissue_flattening: bool = True

    def __post_init__(self):
        self.diagnosis_weights = {
            Diagnosis(key) if isinstance(key, str) else key: float(value)
            for key, value in self.diagnosis_weights.items()
        }
        self.magnification_weights = {
            int(key): float(value) for key, value in self.magnification_weights.items()
        }
        for name, weights in (
            ("diagnosis", self.diagnosis_weights),
            ("magnification", self.magnification_weights),
        ):
            if any(value < 0 for value in weights.values()):
                raise ConfigError(f"{name} weights must be non-negative: {weights}")
            total = math.fsum(weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"{name} weights must sum to 1, got {total}")
        if self.no40x_boost <= 0:
            raise ConfigError(f"no40x boost must be positive, got {self.no40x_boost}")


@dataclass
class ManifestRecord:
    """One row of the tile manifest"""

    path: str
    slide_id: str
    patient_id: str
    magnification: int
    stain: str
    tissue: str
    diagnosis: str
    coverage: float


@dataclass
class Manifest:
    """Tile manifest: records plus the seed used to produce them"""

    records: List[ManifestRecord]
    seed: int
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        return self.root / record.path

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(record) for record in self.records], columns=MANIFEST_COLUMNS
        )

    @classmethod
    def from_dataframe(cls, df: pd.DataFrame, seed: int, root: Path) -> "Manifest":
        records = [
            ManifestRecord(
                path=str(row.path),
                slide_id=str(row.slide_id),
                patient_id=str(row.patient_id),
                magnification=int(row.magnification),
                stain=str(row.stain),
                tissue=str(row.tissue),
                diagnosis=str(row.diagnosis),
                coverage=float(row.coverage),
            )
            for row in df.itertuples(index=False)
        ]
        return cls(records=records, seed=seed, root=root)
