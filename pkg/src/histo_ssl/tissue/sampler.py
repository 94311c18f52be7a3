"""
Diagnosis, magnification and tissue balanced tile sampling.

A draw picks a diagnosis by its target weight, then a slide inside that
diagnosis, then a magnification among the ones the slide carries, then a tile
uniformly. Slides without a 40x scan get their selection weight multiplied by
the no40x boost; with tissue flattening on, over-represented tissues are capped
at twice the uniform share inside each (diagnosis, stain) group so the stain
mix is left untouched.
"""

import logging
from collections import Counter
from typing import Dict, Iterator, List

import numpy as np
import numpy.typing as npt

from histo_ssl.dataset_types import MAGNIFICATIONS, Diagnosis, Manifest, SamplerTargets
from histo_ssl.errors import ConfigError, DataError
from histo_ssl.tensor_kernel import Rng

logger = logging.getLogger(__name__)

FLATTENING_CAP = 2.0


def flattening_factors(tissues: List[str]) -> npt.NDArray[np.float64]:
    """Per-item reweighting that caps every tissue at 2x the uniform share.

    The factors average to one over the group, so the group's total weight is
    preserved.
    """
    counts = Counter(tissues)
    n = len(tissues)
    shares = {tissue: count / n for tissue, count in counts.items()}
    cap = FLATTENING_CAP / len(counts)
    capped = {tissue: min(share, cap) for tissue, share in shares.items()}
    total = sum(capped.values())
    targets = {tissue: value / total for tissue, value in capped.items()}
    return np.array([targets[t] / shares[t] for t in tissues], dtype=np.float64)


class BalancedSampler:
    """Infinite stream of manifest row indices following ``SamplerTargets``."""

    def __init__(self, manifest: Manifest, targets: SamplerTargets, rng: Rng):
        if len(manifest) == 0:
            raise DataError("cannot sample from an empty manifest")
        self.manifest = manifest
        self.targets = targets
        self.rng = rng
        self._build_strata()

    def _build_strata(self) -> None:
        df = self.manifest.to_dataframe()
        diagnoses = [Diagnosis(value) for value in df["diagnosis"]]
        df["diagnosis"] = [d.value for d in diagnoses]

        slides = df.groupby("slide_id", sort=True)
        slide_ids = list(slides.groups)
        slide_index = {slide_id: i for i, slide_id in enumerate(slide_ids)}
        slide_info = slides.agg(
            diagnosis=("diagnosis", "first"),
            stain=("stain", "first"),
            tissue=("tissue", lambda t: t.mode().iloc[0]),
        )

        # (slide, magnification) strata, columns ordered as MAGNIFICATIONS
        n_slides = len(slide_ids)
        n_mags = len(MAGNIFICATIONS)
        mag_column = {mag: j for j, mag in enumerate(MAGNIFICATIONS)}
        stratum_of_row = np.array(
            [
                slide_index[s] * n_mags + mag_column[int(m)]
                for s, m in zip(df["slide_id"], df["magnification"])
            ],
            dtype=np.int64,
        )
        self._tile_order = np.argsort(stratum_of_row, kind="stable")
        counts = np.bincount(stratum_of_row, minlength=n_slides * n_mags)
        self._stratum_count = counts
        self._stratum_start = np.concatenate([[0], np.cumsum(counts)[:-1]])

        mag_weights = np.array(
            [self.targets.magnification_weights.get(mag, 0.0) for mag in MAGNIFICATIONS]
        )
        available = counts.reshape(n_slides, n_mags) > 0
        mag_probs = available * mag_weights[None, :]
        mag_mass = mag_probs.sum(axis=1)
        usable = mag_mass > 0
        if not usable.any():
            raise ConfigError(
                "no slide carries a magnification with positive target weight"
            )
        mag_probs[usable] /= mag_mass[usable, None]
        cumulative = np.cumsum(mag_probs, axis=1)
        for row in np.flatnonzero(usable):
            last = np.flatnonzero(mag_probs[row] > 0)[-1]
            cumulative[row, last:] = 1.0
        self._mag_cumulative = cumulative

        has_40x = available[:, mag_column[40]]
        boost = np.where(has_40x, 1.0, self.targets.no40x_boost)
        slide_weights = boost * usable

        self._diagnoses: List[Diagnosis] = []
        self._diagnosis_probs: List[float] = []
        self._slides_by_diagnosis: Dict[Diagnosis, npt.NDArray[np.int64]] = {}
        self._slide_probs: Dict[Diagnosis, npt.NDArray[np.float64]] = {}
        for diagnosis, weight in self.targets.diagnosis_weights.items():
            if weight <= 0:
                continue
            members = np.flatnonzero(
                (slide_info["diagnosis"].to_numpy() == diagnosis.value) & usable
            )
            if members.size == 0:
                raise ConfigError(
                    f"diagnosis stratum '{diagnosis.value}' has target weight "
                    f"{weight} but no tiles in the manifest"
                )
            weights = slide_weights[members].astype(np.float64)
            if self.targets.tissue_flattening:
                stains = slide_info["stain"].to_numpy()[members]
                tissues = slide_info["tissue"].to_numpy()[members]
                for stain in np.unique(stains):
                    group = stains == stain
                    weights[group] *= flattening_factors(list(tissues[group]))
            self._diagnoses.append(diagnosis)
            self._diagnosis_probs.append(weight)
            self._slides_by_diagnosis[diagnosis] = members
            self._slide_probs[diagnosis] = weights / weights.sum()

        probs = np.array(self._diagnosis_probs)
        self._diagnosis_probs = list(probs / probs.sum())
        logger.info(
            f"Balanced sampler over {len(df)} tiles, {n_slides} slides, "
            f"{len(self._diagnoses)} diagnosis strata"
        )

    def sample(self, n: int) -> npt.NDArray[np.int64]:
        """Draw ``n`` manifest row indices."""
        diagnosis_draw = self.rng.choice(
            len(self._diagnoses), size=n, p=self._diagnosis_probs
        )
        slides = np.empty(n, dtype=np.int64)
        for k, diagnosis in enumerate(self._diagnoses):
            rows = np.flatnonzero(diagnosis_draw == k)
            if rows.size == 0:
                continue
            members = self._slides_by_diagnosis[diagnosis]
            picks = self.rng.choice(
                members.size, size=rows.size, p=self._slide_probs[diagnosis]
            )
            slides[rows] = members[picks]

        u = self.rng.random(n)
        mag_col = np.argmax(u[:, None] < self._mag_cumulative[slides], axis=1)
        strata = slides * len(MAGNIFICATIONS) + mag_col

        offsets = np.floor(self.rng.random(n) * self._stratum_count[strata]).astype(
            np.int64
        )
        offsets = np.minimum(offsets, self._stratum_count[strata] - 1)
        return self._tile_order[self._stratum_start[strata] + offsets]

    def __iter__(self) -> Iterator[int]:
        while True:
            yield from self.sample(1024).tolist()

    def fork(self, worker_id: int) -> "BalancedSampler":
        """Independent sampler over the same strata for a data worker."""
        clone = object.__new__(BalancedSampler)
        clone.__dict__.update(self.__dict__)
        clone.rng = self.rng.fork(worker_id)
        return clone


def targets_for_manifest(
    manifest: Manifest, targets: SamplerTargets | None = None
) -> SamplerTargets:
    """Drop diagnosis and magnification strata the manifest lacks and
    renormalize the remaining target weights."""
    targets = targets or SamplerTargets()
    if len(manifest) == 0:
        raise DataError("cannot sample from an empty manifest")
    present_diagnoses = {Diagnosis(r.diagnosis) for r in manifest.records}
    present_mags = {r.magnification for r in manifest.records}

    def restrict(weights: dict, present: set, name: str) -> dict:
        kept = {key: value for key, value in weights.items() if key in present}
        total = sum(kept.values())
        if total <= 0:
            raise DataError(f"manifest has no tiles in any weighted {name} stratum")
        dropped = sorted(str(key) for key in weights if key not in present and weights[key] > 0)
        if dropped:
            logger.warning(f"Manifest lacks {name} strata {dropped}, renormalizing targets")
        return {key: value / total for key, value in kept.items()}

    return SamplerTargets(
        diagnosis_weights=restrict(targets.diagnosis_weights, present_diagnoses, "diagnosis"),
        magnification_weights=restrict(
            targets.magnification_weights, present_mags, "magnification"
        ),
        no40x_boost=targets.no40x_boost,
        tissue_flattening=targets.tissue_flattening,
    )


def balanced_sampler(
    manifest: Manifest, targets: SamplerTargets, rng: Rng
) -> Iterator[int]:
    """Infinite stream of manifest row indices."""
    return iter(BalancedSampler(manifest, targets, rng))
