"""Clinical grouping rules and the unpaired sampling protocol.

Classification thresholds: pixels above 2500 HU are metal; an image is
artifact-affected when its largest 4-connected metal component exceeds
400 pixels, artifact-free when its maximum HU is below 2000, and
discarded otherwise. Synthesized pairs are split so that no image ever
trains alongside its own counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .arrays import CTImage, HUWindow, NormalizedImage, normalize_hu, read_image

METAL_HU_THRESHOLD = 2500.0
METAL_COMPONENT_MIN_PIXELS = 400
ARTIFACT_FREE_MAX_HU = 2000.0

# 4-connectivity: diagonal neighbors do not join components.
_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class ClinicalClass(Enum):
    ARTIFACT_AFFECTED = "artifact_affected"
    ARTIFACT_FREE = "artifact_free"
    DISCARD = "discard"


def largest_connected_component(mask: np.ndarray) -> int:
    """Pixel count of the largest 4-connected true component (0 if empty)."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise ValueError("mask must be 2D")
    if not m.any():
        return 0
    labels, n = ndimage.label(m, structure=_FOUR_CONNECTED)
    return int(np.bincount(labels.ravel())[1:].max())


def classify_clinical(image: CTImage) -> ClinicalClass:
    """Apply the three grouping rules to a single image."""
    hu = image.pixels
    metal = hu > METAL_HU_THRESHOLD
    if largest_connected_component(metal) > METAL_COMPONENT_MIN_PIXELS:
        return ClinicalClass.ARTIFACT_AFFECTED
    if float(hu.max()) < ARTIFACT_FREE_MAX_HU:
        return ClinicalClass.ARTIFACT_FREE
    return ClinicalClass.DISCARD


@dataclass(frozen=True)
class ImageRef:
    """Handle to one image of a synthesized pair or a standalone image.

    Backed either by an ADNARR1 path or an in-memory image; ``pair_id``
    identifies the synthesized pair (-1 for unpaired clinical images).
    """

    ref_id: str
    pair_id: int = -1
    path: Path | None = None
    image: CTImage | None = field(default=None, compare=False)

    def load(self) -> CTImage:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise ValueError(f"image ref {self.ref_id} has neither path nor in-memory image")
        return read_image(self.path)


@dataclass
class GroupedDataset:
    """Disjoint artifact-affected and artifact-free training groups."""

    artifact_group: list[ImageRef]
    clean_group: list[ImageRef]
    withheld_test: list[ImageRef] = field(default_factory=list)

    def __post_init__(self):
        art_ids = {r.ref_id for r in self.artifact_group}
        clean_ids = {r.ref_id for r in self.clean_group}
        if art_ids & clean_ids:
            raise ValueError("artifact and clean groups must be disjoint")
        art_pairs = {r.pair_id for r in self.artifact_group if r.pair_id >= 0}
        clean_pairs = {r.pair_id for r in self.clean_group if r.pair_id >= 0}
        if art_pairs & clean_pairs:
            raise ValueError(
                f"pair leak: pairs {sorted(art_pairs & clean_pairs)} appear in both groups"
            )


@dataclass(frozen=True)
class UnpairedBatch:
    """One artifact-affected and one artifact-free normalized image."""

    x_a: NormalizedImage
    y: NormalizedImage
    x_a_ref: str = ""
    y_ref: str = ""


def split_unsupervised(
    pairs: list[tuple[ImageRef, ImageRef]],
    rng: np.random.Generator,
    n_test: int = 0,
) -> GroupedDataset:
    """Divide synthesized pairs into unpaired training groups.

    ``pairs`` holds (artifact, clean) refs. After shuffling and setting
    aside ``n_test`` whole pairs, the first half contributes only its
    artifact images and the second half only its clean images, so no
    counterpart of any training image is ever visible.
    """
    if len(pairs) - n_test < 2:
        raise ValueError("need at least 2 pairs after test withholding")
    if n_test < 0:
        raise ValueError("n_test must be non-negative")
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    test_pairs = shuffled[:n_test]
    train_pairs = shuffled[n_test:]
    half = len(train_pairs) // 2
    artifact_group = [art for art, _ in train_pairs[:half]]
    clean_group = [clean for _, clean in train_pairs[half:]]
    withheld = [ref for art, clean in test_pairs for ref in (art, clean)]
    return GroupedDataset(artifact_group, clean_group, withheld_test=withheld)


def sample_unpaired(
    ds: GroupedDataset,
    rng: np.random.Generator,
    window: HUWindow | None = None,
) -> UnpairedBatch:
    """Draw one image uniformly and independently from each group."""
    if not ds.artifact_group or not ds.clean_group:
        raise RuntimeError("cannot sample: a dataset group is empty")
    art_ref = ds.artifact_group[int(rng.integers(len(ds.artifact_group)))]
    clean_ref = ds.clean_group[int(rng.integers(len(ds.clean_group)))]
    return UnpairedBatch(
        x_a=normalize_hu(art_ref.load(), window),
        y=normalize_hu(clean_ref.load(), window),
        x_a_ref=art_ref.ref_id,
        y_ref=clean_ref.ref_id,
    )
