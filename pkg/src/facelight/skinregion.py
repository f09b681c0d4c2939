"""Face-skin mask derivation from a parsing label map."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import EmptyMaskError, ValidationError
from .ingest import LabelMap

log = logging.getLogger(__name__)

EXCLUDED_REGIONS = (
    "left_eye",
    "right_eye",
    "left_brow",
    "right_brow",
    "upper_lip",
    "lower_lip",
    "mouth_interior",
    "nose",
)

NO_NOSE_WARNING = "no nose pixels; row cutoff skipped"


@dataclass(frozen=True)
class SkinMask:
    included: np.ndarray  # (height, width) bool
    warnings: tuple[str, ...] = ()

    @property
    def pixel_count(self) -> int:
        return int(np.count_nonzero(self.included))

    @property
    def height(self) -> int:
        return self.included.shape[0]

    @property
    def width(self) -> int:
        return self.included.shape[1]


def _region(labels: LabelMap, name: str) -> np.ndarray:
    idx = labels.indices_of(name)
    if not idx:
        return np.zeros(labels.labels.shape, dtype=bool)
    return np.isin(labels.labels, idx)


def derive_skin_mask(labels: LabelMap) -> SkinMask:
    """Skin pixels usable for brightness.

    Keeps ``skin``-labeled pixels, drops eyes, brows, lips, mouth and nose, and
    drops every row strictly below the lowest nose pixel (mustache/beard area).
    Without a nose the cutoff is skipped and a warning is attached.
    """
    if not labels.indices_of("skin"):
        raise ValidationError("label semantics have no 'skin' region")

    included = _region(labels, "skin")
    for name in EXCLUDED_REGIONS:
        included &= ~_region(labels, name)

    warnings: tuple[str, ...] = ()
    nose_rows = np.flatnonzero(_region(labels, "nose").any(axis=1))
    if nose_rows.size:
        included[nose_rows[-1] + 1 :, :] = False
    else:
        warnings = (NO_NOSE_WARNING,)
        log.warning(NO_NOSE_WARNING)

    if not included.any():
        raise EmptyMaskError("skin mask is empty; image is unusable for brightness")
    return SkinMask(included, warnings)


def save_mask_png(mask: SkinMask, path) -> None:
    """Write the mask as a 1-bit PNG for visual inspection."""
    Image.fromarray(mask.included).convert("1").save(path)
