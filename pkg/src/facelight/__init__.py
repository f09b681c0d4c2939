"""Face skin brightness measurement and brightness-conditioned FMR audits."""

__version__ = "0.1.0"

from .brightness import (  # noqa: E402
    BrightnessProfile,
    CategoryScheme,
    ExposureCategory,
    categorize,
    compute_bim,
    compute_fsb,
    fit_category_scheme,
)
from .errors import EmptyMaskError, FacelightError, InputError, InvariantError, ValidationError  # noqa: E402
from .skinregion import SkinMask, derive_skin_mask  # noqa: E402

__all__ = [
    "BrightnessProfile",
    "CategoryScheme",
    "EmptyMaskError",
    "ExposureCategory",
    "FacelightError",
    "InputError",
    "InvariantError",
    "SkinMask",
    "ValidationError",
    "categorize",
    "compute_bim",
    "compute_fsb",
    "derive_skin_mask",
    "fit_category_scheme",
]
