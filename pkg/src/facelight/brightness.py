"""Face skin brightness, brightness information, and exposure categories."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyMaskError, ValidationError
from .ingest import GrayImage, ImageRecord
from .skinregion import SkinMask

LEVELS = 256
_LEVEL_VALUES = np.arange(LEVELS, dtype=np.float64)
DEFAULT_PERCENTILES = (5, 15, 85, 95)
MIN_SCHEME_SAMPLES = 20


class ExposureCategory(enum.IntEnum):
    SU = 0
    U = 1
    M = 2
    O = 3  # noqa: E741
    SO = 4

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class BrightnessHistogram:
    bins: np.ndarray  # 256 int64 counts

    @property
    def total(self) -> int:
        return int(self.bins.sum())

    def mean(self) -> float:
        # exact integer sum, one rounding in the division
        return int(np.dot(np.arange(LEVELS, dtype=np.int64), self.bins)) / self.total


@dataclass(frozen=True)
class BrightnessProfile:
    image_id: str
    fsb: float
    histogram: BrightnessHistogram
    bim: float


def compute_fsb(image: GrayImage, mask: SkinMask, image_id: str = "") -> BrightnessProfile:
    """Mean intensity over the skin mask, plus the skin histogram and its BIM."""
    if image.pixels.shape != mask.included.shape:
        raise ValidationError(
            f"image {image.pixels.shape} and mask {mask.included.shape} dimensions differ"
        )
    values = image.pixels[mask.included]
    if values.size == 0:
        raise EmptyMaskError(f"empty skin mask for {image_id or 'image'}")
    fsb = int(values.sum(dtype=np.int64)) / values.size
    hist = BrightnessHistogram(np.bincount(values, minlength=LEVELS).astype(np.int64))
    return BrightnessProfile(image_id, fsb, hist, compute_bim(hist))


def compute_bim(histogram: BrightnessHistogram) -> float:
    """Probability-weighted mean absolute deviation of skin brightness levels."""
    total = histogram.total
    if total == 0:
        raise ValidationError("BIM of an empty histogram is undefined")
    mean = histogram.mean()
    return float(np.dot(np.abs(_LEVEL_VALUES - mean), histogram.bins)) / total


# ----------------------------------------------------------------- categories


@dataclass(frozen=True)
class CategoryScheme:
    b5: float
    b15: float
    b85: float
    b95: float
    source_count: int
    percentiles: tuple[float, ...] = DEFAULT_PERCENTILES

    def __post_init__(self):
        if not self.b5 <= self.b15 <= self.b85 <= self.b95:
            raise ValidationError(f"scheme boundaries must be nondecreasing: {self.boundaries}")

    @property
    def boundaries(self) -> tuple[float, float, float, float]:
        return (self.b5, self.b15, self.b85, self.b95)


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the value at 1-indexed rank ceil(p/100 * n)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(Fraction(str(p)) * n / 100))
    return float(sorted_values[min(rank, n) - 1])


def fit_category_scheme(fsb_values: Iterable[float], percentiles=DEFAULT_PERCENTILES) -> CategoryScheme:
    values = np.sort(np.asarray(list(fsb_values), dtype=np.float64))
    if values.size < MIN_SCHEME_SAMPLES:
        raise ValidationError(
            f"need at least {MIN_SCHEME_SAMPLES} FSB values to fit a scheme, got {values.size}"
        )
    if len(percentiles) != 4:
        raise ValidationError("a category scheme needs exactly four percentiles")
    b = [nearest_rank(values, p) for p in percentiles]
    return CategoryScheme(*b, source_count=int(values.size), percentiles=tuple(percentiles))


def categorize(fsb: float, scheme: CategoryScheme) -> ExposureCategory:
    """Half-open intervals; a value on a boundary goes to the brighter side."""
    if fsb < scheme.b5:
        return ExposureCategory.SU
    if fsb < scheme.b15:
        return ExposureCategory.U
    if fsb < scheme.b85:
        return ExposureCategory.M
    if fsb < scheme.b95:
        return ExposureCategory.O
    return ExposureCategory.SO


def categorize_many(fsb: np.ndarray, scheme: CategoryScheme) -> np.ndarray:
    """Vectorized :func:`categorize`; returns category codes as int8."""
    return np.searchsorted(np.asarray(scheme.boundaries), np.asarray(fsb), side="right").astype(np.int8)


# -------------------------------------------------------------- group stats


@dataclass(frozen=True)
class GroupStats:
    count: int
    mean: float
    std: float
    single_image: bool = False


def group_stats(
    profiles: Sequence[BrightnessProfile], records: Sequence[ImageRecord]
) -> dict[str, GroupStats]:
    """Per-group count, mean and sample (n-1) standard deviation of FSB."""
    group_of = {r.image_id: r.group for r in records}
    buckets: dict[str, list[float]] = {}
    for p in profiles:
        if p.image_id not in group_of:
            raise ValidationError(f"profile {p.image_id!r} has no manifest record")
        buckets.setdefault(group_of[p.image_id], []).append(p.fsb)
    out = {}
    for g in sorted(buckets):
        v = np.asarray(buckets[g])
        if v.size == 1:
            out[g] = GroupStats(1, float(v[0]), 0.0, single_image=True)
        else:
            out[g] = GroupStats(int(v.size), float(v.mean()), float(v.std(ddof=1)))
    return out


def fsb_histogram(fsb_values: Iterable[float]) -> np.ndarray:
    """256-bin count of FSB values by integer brightness level (floor)."""
    v = np.clip(np.floor(np.asarray(list(fsb_values), dtype=np.float64)), 0, LEVELS - 1)
    return np.bincount(v.astype(np.int64), minlength=LEVELS)


# ------------------------------------------------------------------ windows


@dataclass(frozen=True)
class BrightnessWindow:
    lo: float
    hi: float
    label: str

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"window needs lo < hi, got {self.lo}..{self.hi}")

    def contains(self, fsb) -> np.ndarray:
        fsb = np.asarray(fsb)
        return (fsb >= self.lo) & (fsb <= self.hi)

    def __str__(self) -> str:
        return f"{self.label} {self.lo:g}-{self.hi:g}"


def sliding_windows(
    lo: float, hi: float, width: float = 40, step: float = 5, origin: int = 1, prefix: str = "M"
) -> list[BrightnessWindow]:
    """Windows [lo + k*step, lo + k*step + width] whose upper edge stays <= hi.

    Labels are ``prefix`` + (origin + k); lo=145, origin=6 gives M6..M13.
    """
    if width <= 0 or step <= 0:
        raise ValidationError("window width and step must be positive")
    if lo + width > hi + 1e-9:
        raise ValidationError(f"no window of width {width} fits in {lo}..{hi}")
    out = []
    k = 0
    while lo + k * step + width <= hi + 1e-9:
        a = lo + k * step
        out.append(BrightnessWindow(a, a + width, f"{prefix}{origin + k}"))
        k += 1
    return out


def coverage_fraction(
    fsb: Mapping[str, Sequence[float]], lo: float, hi: float
) -> dict[str, float]:
    """Per-group fraction of FSB values inside the closed range [lo, hi]."""
    if lo > hi:
        raise ValidationError(f"invalid range {lo}..{hi}")
    out = {}
    for g in sorted(fsb):
        v = np.asarray(fsb[g], dtype=np.float64)
        out[g] = float(((v >= lo) & (v <= hi)).sum() / v.size) if v.size else float("nan")
    return out
