from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facelight.brightness import (
    BrightnessHistogram,
    BrightnessProfile,
    BrightnessWindow,
    CategoryScheme,
    ExposureCategory,
    categorize,
    categorize_many,
    compute_bim,
    compute_fsb,
    coverage_fraction,
    fit_category_scheme,
    fsb_histogram,
    group_stats,
    nearest_rank,
    sliding_windows,
)
from facelight.errors import EmptyMaskError, ValidationError
from facelight.ingest import GrayImage, ImageRecord
from facelight.skinregion import SkinMask

SU, U, M, O, SO = ExposureCategory


def full_mask(shape) -> SkinMask:
    return SkinMask(np.ones(shape, dtype=bool), ())


def hist_of(values) -> BrightnessHistogram:
    return BrightnessHistogram(np.bincount(np.asarray(values), minlength=256).astype(np.int64))


def bim_oracle(pixels) -> float:
    """Direct summation over intensity levels with probabilities count/total."""
    counts = [0] * 256
    for v in pixels:
        counts[int(v)] += 1
    total = sum(counts)
    mean = sum(i * c for i, c in enumerate(counts)) / total
    return sum(abs(i - mean) * c / total for i, c in enumerate(counts))


# ---------------------------------------------------------------- FSB / BIM


def test_fsb_four_pixels():
    img = GrayImage(np.array([[100, 110], [120, 130]], dtype=np.uint8))
    assert compute_fsb(img, full_mask((2, 2))).fsb == 115


def test_fsb_ignores_pixels_outside_mask():
    img = GrayImage(np.array([[10, 250], [30, 250]], dtype=np.uint8))
    mask = SkinMask(np.array([[True, False], [True, False]]), ())
    p = compute_fsb(img, mask, "x")
    assert p.fsb == 20 and p.image_id == "x" and p.histogram.total == 2


def test_fsb_shape_mismatch():
    with pytest.raises(ValidationError, match="dimensions"):
        compute_fsb(GrayImage(np.zeros((2, 2), dtype=np.uint8)), full_mask((2, 3)))


def test_fsb_empty_mask():
    with pytest.raises(EmptyMaskError):
        compute_fsb(GrayImage(np.zeros((2, 2), dtype=np.uint8)), SkinMask(np.zeros((2, 2), dtype=bool), ()))


@pytest.mark.parametrize(
    "pixels, mean, bim",
    [
        ([100, 100, 200, 200], 150, 50),
        ([0, 255] * 3, 127.5, 127.5),
        ([77] * 9, 77, 0),
    ],
)
def test_bim_examples(pixels, mean, bim):
    h = hist_of(pixels)
    assert h.mean() == mean
    assert compute_bim(h) == bim


def test_bim_empty_histogram():
    with pytest.raises(ValidationError):
        compute_bim(BrightnessHistogram(np.zeros(256, dtype=np.int64)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.uint8, st.integers(1, 400), elements=st.integers(0, 255)))
def test_bim_bounds_and_oracle(pixels):
    h = hist_of(pixels)
    bim = compute_bim(h)
    assert 0 <= bim <= 127.5
    assert bim == pytest.approx(bim_oracle(pixels), abs=1e-12)
    assert h.mean() == sum(int(v) for v in pixels) / len(pixels)


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.integers(1, 200), elements=st.integers(0, 255)), st.randoms(use_true_random=False))
def test_fsb_and_bim_permutation_invariant(pixels, rnd):
    shuffled = pixels.copy()
    rnd.shuffle(shuffled)
    a = compute_fsb(GrayImage(pixels[None, :]), full_mask((1, pixels.size)))
    b = compute_fsb(GrayImage(shuffled[None, :]), full_mask((1, pixels.size)))
    assert a.fsb == b.fsb and a.bim == b.bim
    assert pixels.min() <= a.fsb <= pixels.max()


def test_uniform_image_has_zero_bim():
    p = compute_fsb(GrayImage(np.full((5, 5), 200, dtype=np.uint8)), full_mask((5, 5)))
    assert (p.fsb, p.bim) == (200, 0)


# ---------------------------------------------------------------- schemes


def test_scheme_one_to_hundred():
    s = fit_category_scheme(range(1, 101))
    assert s.boundaries == (5, 15, 85, 95) and s.source_count == 100


def test_scheme_order_independent():
    v = np.random.default_rng(0).uniform(0, 255, 500)
    assert fit_category_scheme(v) == fit_category_scheme(v[::-1])


def test_scheme_needs_twenty_values():
    with pytest.raises(ValidationError, match="20"):
        fit_category_scheme(range(19))
    fit_category_scheme(range(20))


def test_scheme_rejects_decreasing_boundaries():
    with pytest.raises(ValidationError):
        CategoryScheme(10, 5, 85, 95, 100)


def test_nearest_rank_small():
    assert nearest_rank([3.0], 50) == 3.0
    assert nearest_rank([1, 2, 3, 4], 25) == 1
    assert nearest_rank([1, 2, 3, 4], 26) == 2
    # 15% of 20 is exactly rank 3, with no float drift
    assert nearest_rank(list(range(1, 21)), 15) == 3


@pytest.mark.parametrize(
    "fsb, cat",
    [(4.99, SU), (5, U), (14.9, U), (15, M), (50, M), (85, O), (94.9, O), (95, SO), (255, SO), (0, SU)],
)
def test_categorize_boundaries(fsb, cat):
    s = CategoryScheme(5, 15, 85, 95, 100)
    assert categorize(fsb, s) is cat
    assert categorize_many(np.array([fsb]), s)[0] == cat


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0, 255, allow_nan=False), min_size=20, max_size=300),
    st.lists(st.floats(0, 255, allow_nan=False), min_size=1, max_size=50),
)
def test_categorize_monotone_and_vectorized(fit_values, probe):
    s = fit_category_scheme(fit_values)
    probe = sorted(probe)
    cats = [categorize(v, s) for v in probe]
    assert cats == sorted(cats)
    assert categorize_many(np.array(probe), s).tolist() == [int(c) for c in cats]


@settings(max_examples=50, deadline=None)
@given(st.integers(100, 3000), st.integers(0, 2**31))
def test_category_sizes_for_distinct_values(n, seed):
    v = np.random.default_rng(seed).permutation(np.linspace(0, 255, n))
    assume(np.unique(v).size == n)
    counts = np.bincount(categorize_many(v, fit_category_scheme(v)), minlength=5)
    want = [n * 0.05, n * 0.10, n * 0.70, n * 0.10, n * 0.05]
    assert all(abs(c - w) <= 2 for c, w in zip(counts, want))


def test_category_str():
    assert str(SO) == "SO" and int(M) == 2


# ------------------------------------------------------------ group stats


def _records(groups):
    return [ImageRecord(f"i{k}", f"s{k}", g, Path("x"), Path("y")) for k, g in enumerate(groups)]


def _profiles(values):
    h = hist_of([0])
    return [BrightnessProfile(f"i{k}", v, h, 0.0) for k, v in enumerate(values)]


def test_group_stats_two_points():
    st_ = group_stats(_profiles([10, 20]), _records(["CM", "CM"]))["CM"]
    assert st_.mean == 15 and st_.std == pytest.approx(math.sqrt(50)) and not st_.single_image


def test_group_stats_single_image():
    st_ = group_stats(_profiles([42]), _records(["AAF"]))["AAF"]
    assert (st_.count, st_.mean, st_.std, st_.single_image) == (1, 42, 0, True)


def test_group_stats_unknown_profile():
    with pytest.raises(ValidationError):
        group_stats(_profiles([1, 2]), _records(["CM"]))


def test_fsb_histogram_floor():
    h = fsb_histogram([0.2, 0.9, 1.0, 254.99, 255])
    assert h[0] == 2 and h[1] == 1 and h[254] == 1 and h[255] == 1 and h.sum() == 5


# ---------------------------------------------------------------- windows


def test_windows_default_geometry():
    ws = sliding_windows(145, 220, 40, 5, origin=6)
    assert len(ws) == 8
    assert (ws[0].lo, ws[0].hi, ws[0].label) == (145, 185, "M6")
    assert (ws[-1].lo, ws[-1].hi, ws[-1].label) == (180, 220, "M13")


def test_windows_errors():
    with pytest.raises(ValidationError):
        sliding_windows(0, 10, width=40)
    with pytest.raises(ValidationError):
        sliding_windows(0, 100, width=0)
    with pytest.raises(ValidationError):
        BrightnessWindow(5, 5, "x")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100), st.integers(1, 100), st.integers(1, 60), st.integers(1, 20))
def test_windows_cover_span(lo, extra, width, step):
    hi = lo + width + extra
    ws = sliding_windows(lo, hi, width, step)
    assert ws[0].lo == lo
    assert all(w.hi <= hi and w.hi - w.lo == width for w in ws)
    assert ws[-1].hi + step > hi
    assert [w.lo for w in ws] == [lo + k * step for k in range(len(ws))]


def test_window_contains_closed():
    w = BrightnessWindow(160, 200, "M")
    assert w.contains([159.9, 160, 180, 200, 200.1]).tolist() == [False, True, True, True, False]


def test_coverage_fraction():
    cov = coverage_fraction({"CM": [150, 170, 190, 210], "CF": [161]}, 160, 205)
    assert cov == {"CF": 1.0, "CM": 0.5}
    with pytest.raises(ValidationError):
        coverage_fraction({"CM": [1]}, 5, 1)
