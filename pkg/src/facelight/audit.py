"""End-to-end audit: brightness measurement, exposure categories, threshold
calibration, per-bucket FMR / BIM / d-prime tables, sliding-window target
range search, and the files that carry them."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .brightness import (
    BrightnessWindow,
    CategoryScheme,
    ExposureCategory,
    categorize_many,
    compute_fsb,
    fit_category_scheme,
    fsb_histogram,
    sliding_windows,
)
from .config import AuditConfig
from .errors import EmptyMaskError, InputError, ValidationError
from .ingest import (
    ImageRecord,
    link_embeddings,
    load_embeddings,
    load_gray_image,
    load_label_map,
    load_manifest,
    load_score_table,
)
from .pairs import (
    KINDS,
    Accumulation,
    EmbeddingScorer,
    EngineConfig,
    PairKey,
    PairStats,
    TableScorer,
    Threshold,
    d_prime_or_none,
    dense_impostor_top,
    accumulate_dense,
    fmr,
    saturation_report,
)
from .skinregion import NO_NOSE_WARNING, derive_skin_mask

log = logging.getLogger(__name__)

CATEGORIES = tuple(ExposureCategory)
DASH = "–"


def table_pair_order() -> list[tuple[ExposureCategory, ExposureCategory]]:
    """The 15 unordered category pairs, same-category first, then by distance."""
    return [(CATEGORIES[i], CATEGORIES[i + d]) for d in range(5) for i in range(5 - d)]


# ------------------------------------------------------------- measurement


@dataclass
class Measurements:
    """Per-record FSB and BIM (NaN where the image was excluded)."""

    fsb: np.ndarray
    bim: np.ndarray
    excluded: dict[str, str] = field(default_factory=dict)
    no_nose: int = 0

    @property
    def usable(self) -> np.ndarray:
        return ~np.isnan(self.fsb)


def measure_records(
    records: Sequence[ImageRecord], semantics: Mapping[int, str] | None = None, workers: int | None = None
) -> Measurements:
    def one(r: ImageRecord):
        image = load_gray_image(r.image_path)
        labels = load_label_map(r.mask_path, semantics)
        if (labels.height, labels.width) != (image.height, image.width):
            raise ValidationError(
                f"{r.image_id}: label map {labels.labels.shape} does not match image {image.pixels.shape}"
            )
        try:
            mask = derive_skin_mask(labels)
        except EmptyMaskError as exc:
            return None, str(exc), False
        return compute_fsb(image, mask, r.image_id), None, NO_NOSE_WARNING in mask.warnings

    skin_log = logging.getLogger("facelight.skinregion")
    previous = skin_log.level
    skin_log.setLevel(logging.ERROR)  # summarized below instead of once per image
    try:
        if workers == 1:
            results = [one(r) for r in records]
        else:
            with ThreadPoolExecutor(max_workers=workers or None) as pool:
                results = list(pool.map(one, records))
    finally:
        skin_log.setLevel(previous)

    fsb = np.full(len(records), np.nan)
    bim = np.full(len(records), np.nan)
    m = Measurements(fsb, bim)
    for i, (r, (profile, reason, no_nose)) in enumerate(zip(records, results)):
        if profile is None:
            m.excluded[r.image_id] = reason
            log.warning("excluding %s: %s", r.image_id, reason)
            continue
        fsb[i], bim[i] = profile.fsb, profile.bim
        m.no_nose += no_nose
    if m.no_nose:
        log.warning("%d images have no nose pixels; kept their full skin region", m.no_nose)
    return m


def write_fsb_csv(path, records, meas: Measurements, categories: np.ndarray | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "group", "fsb", "bim", "category"])
        for i, r in enumerate(records):
            if np.isnan(meas.fsb[i]):
                continue
            cat = "" if categories is None or categories[i] < 0 else CATEGORIES[categories[i]].name
            w.writerow([r.image_id, r.group, repr(float(meas.fsb[i])), repr(float(meas.bim[i])), cat])


def read_fsb_csv(path, records: Sequence[ImageRecord]) -> Measurements:
    """Reload cached measurements; records absent from the file count as excluded."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"FSB table not found: {path}")
    values: dict[str, tuple[float, float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "fsb", "bim"} <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns image_id,group,fsb,bim,category")
        for row in reader:
            try:
                values[row["image_id"]] = (float(row["fsb"]), float(row["bim"]))
            except ValueError:
                raise InputError(f"{path}:{reader.line_num}: bad number") from None
    fsb = np.full(len(records), np.nan)
    bim = np.full(len(records), np.nan)
    m = Measurements(fsb, bim)
    for i, r in enumerate(records):
        if r.image_id in values:
            fsb[i], bim[i] = values[r.image_id]
        else:
            m.excluded[r.image_id] = "not in FSB table"
    return m


# ------------------------------------------------------------ score source


class ScoreSource:
    """Uniform front over embedding and score-table inputs."""

    def __init__(self, records: Sequence[ImageRecord], scorer, engine: EngineConfig):
        self.records = records
        self.scorer = scorer
        self.engine = engine

    def accumulate(self, labels, names, threshold: float | None, scope: str | None = None) -> Accumulation:
        eng = self.engine
        if scope is not None and scope != eng.scope:
            eng = EngineConfig(eng.score_range, eng.score_bins, scope, eng.tile, eng.workers)
        if isinstance(self.scorer, EmbeddingScorer):
            return accumulate_dense(self.records, self.scorer, labels, names, threshold, eng)
        return self.scorer.accumulate(self.records, labels, names, threshold, eng)

    def calibrate(self, usable: np.ndarray, group: str, target_fmr: float) -> Threshold:
        if isinstance(self.scorer, EmbeddingScorer):
            return dense_impostor_top(self.records, self.scorer, usable, group, target_fmr, self.engine)
        return self.scorer.calibrate(self.records, usable, group, target_fmr)


def engine_config(cfg: AuditConfig, workers: int | None = None) -> EngineConfig:
    return EngineConfig(
        score_range=tuple(cfg.score_range),
        score_bins=cfg.score_bins,
        scope=cfg.impostor_scope,
        tile=cfg.tile_size,
        workers=workers or cfg.threads or None,
    )


# ------------------------------------------------------------ target range


@dataclass
class WindowResult:
    group: str
    window: BrightnessWindow
    images: int
    avg_bim: float | None
    genuine_pairs: int
    impostor_pairs: int
    d_prime: float | None
    low_support: bool


@dataclass
class TargetRange:
    rows: list[WindowResult]
    argmax_by_bim: dict[str, BrightnessWindow | None]
    argmax_by_dprime: dict[str, BrightnessWindow | None]
    consensus: list[tuple[float, float]] | None


def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for lo, hi in sorted(intervals):
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return [(a, b) for a, b in out]


def _argmax(rows: list[WindowResult], key) -> BrightnessWindow | None:
    best = None
    for r in rows:  # first window wins ties
        v = key(r)
        if r.low_support or v is None:
            continue
        if best is None or v > key(best):
            best = r
    return best.window if best else None


def target_range_search(
    records: Sequence[ImageRecord],
    fsb: np.ndarray,
    bim: np.ndarray,
    source: ScoreSource,
    windows: Sequence[BrightnessWindow],
    min_genuine_pairs: int = 1000,
) -> TargetRange:
    """Score each window using only pairs with both images inside it."""
    if not windows:
        raise ValidationError("target range search needs at least one window")
    fsb = np.asarray(fsb, dtype=np.float64)
    usable = ~np.isnan(fsb)
    groups = np.array([r.group for r in records], dtype=object)
    names = sorted(set(groups[usable].tolist()))
    rows: list[WindowResult] = []
    for w in windows:
        inside = usable & w.contains(np.nan_to_num(fsb, nan=-1.0))
        acc = source.accumulate(np.where(inside, 0, -1), [w.label], None, scope="within")
        for g in names:
            sel = inside & (groups == g)
            key = PairKey(g, w.label, w.label)
            gen, imp = acc.genuine.get(key), acc.impostor.get(key)
            n_gen = gen.pair_count if gen else 0
            rows.append(
                WindowResult(
                    g,
                    w,
                    int(sel.sum()),
                    float(bim[sel].mean()) if sel.any() else None,
                    n_gen,
                    imp.pair_count if imp else 0,
                    d_prime_or_none(gen, imp),
                    n_gen < min_genuine_pairs,
                )
            )
    by_bim, by_dp = {}, {}
    for g in names:
        mine = [r for r in rows if r.group == g]
        by_bim[g] = _argmax(mine, lambda r: r.avg_bim)
        by_dp[g] = _argmax(mine, lambda r: r.d_prime)
    chosen = [(w.lo, w.hi) for w in by_dp.values() if w is not None]
    return TargetRange(rows, by_bim, by_dp, merge_intervals(chosen) if chosen else None)


def coverage_in(fsb: np.ndarray, groups: Sequence[str], intervals: Sequence[tuple[float, float]]) -> dict[str, float]:
    """Per-group fraction of usable images whose FSB falls in any closed interval."""
    fsb = np.asarray(fsb, dtype=np.float64)
    groups = np.asarray(groups, dtype=object)
    usable = ~np.isnan(fsb)
    hit = np.zeros(len(fsb), dtype=bool)
    for lo, hi in intervals:
        hit |= (fsb >= lo) & (fsb <= hi)
    out = {}
    for g in sorted(set(groups[usable].tolist())):
        sel = usable & (groups == g)
        out[g] = float(hit[sel].sum() / sel.sum())
    return out


# ------------------------------------------------------------------ report


@dataclass
class AuditReport:
    scheme: CategoryScheme
    group_schemes: dict[str, CategoryScheme] | None
    threshold: Threshold
    group_stats: dict[str, dict[str, Any]]
    fmr_table: list[dict[str, Any]]
    bim_table: list[dict[str, Any]]
    target: TargetRange
    coverage: dict[str, float] | None
    saturation: dict[str, dict[str, Any]]
    skipped_pairs: int
    excluded: dict[str, str]
    warnings: list[str]
    distributions: list[str]
    provenance: dict[str, Any]
    stats: Accumulation = field(repr=False)
    min_support: int = 1_000_000
    records: Sequence[ImageRecord] | None = field(default=None, repr=False)
    measurements: Measurements | None = field(default=None, repr=False)

    @property
    def groups(self) -> list[str]:
        return sorted(self.group_stats)

    def fmr_cell(self, group: str, a: str, b: str) -> dict[str, Any]:
        key = PairKey(group, ExposureCategory[a], ExposureCategory[b]).pair
        for row in self.fmr_table:
            if row["group"] == group and row["pair"] == key:
                return row
        raise KeyError((group, key))

    def bim_cell(self, group: str, cat: str) -> dict[str, Any]:
        for row in self.bim_table:
            if row["group"] == group and row["category"] == cat:
                return row
        raise KeyError((group, cat))

    def to_dict(self) -> dict[str, Any]:
        def window(w):
            return None if w is None else {"label": w.label, "lo": w.lo, "hi": w.hi}

        scheme = lambda s: {  # noqa: E731
            "percentiles": list(s.percentiles),
            "b5": s.b5,
            "b15": s.b15,
            "b85": s.b85,
            "b95": s.b95,
            "source_count": s.source_count,
        }
        return {
            "tool": {"name": "facelight", "version": __version__},
            "scheme": scheme(self.scheme),
            "group_schemes": None
            if self.group_schemes is None
            else {g: scheme(s) for g, s in sorted(self.group_schemes.items())},
            "threshold": {
                "value": self.threshold.value,
                "calibration_group": self.threshold.calibration_group,
                "target_fmr": self.threshold.target_fmr,
                "achieved_fmr": self.threshold.achieved_fmr,
                "impostor_scores": self.threshold.n_scores,
            },
            "groups": self.group_stats,
            "fmr_table": self.fmr_table,
            "bim_table": self.bim_table,
            "sliding_table": [
                {
                    "group": r.group,
                    "window": r.window.label,
                    "lo": r.window.lo,
                    "hi": r.window.hi,
                    "images": r.images,
                    "avg_bim": r.avg_bim,
                    "genuine_pairs": r.genuine_pairs,
                    "impostor_pairs": r.impostor_pairs,
                    "d_prime": r.d_prime,
                    "low_support": r.low_support,
                }
                for r in self.target.rows
            ],
            "target_range": {
                "argmax_by_bim": {g: window(w) for g, w in sorted(self.target.argmax_by_bim.items())},
                "argmax_by_dprime": {g: window(w) for g, w in sorted(self.target.argmax_by_dprime.items())},
                "consensus": None if self.target.consensus is None else [list(c) for c in self.target.consensus],
                "coverage": self.coverage,
            },
            "saturation": self.saturation,
            "skipped_pairs": self.skipped_pairs,
            "excluded_images": dict(sorted(self.excluded.items())),
            "warnings": self.warnings,
            "distributions": self.distributions,
            "provenance": self.provenance,
        }


def _sig(x: Any) -> Any:
    """Round floats to 6 significant digits, recursively; NaN/inf become null."""
    if isinstance(x, bool) or x is None:
        return x
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return float(f"{x:.6g}") if math.isfinite(x) else None
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, Mapping):
        return {str(k): _sig(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_sig(v) for v in x]
    return x


def report_json(report: AuditReport) -> str:
    return json.dumps(_sig(report.to_dict()), indent=2, sort_keys=False, ensure_ascii=False) + "\n"


# ---------------------------------------------------------------- pipeline


def _digest(path) -> str | None:
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def open_source(
    records: Sequence[ImageRecord],
    cfg: AuditConfig,
    embeddings=None,
    ids=None,
    scores=None,
    workers: int | None = None,
) -> ScoreSource:
    eng = engine_config(cfg, workers)
    if embeddings is not None:
        if ids is None:
            raise InputError("--embeddings needs the ids sidecar (--ids)")
        store = load_embeddings(embeddings, ids, normalize=cfg.normalize)
        return ScoreSource(records, EmbeddingScorer.from_store(records, store, link_embeddings(records, store)), eng)
    if scores is not None:
        return ScoreSource(records, TableScorer(records, load_score_table(scores)), eng)
    raise InputError("no score source: give embeddings (with ids) or a score table")


def run_audit(
    manifest,
    embeddings=None,
    ids=None,
    scores=None,
    config: AuditConfig | None = None,
    fsb_table=None,
    workers: int | None = None,
) -> AuditReport:
    """Load inputs from disk and run :func:`audit_records`."""
    cfg = config or AuditConfig()
    records = load_manifest(manifest)
    if embeddings is None and scores is None:
        raise InputError("no score source: give embeddings (with ids) or a score table")
    source = open_source(records, cfg, embeddings, ids, scores, workers)
    if fsb_table is not None:
        meas = read_fsb_csv(fsb_table, records)
    else:
        meas = measure_records(records, cfg.label_semantics, workers or cfg.threads or None)
    inputs = {
        "manifest": (Path(manifest).name, _digest(manifest)),
        "embeddings": (Path(embeddings).name, _digest(embeddings)) if embeddings else None,
        "ids": (Path(ids).name, _digest(ids)) if ids else None,
        "scores": (Path(scores).name, _digest(scores)) if scores else None,
        "fsb_table": (Path(fsb_table).name, _digest(fsb_table)) if fsb_table else None,
    }
    provenance = {
        "config": cfg.snapshot(),
        "inputs": {k: {"file": v[0], "sha256": v[1]} for k, v in inputs.items() if v is not None},
    }
    return audit_records(records, meas, source, cfg, provenance)


def fit_schemes(records, meas: Measurements, cfg: AuditConfig):
    usable = meas.usable
    groups = np.array([r.group for r in records], dtype=object)
    pooled = fit_category_scheme(meas.fsb[usable], cfg.percentiles)
    labels = np.full(len(records), -1, dtype=np.int64)
    per_group = None
    if cfg.scheme_mode == "per_group":
        per_group = {}
        for g in sorted(set(groups[usable].tolist())):
            sel = usable & (groups == g)
            per_group[g] = fit_category_scheme(meas.fsb[sel], cfg.percentiles)
            labels[sel] = categorize_many(meas.fsb[sel], per_group[g])
    else:
        labels[usable] = categorize_many(meas.fsb[usable], pooled)
    return pooled, per_group, labels


def audit_records(
    records: Sequence[ImageRecord],
    meas: Measurements,
    source: ScoreSource,
    cfg: AuditConfig,
    provenance: dict[str, Any] | None = None,
) -> AuditReport:
    warnings: list[str] = []
    groups = np.array([r.group for r in records], dtype=object)
    usable = meas.usable
    declared = sorted(set(groups.tolist()))
    present = sorted(set(groups[usable].tolist()))
    for g in declared:
        if g not in present:
            msg = f"group {g} has no usable images and is omitted"
            warnings.append(msg)
            log.warning(msg)
    if meas.excluded:
        warnings.append(f"{len(meas.excluded)} images excluded before analysis")
    if meas.no_nose:
        warnings.append(f"{meas.no_nose} images without nose pixels kept their full skin region")

    subjects_ok = any(
        len({r.subject_id for r, ok in zip(records, usable) if ok and r.group == g}) >= 2 for g in present
    )
    if not subjects_ok:
        raise ValidationError("no group has at least two subjects with usable images")
    if cfg.calibration_group not in present:
        raise ValidationError(f"calibration group {cfg.calibration_group!r} is absent or has no usable images")

    scheme, group_schemes, labels = fit_schemes(records, meas, cfg)
    threshold = source.calibrate(usable, cfg.calibration_group, cfg.target_fmr)
    log.info("threshold %.6g on %s (achieved FMR %.3g)", threshold.value, threshold.calibration_group, threshold.achieved_fmr)
    acc = source.accumulate(labels, CATEGORIES, threshold.value)
    if acc.skipped:
        warnings.append(f"{acc.skipped} pairs skipped (image without category or score)")

    gstats = {}
    for g in present:
        v = meas.fsb[usable & (groups == g)]
        gstats[g] = {
            "count": int(v.size),
            "mean": float(v.mean()),
            "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "single_image": bool(v.size == 1),
            "subjects": len({r.subject_id for r, ok in zip(records, usable) if ok and r.group == g}),
        }

    table_groups = sorted({k.group for k in acc.impostor} | set(present))
    fmr_rows = []
    for g in table_groups:
        for a, b in table_pair_order():
            st = acc.impostor.get(PairKey(g, a, b))
            n = st.pair_count if st else 0
            fmr_rows.append(
                {
                    "group": g,
                    "pair": f"{a.name},{b.name}",
                    "pair_count": n,
                    "above_threshold_count": st.above_threshold_count if st else 0,
                    "fmr": fmr(st),
                    "low_support": n < cfg.min_support,
                }
            )

    bim_rows = []
    for g in present:
        for c in CATEGORIES:
            sel = usable & (groups == g) & (labels == int(c))
            key = PairKey(g, c, c)
            imp, gen = acc.impostor.get(key), acc.genuine.get(key)
            n_imp = imp.pair_count if imp else 0
            dp = d_prime_or_none(gen, imp)
            reasons = []
            if n_imp == 0:
                reasons.append("no impostor pairs")
            elif n_imp < cfg.min_support:
                reasons.append(f"fewer than {cfg.min_support} impostor pairs")
            if dp is None:
                reasons.append("d-prime undefined")
            bim_rows.append(
                {
                    "group": g,
                    "category": c.name,
                    "images": int(sel.sum()),
                    "avg_bim": float(meas.bim[sel].mean()) if sel.any() else None,
                    "impostor_pairs": n_imp,
                    "genuine_pairs": gen.pair_count if gen else 0,
                    "fmr": fmr(imp),
                    "d_prime": dp,
                    "dash_reason": "; ".join(reasons) or None,
                }
            )

    windows = sliding_windows(
        cfg.window_lo,
        cfg.window_hi,
        cfg.window_width,
        cfg.window_step,
        cfg.window_label_origin,
        cfg.window_label_prefix,
    )
    target = target_range_search(records, meas.fsb, meas.bim, source, windows, cfg.min_genuine_pairs)
    if target.consensus is None:
        warnings.append("no window meets the genuine-pair support floor; consensus range undefined")
    coverage = coverage_in(meas.fsb, groups, target.consensus) if target.consensus else None

    sat = {
        g: {
            "impostor_lowest_bin_fraction": s.impostor_lowest_fraction,
            "genuine_highest_bin_fraction": s.genuine_highest_fraction,
            "impostor_saturated": s.impostor_saturated,
            "genuine_saturated": s.genuine_saturated,
        }
        for g, s in saturation_report(acc, cfg.saturation_fraction).items()
    }

    return AuditReport(
        scheme=scheme,
        group_schemes=group_schemes,
        threshold=threshold,
        group_stats=gstats,
        fmr_table=fmr_rows,
        bim_table=bim_rows,
        target=target,
        coverage=coverage,
        saturation=sat,
        skipped_pairs=acc.skipped,
        excluded=dict(meas.excluded),
        warnings=warnings,
        distributions=[distribution_filename(*sel) for sel in default_selection(acc, cfg)],
        provenance=provenance or {"config": cfg.snapshot()},
        stats=acc,
        min_support=cfg.min_support,
        records=records,
        measurements=meas,
    )


# ------------------------------------------------------------ distributions


def distribution_filename(group: str, pair: str, kind: str) -> str:
    return f"distributions/{group}_{pair.replace(',', '-')}_{kind}.csv"


def parse_selection(text: str) -> tuple[str, str, str]:
    """``GROUP:A,B:kind`` -> (group, canonical pair, kind)."""
    try:
        group, pair, kind = text.split(":")
        a, b = (ExposureCategory[x.strip()] for x in pair.split(","))
    except (ValueError, KeyError):
        raise ValidationError(f"bad bucket selection {text!r}; expected GROUP:CAT,CAT:genuine|impostor") from None
    if kind not in KINDS:
        raise ValidationError(f"bad kind {kind!r} in {text!r}")
    return group, PairKey(group, a, b).pair, kind


def default_selection(acc: Accumulation, cfg: AuditConfig) -> list[tuple[str, str, str]]:
    out = []
    groups = sorted({k.group for k in acc.impostor} | {k.group for k in acc.genuine})
    for g in groups:
        for p in cfg.export_pairs:
            a, b = (ExposureCategory[x.strip()] for x in p.split(","))
            key = PairKey(g, a, b)
            for kind in KINDS:
                st = acc.bucket(kind).get(key)
                if st is not None and st.pair_count:
                    out.append((g, key.pair, kind))
    return out


def _find(acc: Accumulation, group: str, pair: str, kind: str) -> PairStats:
    for key, st in acc.bucket(kind).items():
        if key.group == group and key.pair == pair:
            return st
    raise ValidationError(f"unknown bucket {group}:{pair}:{kind}")


def distribution_rows(stats: PairStats) -> list[tuple[float, float, int, float]]:
    edges = stats.bin_edges()
    width = (stats.hi - stats.lo) / stats.bins
    total = int(stats.hist.sum())
    return [
        (float(edges[i]), float(edges[i + 1]), int(c), float(c / (total * width)) if total else 0.0)
        for i, c in enumerate(stats.hist)
    ]


def export_distributions(acc: Accumulation, selection: Iterable[tuple[str, str, str]], out_dir) -> list[Path]:
    """Write one ``bin_low,bin_high,count,density`` CSV per selected bucket."""
    out_dir = Path(out_dir)
    written = []
    for group, pair, kind in selection:
        st = _find(acc, group, pair, kind)
        path = out_dir / distribution_filename(group, pair, kind)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count", "density"])
            for lo, hi, c, d in distribution_rows(st):
                w.writerow([repr(lo), repr(hi), c, repr(d)])
        written.append(path)
    return written


# -------------------------------------------------------------- raw stats


def save_stats(acc: Accumulation, path, threshold: float | None = None) -> None:
    keys, hists, counts, moments = [], [], [], []
    for kind in KINDS:
        for k, st in sorted(acc.bucket(kind).items(), key=lambda kv: (kv[0].group, str(kv[0].cat_a), str(kv[0].cat_b))):
            keys.append([kind, k.group, str(k.cat_a), str(k.cat_b)])
            hists.append(st.hist)
            counts.append([st.pair_count, st.above_threshold_count])
            moments.append([st.sum, st.sum_sq])
    any_st = next(iter(acc.impostor.values()), None) or next(iter(acc.genuine.values()), None) or PairStats()
    np.savez_compressed(
        path,
        keys=np.array(json.dumps(keys)),
        hist=np.array(hists, dtype=np.int64).reshape(len(keys), any_st.bins),
        counts=np.array(counts, dtype=np.int64).reshape(len(keys), 2),
        moments=np.array(moments, dtype=np.float64).reshape(len(keys), 2),
        layout=np.array([any_st.lo, any_st.hi, any_st.bins], dtype=np.float64),
        threshold=np.array(np.nan if threshold is None else threshold),
        skipped=np.array(acc.skipped),
    )


def load_stats(path) -> Accumulation:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"stats file not found: {path}")
    with np.load(path) as z:
        keys = json.loads(str(z["keys"]))
        lo, hi, bins = z["layout"]
        acc = Accumulation(skipped=int(z["skipped"]))
        for (kind, g, a, b), h, c, m in zip(keys, z["hist"], z["counts"], z["moments"]):
            cat = lambda s: ExposureCategory[s] if s in ExposureCategory.__members__ else s  # noqa: E731
            st = PairStats(float(lo), float(hi), int(bins), int(c[0]), int(c[1]), float(m[0]), float(m[1]), h.copy())
            acc.bucket(kind)[PairKey(g, cat(a), cat(b))] = st
    return acc


# ------------------------------------------------------------------ writing


def _cell(x, fmt: str) -> str:
    return DASH if x is None else format(x, fmt)


def render_text(report: AuditReport) -> str:
    """Aligned plain-text rendering of the report tables."""
    lines = []
    s, t = report.scheme, report.threshold
    lines.append(
        f"Exposure scheme (n={s.source_count}): SU < {s.b5:g} <= U < {s.b15:g} <= M < {s.b85:g} <= O < {s.b95:g} <= SO"
    )
    lines.append(
        f"Threshold {t.value:.6g} from {t.calibration_group} impostors "
        f"(target FMR {t.target_fmr:g}, achieved {t.achieved_fmr:.3g}, n={t.n_scores})"
    )
    lines.append("")
    lines.append("FSB by group")
    for g, st in report.group_stats.items():
        lines.append(f"  {g:<8} n={st['count']:<7} mean={st['mean']:.1f}  std={st['std']:.1f}")
    lines.append("")

    groups = sorted({r["group"] for r in report.fmr_table})
    lines.append(f"FMR by impostor pair brightness (* = fewer than {report.min_support:,} pairs)")
    head = f"{'pair':<9}" + "".join(f"{g:>26}" for g in groups)
    lines += [head, "-" * len(head)]
    for a, b in table_pair_order():
        pair = f"{a.name},{b.name}"
        cells = []
        for g in groups:
            row = next(r for r in report.fmr_table if r["group"] == g and r["pair"] == pair)
            mark = "*" if row["low_support"] else " "
            cells.append(f"{row['pair_count']:>14,} {_cell(row['fmr'], '.4f'):>9}{mark}")
        lines.append(f"({pair})".ljust(9) + "".join(f"{c:>26}" for c in cells))
    lines.append("")

    lines.append("Average BIM, FMR and d' per same-category pair")
    bgroups = sorted({r["group"] for r in report.bim_table})
    head = f"{'pair':<9}" + "".join(f"{g:>26}" for g in bgroups)
    lines += [head, "-" * len(head)]
    for c in CATEGORIES:
        cells = []
        for g in bgroups:
            r = report.bim_cell(g, c.name)
            dash = r["dash_reason"] is not None
            f = None if dash else r["fmr"]
            d = None if dash else r["d_prime"]
            cells.append(f"{_cell(r['avg_bim'], '.2f'):>8} {_cell(f, '.4f'):>8} {_cell(d, '.1f'):>6}")
        lines.append(f"({c.name},{c.name})".ljust(9) + "".join(f"{x:>26}" for x in cells))
    lines.append("")

    lines.append("Sliding windows: average BIM and d' (! = below genuine-pair floor)")
    head = f"{'window':<12}" + "".join(f"{g:>20}" for g in bgroups)
    lines += [head, "-" * len(head)]
    labels = []
    for r in report.target.rows:
        if r.window not in labels:
            labels.append(r.window)
    for w in labels:
        cells = []
        for g in bgroups:
            r = next((x for x in report.target.rows if x.window == w and x.group == g), None)
            if r is None:
                cells.append(DASH)
                continue
            mark = "!" if r.low_support else " "
            cells.append(f"{_cell(r.avg_bim, '.2f'):>8} {_cell(r.d_prime, '.2f'):>8}{mark}")
        lines.append(f"{w.label:<4}{w.lo:g}-{w.hi:g}".ljust(12) + "".join(f"{c:>20}" for c in cells))
    lines.append("")
    for g in bgroups:
        wb, wd = report.target.argmax_by_bim.get(g), report.target.argmax_by_dprime.get(g)
        lines.append(f"  {g:<8} best BIM: {wb or DASH}   best d': {wd or DASH}")
    if report.target.consensus:
        rng = ", ".join(f"{lo:g}-{hi:g}" for lo, hi in report.target.consensus)
        lines.append(f"Target range: {rng}")
        for g, f in (report.coverage or {}).items():
            lines.append(f"  {g:<8} {100 * f:.0f}% of images inside")
    else:
        lines.append("Target range: undefined (no supported window)")
    lines.append("")
    lines.append("Score saturation")
    for g, s in report.saturation.items():
        lo = s["impostor_lowest_bin_fraction"]
        hi = s["genuine_highest_bin_fraction"]
        flag = " SATURATED" if s["impostor_saturated"] or s["genuine_saturated"] else ""
        lines.append(f"  {g:<8} impostor@lowest {_cell(lo, '.3f')}  genuine@highest {_cell(hi, '.3f')}{flag}")
    if report.warnings:
        lines.append("")
        lines += [f"warning: {w}" for w in report.warnings]
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    if x is None:
        return DASH
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def write_sliding_csv(path: Path, target: TargetRange) -> None:
    _write_rows(
        path,
        ["group", "window", "lo", "hi", "images", "avg_bim", "genuine_pairs", "impostor_pairs", "d_prime", "low_support"],
        (
            [r.group, r.window.label, r.window.lo, r.window.hi, r.images, r.avg_bim, r.genuine_pairs,
             r.impostor_pairs, r.d_prime, r.low_support]
            for r in target.rows
        ),
    )


def write_outputs(report: AuditReport, out_dir) -> dict[str, Path]:
    """Write every report artifact under ``out_dir``."""
    records, meas = report.records, report.measurements
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "text": out / "report.txt"}
    paths["report"].write_text(report_json(report), encoding="utf-8")
    paths["text"].write_text(render_text(report), encoding="utf-8")

    paths["fmr_table"] = out / "fmr_table.csv"
    _write_rows(
        paths["fmr_table"],
        ["group", "pair", "pair_count", "above_threshold_count", "fmr", "low_support"],
        ([r["group"], r["pair"], r["pair_count"], r["above_threshold_count"], r["fmr"], r["low_support"]] for r in report.fmr_table),
    )
    paths["bim_table"] = out / "bim_table.csv"
    _write_rows(
        paths["bim_table"],
        ["group", "category", "images", "avg_bim", "impostor_pairs", "genuine_pairs", "fmr", "d_prime", "dash_reason"],
        (
            [r["group"], r["category"], r["images"], r["avg_bim"], r["impostor_pairs"], r["genuine_pairs"],
             r["fmr"], r["d_prime"], r["dash_reason"] or ""]
            for r in report.bim_table
        ),
    )
    paths["sliding_table"] = out / "sliding_table.csv"
    write_sliding_csv(paths["sliding_table"], report.target)

    selection = []
    for name in report.distributions:
        stem = Path(name).stem
        group, pair, kind = stem.rsplit("_", 2)
        selection.append((group, pair.replace("-", ","), kind))
    export_distributions(report.stats, selection, out)

    paths["stats"] = out / "stats.npz"
    save_stats(report.stats, paths["stats"], report.threshold.value)

    if records is not None and meas is not None:
        groups = np.array([r.group for r in records], dtype=object)
        for g in report.groups:
            sel = meas.usable & (groups == g)
            p = out / f"hist_{g}.csv"
            _write_rows(p, ["intensity", "count"], enumerate(fsb_histogram(meas.fsb[sel]).tolist()))
        paths["fsb"] = out / "fsb.csv"
        _, _, labels = fit_schemes(records, meas, _scheme_cfg(report))
        write_fsb_csv(paths["fsb"], records, meas, labels)

    paths["run_info"] = out / "run_info.json"
    paths["run_info"].write_text(
        json.dumps({"finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "version": __version__}, indent=2) + "\n",
        encoding="utf-8",
    )
    return paths


def _scheme_cfg(report: AuditReport) -> AuditConfig:
    snap = report.provenance.get("config", {})
    cfg = AuditConfig()
    return cfg.replace(
        percentiles=tuple(snap.get("percentiles", cfg.percentiles)),
        scheme_mode=snap.get("scheme_mode", cfg.scheme_mode),
    )
