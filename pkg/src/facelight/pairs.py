"""Genuine/impostor pair enumeration, scoring, threshold calibration and
per-bucket score statistics.

The dense engine never materializes the pair list. Images are split by
(group, label) and every pair of index lists is cut into rectangular tiles;
each tile is one matrix product and belongs to exactly one bucket, so the
per-pair work is a couple of masked reductions. Tiles are processed by a
thread pool and their partial statistics merged in plan order, which keeps
results independent of the worker count.
"""

from __future__ import annotations

import logging
import math
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

from .errors import ValidationError
from .ingest import ImageRecord, ScoreTable

log = logging.getLogger(__name__)

GENUINE = "genuine"
IMPOSTOR = "impostor"
KINDS = (GENUINE, IMPOSTOR)

DEFAULT_SCORE_RANGE = (-1.0, 1.0)
DEFAULT_SCORE_BINS = 2000
DEFAULT_TILE = 1024
DEFAULT_MIN_SUPPORT = 1_000_000


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0)) or 1
    except AttributeError:  # not on every platform
        return os.cpu_count() or 1


def is_match(scores, threshold: float):
    """The single decision predicate: a comparison is a match iff score >= threshold."""
    return np.asarray(scores) >= threshold


# --------------------------------------------------------------------- keys


@dataclass(frozen=True)
class PairKey:
    """Bucket key; the two labels are stored in canonical (sorted) order."""

    group: str
    cat_a: Any
    cat_b: Any

    def __post_init__(self):
        if self.cat_b < self.cat_a:
            a, b = self.cat_a, self.cat_b
            object.__setattr__(self, "cat_a", b)
            object.__setattr__(self, "cat_b", a)

    @property
    def pair(self) -> str:
        return f"{self.cat_a},{self.cat_b}"

    def __str__(self) -> str:
        return f"{self.group}:({self.pair})"


# -------------------------------------------------------------------- stats


@dataclass
class PairStats:
    """Mergeable summary of a score stream: counts, moments and a histogram."""

    lo: float = DEFAULT_SCORE_RANGE[0]
    hi: float = DEFAULT_SCORE_RANGE[1]
    bins: int = DEFAULT_SCORE_BINS
    pair_count: int = 0
    above_threshold_count: int = 0
    sum: float = 0.0
    sum_sq: float = 0.0
    hist: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not self.hi > self.lo or self.bins <= 0:
            raise ValidationError(f"bad histogram layout [{self.lo}, {self.hi}] x {self.bins}")
        if self.hist is None:
            self.hist = np.zeros(self.bins, dtype=np.int64)

    @classmethod
    def like(cls, other: "PairStats") -> "PairStats":
        return cls(other.lo, other.hi, other.bins)

    def bin_index(self, scores: np.ndarray) -> np.ndarray:
        idx = np.floor((scores - self.lo) * (self.bins / (self.hi - self.lo))).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1, out=idx)

    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    def add(self, scores, threshold: float | None = None) -> "PairStats":
        s = np.asarray(scores, dtype=np.float64).ravel()
        if s.size == 0:
            return self
        self.pair_count += int(s.size)
        if threshold is not None:
            self.above_threshold_count += int(np.count_nonzero(is_match(s, threshold)))
        self.sum += float(s.sum())
        self.sum_sq += float((s * s).sum())
        self.hist += np.bincount(self.bin_index(s), minlength=self.bins)
        return self

    def merge(self, other: "PairStats") -> "PairStats":
        if (self.lo, self.hi, self.bins) != (other.lo, other.hi, other.bins):
            raise ValidationError("cannot merge PairStats with different histogram layouts")
        return PairStats(
            self.lo,
            self.hi,
            self.bins,
            self.pair_count + other.pair_count,
            self.above_threshold_count + other.above_threshold_count,
            self.sum + other.sum,
            self.sum_sq + other.sum_sq,
            self.hist + other.hist,
        )

    __add__ = merge

    def mean(self) -> float:
        return self.sum / self.pair_count

    def variance(self) -> float:
        n = self.pair_count
        if n < 2:
            raise ValidationError("variance needs at least two scores")
        return max(0.0, (self.sum_sq - self.sum * self.sum / n) / (n - 1))

    def std(self) -> float:
        return math.sqrt(self.variance())


def fmr(stats: PairStats | None) -> float | None:
    """Fraction of impostor comparisons at or above threshold; None for an empty bucket."""
    if stats is None or stats.pair_count == 0:
        return None
    return stats.above_threshold_count / stats.pair_count


def d_prime(genuine: PairStats, impostor: PairStats) -> float | None:
    """|mu_g - mu_i| / sqrt((var_g + var_i) / 2) with sample variances.

    Returns None when both variances are zero (separation undefined).
    """
    if genuine.pair_count < 2 or impostor.pair_count < 2:
        raise ValidationError("d-prime needs at least two genuine and two impostor scores")
    pooled = (genuine.variance() + impostor.variance()) / 2
    if pooled == 0:
        return None
    return abs(genuine.mean() - impostor.mean()) / math.sqrt(pooled)


def d_prime_or_none(genuine: PairStats | None, impostor: PairStats | None) -> float | None:
    if genuine is None or impostor is None or genuine.pair_count < 2 or impostor.pair_count < 2:
        return None
    return d_prime(genuine, impostor)


def cosine_score(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"dimension mismatch {x.shape} vs {y.shape}")
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValidationError("cosine similarity of a zero-norm vector is undefined")
    return float(np.dot(x, y) / (nx * ny))


def unit_rows(rows: np.ndarray) -> np.ndarray:
    u = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(u, axis=1)
    if (norms == 0).any():
        raise ValidationError(f"zero-norm embedding at row {int(np.flatnonzero(norms == 0)[0])}")
    return u / norms[:, None]


# -------------------------------------------------------------- threshold


@dataclass(frozen=True)
class Threshold:
    value: float
    calibration_group: str
    target_fmr: float
    achieved_fmr: float
    n_scores: int = 0


def _allowed_matches(n: int, target: float) -> int:
    """Largest m with m / n <= target, judged with the same float comparison used downstream."""
    m = int(math.floor(target * n))
    while (m + 1) / n <= target:
        m += 1
    while m > 0 and m / n > target:
        m -= 1
    return m


def required_scores(target: float) -> int:
    return math.ceil(1 / target - 1e-9)


def threshold_from_top(top: np.ndarray, n: int, target_fmr: float, group: str = "") -> Threshold:
    """Calibrate from the largest scores of a distribution of ``n`` scores.

    ``top`` must contain at least the ``m + 1`` largest scores (m = allowed
    matches), or all scores when n is smaller.
    """
    if not 0 < target_fmr <= 1:
        raise ValidationError(f"target FMR must be in (0, 1], got {target_fmr}")
    need = required_scores(target_fmr)
    if n < need:
        raise ValidationError(
            f"threshold calibration needs at least {need} impostor scores for target {target_fmr:g}, got {n}"
        )
    m = _allowed_matches(n, target_fmr)
    if m == 0:
        raise ValidationError(f"target FMR {target_fmr:g} unresolvable below one score of {n}")
    s = np.sort(np.asarray(top, dtype=np.float64))[::-1]
    if s.size < min(n, m + 1):
        raise ValidationError("not enough top scores supplied for calibration")
    # value s[k-1] matches exactly k scores when it differs from the next one
    k = m
    while k > 0 and k < n and k < s.size and s[k - 1] == s[k]:
        k -= 1
    if k == 0:
        raise ValidationError(
            f"target FMR {target_fmr:g} unresolvable: more than {m} scores tie at the maximum"
        )
    return Threshold(float(s[k - 1]), group, target_fmr, k / n, n)


def calibrate_threshold(scores, target_fmr: float = 1e-4, group: str = "") -> Threshold:
    """Smallest observed score t with (#scores >= t) / n <= target_fmr."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.size
    if n >= required_scores(target_fmr):
        m = _allowed_matches(n, target_fmr)
        k = min(n, m + 1)
        s = _top_k(s, k)
    return threshold_from_top(s, n, target_fmr, group)


class TopScores:
    """Keeps the k largest of a stream of score arrays."""

    def __init__(self, k: int):
        self.k = k
        self.values = np.empty(0, dtype=np.float64)
        self.count = 0

    def add(self, scores: np.ndarray) -> None:
        self.count += int(scores.size)
        self.values = _top_k(np.concatenate([self.values, scores.ravel()]), self.k)


def _top_k(v: np.ndarray, k: int) -> np.ndarray:
    if v.size <= k:
        return v
    # copy so the caller does not pin the whole partitioned buffer
    return np.partition(v, v.size - k)[v.size - k :].copy()


# --------------------------------------------------------------- planning


@dataclass(frozen=True)
class PairBlock:
    """A rectangle of the pair space whose pairs all share one bucket.

    ``diagonal`` means rows and cols are the same index list and only the
    strict upper triangle is in the block.
    """

    group: str
    label_a: int
    label_b: int
    rows: np.ndarray
    cols: np.ndarray
    diagonal: bool = False

    @property
    def size(self) -> int:
        n = len(self.rows)
        return n * (n - 1) // 2 if self.diagonal else n * len(self.cols)


def _chunks(idx: np.ndarray, tile: int) -> list[np.ndarray]:
    return [idx[i : i + tile] for i in range(0, len(idx), tile)]


def plan_blocks(
    groups: Sequence[str],
    labels: np.ndarray,
    n_labels: int,
    scope: str = "within",
    tile: int = DEFAULT_TILE,
) -> list[PairBlock]:
    """Deterministic tiling of all in-scope pairs among images with label >= 0.

    Within scope pairs images of the same group; cross scope additionally pairs
    every two distinct groups under the key ``"g1|g2"``.
    """
    if scope not in ("within", "cross"):
        raise ValidationError(f"unknown impostor scope {scope!r}")
    if tile <= 0:
        raise ValidationError("tile size must be positive")
    groups = np.asarray(groups, dtype=object)
    labels = np.asarray(labels)
    names = sorted(set(groups.tolist()))
    members = {
        g: [np.flatnonzero((groups == g) & (labels == lab)) for lab in range(n_labels)] for g in names
    }
    blocks: list[PairBlock] = []
    for g in names:
        for la in range(n_labels):
            for lb in range(la, n_labels):
                a, b = members[g][la], members[g][lb]
                if la == lb:
                    parts = _chunks(a, tile)
                    for i, r in enumerate(parts):
                        for j in range(i, len(parts)):
                            if i == j and len(r) < 2:
                                continue
                            blocks.append(PairBlock(g, la, la, r, parts[j], diagonal=i == j))
                else:
                    for r in _chunks(a, tile):
                        for c in _chunks(b, tile):
                            blocks.append(PairBlock(g, la, lb, r, c))
    if scope == "cross":
        for x, g1 in enumerate(names):
            for g2 in names[x + 1 :]:
                key = f"{g1}|{g2}"
                for la in range(n_labels):
                    for lb in range(n_labels):
                        for r in _chunks(members[g1][la], tile):
                            for c in _chunks(members[g2][lb], tile):
                                blocks.append(PairBlock(key, min(la, lb), max(la, lb), r, c))
    return blocks


_TRI_CACHE: dict[int, np.ndarray] = {}


def _upper(n: int) -> np.ndarray:
    m = _TRI_CACHE.get(n)
    if m is None:
        m = np.triu(np.ones((n, n), dtype=bool), 1)
        if n <= 4096:
            _TRI_CACHE[n] = m
    return m


def _block_masks(block: PairBlock, subjects: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    same = subjects[block.rows][:, None] == subjects[block.cols][None, :]
    if block.diagonal:
        tri = _upper(len(block.rows))
        return same & tri, ~same & tri
    return same, ~same


def _subject_codes(records: Sequence[ImageRecord]) -> np.ndarray:
    codes: dict[str, int] = {}
    return np.array([codes.setdefault(r.subject_id, len(codes)) for r in records], dtype=np.int64)


def enumerate_pairs(
    records: Sequence[ImageRecord],
    kind: str,
    scope: str = "within",
    labels: np.ndarray | None = None,
    tile: int = DEFAULT_TILE,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream (index_a, index_b) arrays, one per tile, each unordered pair once."""
    if kind not in KINDS:
        raise ValidationError(f"kind must be one of {KINDS}")
    if labels is None:
        labels = np.zeros(len(records), dtype=np.int64)
    n_labels = int(labels.max()) + 1 if len(labels) else 0
    subjects = _subject_codes(records)
    for block in plan_blocks([r.group for r in records], labels, n_labels, scope, tile):
        gen, imp = _block_masks(block, subjects)
        ii, jj = np.nonzero(gen if kind == GENUINE else imp)
        if ii.size:
            yield block.rows[ii], block.cols[jj]


def count_pairs(
    groups: Sequence[str], subjects: np.ndarray, usable: np.ndarray, scope: str = "within"
) -> dict[str, dict[str, int]]:
    """Closed-form genuine/impostor pair counts per group key among usable images."""
    groups = np.asarray(groups, dtype=object)
    out: dict[str, dict[str, int]] = {}
    per_group: dict[str, Counter] = {}
    for g, s, ok in zip(groups, subjects, usable):
        if ok:
            per_group.setdefault(g, Counter())[int(s)] += 1
    names = sorted(set(groups.tolist()))
    for g in names:
        c = per_group.get(g, Counter())
        n = sum(c.values())
        gen = sum(k * (k - 1) // 2 for k in c.values())
        out[g] = {GENUINE: gen, IMPOSTOR: n * (n - 1) // 2 - gen}
    if scope == "cross":
        for x, g1 in enumerate(names):
            for g2 in names[x + 1 :]:
                c1, c2 = per_group.get(g1, Counter()), per_group.get(g2, Counter())
                gen = sum(v * c2.get(s, 0) for s, v in c1.items())
                out[f"{g1}|{g2}"] = {GENUINE: gen, IMPOSTOR: sum(c1.values()) * sum(c2.values()) - gen}
    return out


# ------------------------------------------------------------ accumulation


@dataclass
class Accumulation:
    genuine: dict[PairKey, PairStats] = field(default_factory=dict)
    impostor: dict[PairKey, PairStats] = field(default_factory=dict)
    skipped: int = 0

    def bucket(self, kind: str) -> dict[PairKey, PairStats]:
        return self.genuine if kind == GENUINE else self.impostor

    def total_pairs(self) -> int:
        return sum(s.pair_count for s in self.genuine.values()) + sum(
            s.pair_count for s in self.impostor.values()
        )

    def merge(self, other: "Accumulation") -> "Accumulation":
        out = Accumulation(dict(self.genuine), dict(self.impostor), self.skipped + other.skipped)
        for kind in KINDS:
            mine = out.bucket(kind)
            for k, v in other.bucket(kind).items():
                mine[k] = mine[k].merge(v) if k in mine else v
        return out


def _map_ordered(fn: Callable, items: Sequence, workers: int | None) -> list:
    workers = workers or default_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class EmbeddingScorer:
    """Cosine scores from per-image embedding rows (None rows are unscorable)."""

    def __init__(self, rows: np.ndarray, available: np.ndarray | None = None):
        rows = np.asarray(rows)
        if available is None:
            available = np.ones(len(rows), dtype=bool)
        self.available = np.asarray(available, dtype=bool)
        unit = np.zeros(rows.shape, dtype=np.float64)
        unit[self.available] = unit_rows(rows[self.available])
        self.unit = unit

    @classmethod
    def from_store(cls, records: Sequence[ImageRecord], store, row_index: np.ndarray) -> "EmbeddingScorer":
        rows = np.zeros((len(records), store.dim), dtype=np.float32)
        ok = row_index >= 0
        rows[ok] = store.rows[row_index[ok]]
        return cls(rows, ok)

    def block_scores(self, block: PairBlock) -> np.ndarray:
        return self.unit[block.rows] @ self.unit[block.cols].T


def _label_key(block: PairBlock, label_names: Sequence) -> PairKey:
    return PairKey(block.group, label_names[block.label_a], label_names[block.label_b])


@dataclass
class EngineConfig:
    score_range: tuple[float, float] = DEFAULT_SCORE_RANGE
    score_bins: int = DEFAULT_SCORE_BINS
    scope: str = "within"
    tile: int = DEFAULT_TILE
    workers: int | None = None

    def new_stats(self) -> PairStats:
        return PairStats(self.score_range[0], self.score_range[1], self.score_bins)


def _skipped(groups, subjects, labels, usable, scope) -> int:
    everyone = count_pairs(groups, subjects, np.ones(len(groups), dtype=bool), scope)
    scored = count_pairs(groups, subjects, usable & (labels >= 0), scope)
    return sum(sum(v.values()) for v in everyone.values()) - sum(sum(v.values()) for v in scored.values())


def accumulate_dense(
    records: Sequence[ImageRecord],
    scorer: EmbeddingScorer,
    labels: np.ndarray,
    label_names: Sequence,
    threshold: float | None,
    config: EngineConfig | None = None,
) -> Accumulation:
    """Bucket every in-scope pair by (group, label_a, label_b) and kind.

    Images with label < 0 or without an embedding are skipped; the number of
    pairs lost that way is reported in ``skipped``.
    """
    config = config or EngineConfig()
    labels = np.asarray(labels)
    groups = [r.group for r in records]
    subjects = _subject_codes(records)
    usable_labels = np.where(scorer.available, labels, -1)
    missing = [r.image_id for r, ok, lab in zip(records, scorer.available, labels) if lab >= 0 and not ok]
    if missing:
        log.warning("%d images have no embedding and are skipped (first: %s)", len(missing), missing[0])
    blocks = plan_blocks(groups, usable_labels, len(label_names), config.scope, config.tile)

    def run(block: PairBlock):
        s = scorer.block_scores(block)
        gen, imp = _block_masks(block, subjects)
        out = []
        for kind, m in ((GENUINE, gen), (IMPOSTOR, imp)):
            if not m.any():
                continue
            vals = s.ravel() if m.all() else s[m]
            out.append((kind, config.new_stats().add(vals, threshold)))
        return out

    acc = Accumulation(skipped=_skipped(groups, subjects, labels, scorer.available, config.scope))
    for block, parts in zip(blocks, _map_ordered(run, blocks, config.workers)):
        key = _label_key(block, label_names)
        for kind, st in parts:
            d = acc.bucket(kind)
            d[key] = d[key].merge(st) if key in d else st
    return acc


def dense_impostor_top(
    records: Sequence[ImageRecord],
    scorer: EmbeddingScorer,
    usable: np.ndarray,
    group: str,
    target_fmr: float,
    config: EngineConfig | None = None,
) -> Threshold:
    """Calibrate on all impostor pairs of one group without holding every score."""
    config = config or EngineConfig()
    in_group = np.array([r.group == group for r in records]) & usable & scorer.available
    subjects = _subject_codes(records)
    n = count_pairs([r.group for r in records], subjects, in_group)[group][IMPOSTOR] if in_group.any() else 0
    if n < required_scores(target_fmr):
        raise ValidationError(
            f"calibration group {group!r} has {n} impostor pairs; "
            f"target FMR {target_fmr:g} needs at least {required_scores(target_fmr)}"
        )
    k = min(n, _allowed_matches(n, target_fmr) + 1)
    labels = np.where(in_group, 0, -1)
    blocks = plan_blocks([r.group for r in records], labels, 1, "within", config.tile)

    def run(block: PairBlock):
        _, imp = _block_masks(block, subjects)
        s = scorer.block_scores(block)
        return _top_k(s[imp], k)

    top = TopScores(k)
    for part in _map_ordered(run, blocks, config.workers):
        top.add(part)
    return threshold_from_top(top.values, n, target_fmr, group)


class TableScorer:
    """Scores taken from a precomputed ScoreTable instead of embeddings."""

    def __init__(self, records: Sequence[ImageRecord], table: ScoreTable):
        index = {r.image_id: i for i, r in enumerate(records)}
        ia = np.array([index.get(x, -1) for x in table.id_a], dtype=np.int64)
        ib = np.array([index.get(x, -1) for x in table.id_b], dtype=np.int64)
        unknown = int(((ia < 0) | (ib < 0)).sum())
        if unknown:
            first = next(x for x, y in zip(table.id_a, table.id_b) if x not in index or y not in index)
            log.warning("%d score rows reference ids outside the manifest (e.g. %s); skipped", unknown, first)
        self.unknown = unknown
        ok = (ia >= 0) & (ib >= 0)
        self.ia, self.ib, self.scores = ia[ok], ib[ok], table.scores[ok]

    def _classify(self, records, labels, scope):
        groups = np.array([r.group for r in records], dtype=object)
        subjects = _subject_codes(records)
        ga, gb = groups[self.ia], groups[self.ib]
        la, lb = labels[self.ia], labels[self.ib]
        in_scope = (ga == gb) if scope == "within" else np.ones(len(ga), dtype=bool)
        usable = in_scope & (la >= 0) & (lb >= 0)
        genuine = subjects[self.ia] == subjects[self.ib]
        return ga, gb, la, lb, in_scope, usable, genuine

    def accumulate(self, records, labels, label_names, threshold, config: EngineConfig | None = None) -> Accumulation:
        config = config or EngineConfig()
        labels = np.asarray(labels)
        ga, gb, la, lb, in_scope, usable, genuine = self._classify(records, labels, config.scope)
        acc = Accumulation(skipped=int((in_scope & ~usable).sum()) + self.unknown)
        lo, hi = np.minimum(la, lb), np.maximum(la, lb)
        gkey = np.where(ga == gb, ga, np.where(ga < gb, ga + "|" + gb, gb + "|" + ga)) if len(ga) else ga
        idx = np.flatnonzero(usable)
        combos = sorted({(gkey[i], int(lo[i]), int(hi[i]), bool(genuine[i])) for i in idx})
        for g, a, b, gen in combos:
            sel = idx[(gkey[idx] == g) & (lo[idx] == a) & (hi[idx] == b) & (genuine[idx] == gen)]
            key = PairKey(g, label_names[a], label_names[b])
            acc.bucket(GENUINE if gen else IMPOSTOR)[key] = config.new_stats().add(self.scores[sel], threshold)
        return acc

    def calibrate(self, records, usable: np.ndarray, group: str, target_fmr: float) -> Threshold:
        labels = np.where(usable, 0, -1)
        ga, _, _, _, _, ok, genuine = self._classify(records, labels, "within")
        sel = ok & (ga == group) & ~genuine
        return calibrate_threshold(self.scores[sel], target_fmr, group)


# ------------------------------------------------------------- saturation


@dataclass(frozen=True)
class Saturation:
    impostor_lowest_fraction: float | None
    genuine_highest_fraction: float | None
    impostor_saturated: bool
    genuine_saturated: bool


def saturation_report(acc: Accumulation, limit: float = 0.5) -> dict[str, Saturation]:
    """Per group, the share of impostor scores in the lowest histogram bin and of
    genuine scores in the highest bin."""
    out = {}
    groups = sorted({k.group for k in acc.impostor} | {k.group for k in acc.genuine})
    for g in groups:
        imp = [s for k, s in acc.impostor.items() if k.group == g]
        gen = [s for k, s in acc.genuine.items() if k.group == g]
        n_imp = sum(s.pair_count for s in imp)
        n_gen = sum(s.pair_count for s in gen)
        low = sum(int(s.hist[0]) for s in imp) / n_imp if n_imp else None
        high = sum(int(s.hist[-1]) for s in gen) / n_gen if n_gen else None
        out[g] = Saturation(
            low,
            high,
            low is not None and low > limit,
            high is not None and high > limit,
        )
    return out
