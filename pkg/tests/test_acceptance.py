"""Acceptance criteria A1-A8. Each test records a verdict that is printed as
one PASS/FAIL line at the end of the run."""

from __future__ import annotations

import itertools
import json
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from facelight.audit import run_audit
from facelight.brightness import categorize_many, compute_fsb, fit_category_scheme
from facelight.cli import main as cli_main
from facelight.config import AuditConfig
from facelight.ingest import DEFAULT_LABEL_SEMANTICS, GrayImage, ImageRecord, LabelMap
from facelight.pairs import (
    GENUINE,
    IMPOSTOR,
    EmbeddingScorer,
    EngineConfig,
    PairKey,
    PairStats,
    accumulate_dense,
    calibrate_threshold,
    d_prime,
)
from facelight.skinregion import derive_skin_mask
from facelight.synthetic import SyntheticConfig, write_dataset

from conftest import ACCEPTANCE

A5_CONFIG = AuditConfig(target_fmr=1e-3)
A6_CONFIG = AuditConfig(target_fmr=1e-3, window_lo=100, window_hi=260, window_label_origin=1)


def verdict(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    assert ok, f"{criterion}: {detail}"


# --------------------------------------------------------------------- A1


SKIN, NOSE = 1, 10


def naive_skin_fsb(pixels, labels):
    """Pixel-by-pixel skin selection and integer summation, no numpy."""
    h, w = len(labels), len(labels[0])
    nose_rows = [y for y in range(h) if NOSE in labels[y]]
    last = nose_rows[-1] if nose_rows else h - 1
    total = count = 0
    counts = [0] * 256
    for y in range(last + 1):
        for x in range(w):
            if labels[y][x] == SKIN:
                v = pixels[y][x]
                total += v
                count += 1
                counts[v] += 1
    mean = total / count
    bim = sum(abs(i - mean) * c / count for i, c in enumerate(counts))
    return mean, bim


def test_a1_metric_exactness():
    rng = np.random.default_rng(2024)
    fixtures = []
    while len(fixtures) < 1000:
        h, w = rng.integers(4, 40, 2)
        labels = rng.choice([0, 1, 1, 1, 1, 2, 4, 10, 12, 17], size=(h, w)).astype(np.uint8)
        if not (labels == SKIN).any():
            continue
        pixels = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
        fixtures.append((pixels, labels))

    t0 = time.perf_counter()
    got = []
    for pixels, labels in fixtures:
        mask = derive_skin_mask(LabelMap(labels, DEFAULT_LABEL_SEMANTICS))
        if mask.pixel_count:
            got.append(compute_fsb(GrayImage(pixels), mask))
    elapsed = time.perf_counter() - t0

    fsb_exact = bim_ok = 0
    worst = 0.0
    for (pixels, labels), prof in zip(fixtures, got):
        mean, bim = naive_skin_fsb(pixels.tolist(), labels.tolist())
        fsb_exact += prof.fsb == mean
        worst = max(worst, abs(prof.bim - bim))
        bim_ok += abs(prof.bim - bim) <= 1e-12
    n = len(fixtures)
    ok = len(got) == n and fsb_exact == n and bim_ok == n and elapsed < 5
    verdict("A1", ok, f"FSB exact {fsb_exact}/{n}, BIM max err {worst:.1e}, {elapsed:.2f}s (limit 5s)")


# --------------------------------------------------------------------- A2


def test_a2_category_populations():
    values = np.random.default_rng(7).permutation(np.arange(10_000) * 0.0253 + 1.5)
    assert np.unique(values).size == 10_000
    t0 = time.perf_counter()
    counts = np.bincount(categorize_many(values, fit_category_scheme(values)), minlength=5)
    elapsed = time.perf_counter() - t0
    want = np.array([500, 1000, 7000, 1000, 500])
    ok = np.abs(counts - want).max() <= 1 and elapsed < 1
    verdict("A2", ok, f"sizes {counts.tolist()} vs {want.tolist()} (+/-1), {elapsed:.3f}s (limit 1s)")


# --------------------------------------------------------------------- A3


def materialized_oracle(recs, emb, labels, threshold):
    scores = {GENUINE: {}, IMPOSTOR: {}}
    for i, j in itertools.combinations(range(len(recs)), 2):
        if recs[i].group != recs[j].group:
            continue
        s = float(np.dot(emb[i], emb[j]) / (np.linalg.norm(emb[i]) * np.linalg.norm(emb[j])))
        kind = GENUINE if recs[i].subject_id == recs[j].subject_id else IMPOSTOR
        scores[kind].setdefault(PairKey(recs[i].group, int(labels[i]), int(labels[j])), []).append(s)
    out = {}
    for kind, buckets in scores.items():
        for key, v in buckets.items():
            v = np.array(v)
            out[(kind, key)] = (v.size, int((v >= threshold).sum()), float(v.sum()), float((v * v).sum()))
    return out


def test_a3_pair_engine_oracle():
    rng = np.random.default_rng(3)
    recs = [
        ImageRecord(f"s{s:02d}_{k}", f"s{s:02d}", ("AAF", "CF", "CM")[s % 3], None, None)
        for s in range(30)
        for k in range(10)
    ]
    emb = rng.normal(size=(300, 32))
    labels = rng.integers(0, 5, 300)
    threshold = 0.05
    t0 = time.perf_counter()
    want = materialized_oracle(recs, emb, labels, threshold)
    failures = []
    for workers in (1, 4, 16):
        acc = accumulate_dense(recs, EmbeddingScorer(emb), labels, list(range(5)), threshold,
                               EngineConfig(tile=17, workers=workers))
        got = {(kind, k): (s.pair_count, s.above_threshold_count, s.sum, s.sum_sq)
               for kind in (GENUINE, IMPOSTOR) for k, s in acc.bucket(kind).items()}
        if got.keys() != want.keys():
            failures.append(f"workers={workers}: bucket keys differ")
            continue
        for k, (n, above, sm, sq) in want.items():
            g = got[k]
            if (g[0], g[1]) != (n, above):
                failures.append(f"workers={workers} {k}: counts {g[:2]} vs {(n, above)}")
            for a, b in ((g[2], sm), (g[3], sq)):
                if abs(a - b) > 1e-9 * max(abs(b), 1e-300) and abs(a - b) > 1e-12:
                    failures.append(f"workers={workers} {k}: moment {a} vs {b}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    detail = f"{len(want)} buckets equal for workers 1/4/16, {elapsed:.1f}s (limit 30s)" if ok else "; ".join(failures[:3])
    verdict("A3", ok, detail)


# --------------------------------------------------------------------- A4


def test_a4_calibration_and_d_prime():
    rng = np.random.default_rng(4)
    scores = np.round(rng.normal(0, 0.1, 1_000_000), 5)  # rounding forces ties
    t = calibrate_threshold(scores, 1e-4, "CM")
    achieved = (scores >= t.value).sum() / scores.size
    smaller = scores[scores < t.value].max()
    next_fmr = (scores >= smaller).sum() / scores.size
    g = PairStats(-20, 20).add(rng.normal(3, 1, 100_000))
    i = PairStats(-20, 20).add(rng.normal(0, 1, 100_000))
    dp = d_prime(g, i)
    ok = achieved <= 1e-4 and next_fmr > 1e-4 and t.achieved_fmr == achieved and abs(dp - 3) <= 0.05
    verdict("A4", ok, f"FMR {achieved:.6f} <= 1e-4, next smaller score gives {next_fmr:.6f}; d'={dp:.4f} (3 +/- 0.05)")


# ----------------------------------------------------------------- A5, A8


@pytest.fixture(scope="module")
def a5_data(tmp_path_factory):
    return write_dataset(SyntheticConfig(), tmp_path_factory.mktemp("a5"))


def test_a5_planted_effect(a5_data):
    t0 = time.perf_counter()
    rep = run_audit(a5_data["manifest"], a5_data["embeddings"], a5_data["ids"], config=A5_CONFIG)
    elapsed = time.perf_counter() - t0
    problems = []
    for g in rep.groups:
        f = {p: rep.fmr_cell(g, *p.split(","))["fmr"] for p in ("SU,SU", "M,M", "SO,SO", "U,O")}
        d_mm, d_susu = rep.bim_cell(g, "M")["d_prime"], rep.bim_cell(g, "SU")["d_prime"]
        if not f["SU,SU"] > f["M,M"]:
            problems.append(f"{g} FMR(SU,SU) {f['SU,SU']} <= FMR(M,M) {f['M,M']}")
        if not f["SO,SO"] > f["M,M"]:
            problems.append(f"{g} FMR(SO,SO) {f['SO,SO']} <= FMR(M,M) {f['M,M']}")
        if not f["U,O"] < f["M,M"]:
            problems.append(f"{g} FMR(U,O) {f['U,O']} >= FMR(M,M) {f['M,M']}")
        if d_mm is None or d_susu is None or not d_mm > d_susu:
            problems.append(f"{g} d'(M,M) {d_mm} not above d'(SU,SU) {d_susu}")
    ok = len(rep.groups) == 4 and not problems and elapsed < 120
    detail = (
        f"all four directions hold in {len(rep.groups)} groups, {elapsed:.1f}s (limit 120s)"
        if ok
        else "; ".join(problems[:4]) or f"{elapsed:.1f}s"
    )
    verdict("A5", ok, detail)


def test_a8_determinism(a5_data, tmp_path):
    cfg = tmp_path / "a5.cfg"
    cfg.write_text("target_fmr = 1e-3\n")
    base = ["audit", "--manifest", a5_data["manifest"], "--embeddings", a5_data["embeddings"],
            "--ids", a5_data["ids"], "--config", cfg]
    codes, blobs = [], []
    for run, threads in (("r1", None), ("r2", None), ("r3", "3")):
        argv = [str(x) for x in base + ["--out", tmp_path / run]] + (["--threads", threads] if threads else [])
        codes.append(cli_main(argv))
        blobs.append((tmp_path / run / "report.json").read_bytes())
    ok = codes == [0, 0, 0] and blobs[0] == blobs[1] == blobs[2]
    verdict("A8", ok, f"report.json byte-identical across 2 runs and a 3-thread run ({len(blobs[0])} bytes)")


# --------------------------------------------------------------------- A6


def test_a6_target_range_recovery(tmp_path):
    cfg = SyntheticConfig(peak=180, subjects_per_group=150, images_per_subject=10, seed=0)
    data = write_dataset(cfg, tmp_path)
    t0 = time.perf_counter()
    rep = run_audit(data["manifest"], data["embeddings"], data["ids"], config=A6_CONFIG)
    elapsed = time.perf_counter() - t0
    best = rep.target.argmax_by_dprime
    contains = {g: w is not None and w.lo <= 180 <= w.hi for g, w in best.items()}
    ok = len(best) == 4 and all(contains.values()) and bool(rep.target.consensus) and elapsed < 120
    windows = ", ".join(f"{g} {w.lo:g}-{w.hi:g}" if w else f"{g} none" for g, w in sorted(best.items()))
    verdict("A6", ok, f"d' argmax: {windows}; consensus {rep.target.consensus}; {elapsed:.1f}s (limit 120s)")


# --------------------------------------------------------------------- A7


A7_SCRIPT = textwrap.dedent(
    """
    import json, resource, time
    import numpy as np
    from facelight.audit import Measurements, ScoreSource, audit_records, engine_config
    from facelight.config import AuditConfig
    from facelight.ingest import ImageRecord
    from facelight.pairs import EmbeddingScorer

    n, dim, per = 20_000, 512, 5
    rng = np.random.default_rng(0)
    recs = [ImageRecord(f"i{k}", f"s{k // per}", "CM", None, None) for k in range(n)]
    emb = rng.standard_normal((n, dim), dtype=np.float32)
    meas = Measurements(rng.normal(160, 40, n).clip(0, 255), rng.uniform(5, 25, n))
    cfg = AuditConfig(target_fmr=1e-4)
    t0 = time.perf_counter()
    src = ScoreSource(recs, EmbeddingScorer(emb), engine_config(cfg))
    rep = audit_records(recs, meas, src, cfg)
    elapsed = time.perf_counter() - t0
    pairs = sum(s.pair_count for s in rep.stats.impostor.values()) + sum(
        s.pair_count for s in rep.stats.genuine.values())
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    print(json.dumps({"elapsed": elapsed, "pairs": pairs, "rss": rss, "rows": len(rep.fmr_table)}))
    """
)


def test_a7_performance():
    proc = subprocess.run([sys.executable, "-c", A7_SCRIPT], capture_output=True, text=True, timeout=900)
    if proc.returncode != 0:
        verdict("A7", False, f"subprocess failed: {proc.stderr[-500:]}")
    res = json.loads(proc.stdout.strip().splitlines()[-1])
    expected = 20_000 * 19_999 // 2
    ok = res["pairs"] == expected and res["rows"] == 15 and res["elapsed"] < 300 and res["rss"] < 2 * 2**30
    verdict(
        "A7",
        ok,
        f"{res['pairs']:,} pairs bucketed in {res['elapsed']:.1f}s (limit 300s), "
        f"peak RSS {res['rss'] / 2**20:.0f} MiB (limit 2048)",
    )
