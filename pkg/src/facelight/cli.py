"""``facelight`` command line."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (
    ScoreSource,
    coverage_in,
    export_distributions,
    fit_schemes,
    load_stats,
    measure_records,
    open_source,
    parse_selection,
    read_fsb_csv,
    run_audit,
    target_range_search,
    write_fsb_csv,
    write_outputs,
    write_sliding_csv,
)
from .brightness import (
    MIN_SCHEME_SAMPLES,
    categorize,
    compute_fsb,
    fit_category_scheme,
    fsb_histogram,
    sliding_windows,
)
from .config import AuditConfig, load_config
from .errors import FacelightError, InputError, InvariantError, ValidationError
from .ingest import load_gray_image, load_label_map, load_manifest
from .skinregion import derive_skin_mask

log = logging.getLogger("facelight")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(n: int):
    def parse(text: str):
        try:
            v = tuple(float(x) for x in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers") from None
        if len(v) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
        return v

    return parse


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value config file (default: $FACELIGHT_CONFIG)")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _scheme_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--percentiles", type=_floats(4), help="four category percentiles, e.g. 5,15,85,95")
    p.add_argument("--scheme-mode", choices=("pooled", "per_group"), help="fit one scheme or one per group")


def _source_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", type=Path, required=True, help="image manifest CSV")
    p.add_argument("--embeddings", type=Path, help="binary embedding matrix")
    p.add_argument("--ids", type=Path, help="embedding id sidecar (one id per line)")
    p.add_argument("--scores", type=Path, help="precomputed score table CSV (instead of embeddings)")
    p.add_argument("--fsb", type=Path, help="reuse an FSB table written by 'facelight fsb'")
    p.add_argument("--no-normalize", action="store_true", help="do not L2-normalize embeddings on load")
    p.add_argument("--score-bins", type=int, help="histogram bins over the score range")
    p.add_argument("--score-range", type=_floats(2), help="histogram score range lo,hi")
    p.add_argument("--impostor-scope", choices=("within", "cross"), help="impostor pairs within groups or also across")
    p.add_argument("--tile-size", type=int, help="images per scoring tile side")


def _window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=float, help="window width in brightness levels")
    p.add_argument("--step", type=float, help="window step")
    p.add_argument("--range", dest="window_range", type=_floats(2), help="span lo,hi the windows must fit in")
    p.add_argument("--label-origin", type=int, help="number of the first window label")
    p.add_argument("--min-genuine-pairs", type=int, help="support floor per window")


def build_parser() -> Parser:
    parser = Parser(prog="facelight", description=__doc__)
    parser.add_argument("--version", action="version", version=f"facelight {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("fsb", help="per-image FSB, BIM and exposure category")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output CSV")
    _scheme_flags(p)
    _common(p)

    p = sub.add_parser("bim", help="FSB and BIM of a single image")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="parsing label map PNG")
    p.add_argument("--histogram", type=Path, help="write the 256-level skin histogram CSV here")
    _common(p)

    p = sub.add_parser("categorize", help="fit an exposure scheme and label an FSB table")
    p.add_argument("--fsb", type=Path, required=True, help="FSB table from 'facelight fsb'")
    p.add_argument("--out", type=Path, required=True)
    _scheme_flags(p)
    _common(p)

    p = sub.add_parser("stats", help="per-group FSB statistics, histograms and coverage")
    p.add_argument("--fsb", type=Path, required=True)
    p.add_argument("--out", type=Path, help="directory for hist_<group>.csv files")
    p.add_argument("--range", dest="coverage_range", type=_floats(2), help="report coverage of lo,hi")
    _common(p)

    p = sub.add_parser("audit", help="full brightness-conditioned FMR audit")
    _source_flags(p)
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--calibration-group", help="group whose impostors set the threshold")
    p.add_argument("--target-fmr", type=float, help="FMR the threshold is calibrated to")
    p.add_argument("--min-support", type=int, help="impostor pairs below which a cell is flagged")
    _scheme_flags(p)
    _window_flags(p)
    _common(p)

    p = sub.add_parser("target-range", help="sliding-window d' / BIM search for a target brightness range")
    _source_flags(p)
    p.add_argument("--out", type=Path, help="write sliding_table.csv into this directory")
    _window_flags(p)
    _common(p)

    p = sub.add_parser("export-dist", help="write score distributions from a saved audit")
    p.add_argument("--stats", type=Path, required=True, help="stats.npz from an audit report")
    p.add_argument("--select", action="append", required=True, metavar="GROUP:A,B:KIND", help="bucket to export (repeatable)")
    p.add_argument("--out", type=Path, required=True)
    _common(p)
    return parser


def resolve_config(args) -> AuditConfig:
    cfg = load_config(args.config)
    g = lambda name: getattr(args, name, None)  # noqa: E731
    window_range = g("window_range")
    cfg = cfg.replace(
        threads=g("threads"),
        percentiles=g("percentiles"),
        scheme_mode=g("scheme_mode"),
        calibration_group=g("calibration_group"),
        target_fmr=g("target_fmr"),
        min_support=g("min_support"),
        min_genuine_pairs=g("min_genuine_pairs"),
        score_bins=g("score_bins"),
        score_range=g("score_range"),
        impostor_scope=g("impostor_scope"),
        tile_size=g("tile_size"),
        window_width=g("window"),
        window_step=g("step"),
        window_lo=window_range[0] if window_range else None,
        window_hi=window_range[1] if window_range else None,
        window_label_origin=g("label_origin"),
        normalize=False if g("no_normalize") else None,
    )
    if cfg.threads is not None and cfg.threads < 0:
        raise InputError("--threads must be >= 0")
    return cfg


# ---------------------------------------------------------------- commands


def cmd_fsb(args, cfg: AuditConfig) -> int:
    records = load_manifest(args.manifest)
    meas = measure_records(records, cfg.label_semantics, cfg.threads or None)
    labels = None
    if int(meas.usable.sum()) >= MIN_SCHEME_SAMPLES:
        _, _, labels = fit_schemes(records, meas, cfg)
    else:
        log.warning("fewer than %d usable images; category column left empty", MIN_SCHEME_SAMPLES)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_fsb_csv(args.out, records, meas, labels)
    print(f"{int(meas.usable.sum())} images measured, {len(meas.excluded)} excluded -> {args.out}")
    return EXIT_OK


def cmd_bim(args, cfg: AuditConfig) -> int:
    image = load_gray_image(args.image)
    mask = derive_skin_mask(load_label_map(args.mask, cfg.label_semantics))
    prof = compute_fsb(image, mask, args.image.stem)
    for w in mask.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"pixels={mask.pixel_count} fsb={prof.fsb:.6g} bim={prof.bim:.6g}")
    if args.histogram:
        with args.histogram.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["intensity", "count"])
            w.writerows(enumerate(prof.histogram.bins.tolist()))
    return EXIT_OK


def _read_fsb_rows(path: Path) -> list[dict]:
    if not path.is_file():
        raise InputError(f"FSB table not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "group", "fsb"} <= set(reader.fieldnames):
            raise InputError(f"{path}: expected columns image_id,group,fsb,bim,category")
        rows = list(reader)
    for i, r in enumerate(rows, 2):
        try:
            r["fsb"] = float(r["fsb"])
        except ValueError:
            raise InputError(f"{path}:{i}: bad fsb value {r['fsb']!r}") from None
    return rows


def cmd_categorize(args, cfg: AuditConfig) -> int:
    rows = _read_fsb_rows(args.fsb)
    values = np.array([r["fsb"] for r in rows])
    groups = np.array([r["group"] for r in rows], dtype=object)
    schemes = {"*": fit_category_scheme(values, cfg.percentiles)}
    if cfg.scheme_mode == "per_group":
        schemes = {g: fit_category_scheme(values[groups == g], cfg.percentiles) for g in sorted(set(groups))}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "group", "fsb", "category"])
        for r in rows:
            s = schemes.get(r["group"], schemes.get("*"))
            w.writerow([r["image_id"], r["group"], repr(r["fsb"]), categorize(r["fsb"], s).name])
    for name, s in schemes.items():
        print(f"{name}: " + " ".join(f"p{p:g}={b:g}" for p, b in zip(s.percentiles, s.boundaries)))
    return EXIT_OK


def cmd_stats(args, cfg: AuditConfig) -> int:
    rows = _read_fsb_rows(args.fsb)
    values = np.array([r["fsb"] for r in rows])
    groups = np.array([r["group"] for r in rows], dtype=object)
    print(f"{'group':<10}{'count':>8}{'mean':>10}{'std':>10}")
    for g in sorted(set(groups)):
        v = values[groups == g]
        std = v.std(ddof=1) if v.size > 1 else 0.0
        note = "  (single image)" if v.size == 1 else ""
        print(f"{g:<10}{v.size:>8}{v.mean():>10.2f}{std:>10.2f}{note}")
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            with (args.out / f"hist_{g}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["intensity", "count"])
                w.writerows(enumerate(fsb_histogram(v).tolist()))
    if args.coverage_range:
        lo, hi = args.coverage_range
        if lo > hi:
            raise ValidationError(f"invalid range {lo:g},{hi:g}")
        for g, f in coverage_in(values, groups, [(lo, hi)]).items():
            print(f"coverage {lo:g}-{hi:g} {g}: {100 * f:.1f}%")
    return EXIT_OK


def cmd_audit(args, cfg: AuditConfig) -> int:
    report = run_audit(args.manifest, args.embeddings, args.ids, args.scores, cfg, args.fsb, cfg.threads or None)
    paths = write_outputs(report, args.out)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"threshold {report.threshold.value:.6g}; report written to {paths['report']}")
    return EXIT_OK


def cmd_target_range(args, cfg: AuditConfig) -> int:
    records = load_manifest(args.manifest)
    source: ScoreSource = open_source(records, cfg, args.embeddings, args.ids, args.scores, cfg.threads or None)
    meas = read_fsb_csv(args.fsb, records) if args.fsb else measure_records(records, cfg.label_semantics, cfg.threads or None)
    windows = sliding_windows(
        cfg.window_lo, cfg.window_hi, cfg.window_width, cfg.window_step, cfg.window_label_origin, cfg.window_label_prefix
    )
    target = target_range_search(records, meas.fsb, meas.bim, source, windows, cfg.min_genuine_pairs)
    print(f"{'group':<8}{'window':<14}{'images':>8}{'avg_bim':>10}{'genuine':>10}{'d_prime':>10}")
    for r in target.rows:
        dp = "–" if r.d_prime is None else f"{r.d_prime:.3f}"
        bim = "–" if r.avg_bim is None else f"{r.avg_bim:.3f}"
        flag = " !" if r.low_support else ""
        print(f"{r.group:<8}{str(r.window):<14}{r.images:>8}{bim:>10}{r.genuine_pairs:>10}{dp:>10}{flag}")
    for g, w in target.argmax_by_dprime.items():
        print(f"best d' {g}: {w if w else '–'}")
    if target.consensus:
        print("consensus: " + ", ".join(f"{lo:g}-{hi:g}" for lo, hi in target.consensus))
    else:
        print("consensus: undefined (no window meets the genuine-pair floor)")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        write_sliding_csv(args.out / "sliding_table.csv", target)
    return EXIT_OK


def cmd_export_dist(args, cfg: AuditConfig) -> int:
    acc = load_stats(args.stats)
    written = export_distributions(acc, [parse_selection(s) for s in args.select], args.out)
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {
    "fsb": cmd_fsb,
    "bim": cmd_bim,
    "categorize": cmd_categorize,
    "stats": cmd_stats,
    "audit": cmd_audit,
    "target-range": cmd_target_range,
    "export-dist": cmd_export_dist,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except InvariantError as exc:
        print(f"internal invariant failed: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_INTERNAL
    except (FacelightError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
