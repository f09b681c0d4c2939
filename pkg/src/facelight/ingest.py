"""Loaders for manifests, images, label maps, embeddings and score tables.

Every loader validates its input and returns an immutable-by-convention
in-memory store. Nothing here knows about brightness or pairs.
"""

from __future__ import annotations

import csv
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import InputError, ValidationError

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image_id", "subject_id", "group", "image_path", "mask_path")
OPTIONAL_COLUMN = "embedding_index"

EMBEDDING_MAGIC = b"FLEB"
EMBEDDING_VERSION = 1
# magic, u16 version, u32 dim, u64 count
_HEADER = struct.Struct("<4sHIQ")

# BiSeNet / CelebAMask-HQ 19-class convention, renamed to region names.
DEFAULT_LABEL_SEMANTICS: dict[int, str] = {
    0: "background",
    1: "skin",
    2: "left_brow",
    3: "right_brow",
    4: "left_eye",
    5: "right_eye",
    6: "eyeglasses",
    7: "left_ear",
    8: "right_ear",
    9: "earring",
    10: "nose",
    11: "mouth_interior",
    12: "upper_lip",
    13: "lower_lip",
    14: "neck",
    15: "necklace",
    16: "cloth",
    17: "hair",
    18: "hat",
}


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    subject_id: str
    group: str
    image_path: Path
    mask_path: Path
    embedding_index: int | None = None


@dataclass(frozen=True)
class GrayImage:
    """8-bit intensity image; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2 or px.dtype != np.uint8:
            raise ValidationError(f"GrayImage needs a 2-D uint8 array, got {px.dtype} {px.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    label_semantics: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_LABEL_SEMANTICS))

    def __post_init__(self):
        lab = self.labels
        if lab.ndim != 2 or lab.dtype != np.uint8:
            raise ValidationError(f"LabelMap needs a 2-D uint8 array, got {lab.dtype} {lab.shape}")
        unknown = sorted(set(np.unique(lab).tolist()) - set(self.label_semantics))
        if unknown:
            raise ValidationError(f"label indices without semantics: {unknown}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def indices_of(self, name: str) -> list[int]:
        return [i for i, n in self.label_semantics.items() if n == name]


@dataclass(frozen=True)
class EmbeddingStore:
    rows: np.ndarray  # (count, dim) float32
    ids: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def index(self) -> dict[str, int]:
        return {image_id: i for i, image_id in enumerate(self.ids)}


@dataclass(frozen=True)
class ScoreTable:
    id_a: tuple[str, ...]
    id_b: tuple[str, ...]
    scores: np.ndarray  # float64

    def __len__(self) -> int:
        return len(self.scores)


# ---------------------------------------------------------------- manifest


def load_manifest(path: str | os.PathLike, groups: Iterable[str] | None = None) -> list[ImageRecord]:
    """Parse a dataset manifest CSV into records, in file order.

    Relative image/mask paths are resolved against the manifest's directory.
    If ``groups`` is given, every record's group must be one of them.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    base = path.parent
    allowed = set(groups) if groups is not None else None

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"manifest is empty: {path}")
        header = [h.strip() for h in header]
        if tuple(header) not in (MANIFEST_COLUMNS, MANIFEST_COLUMNS + (OPTIONAL_COLUMN,)):
            raise InputError(
                f"malformed manifest header in {path}: {','.join(header)!r}; expected "
                f"{','.join(MANIFEST_COLUMNS)}[,{OPTIONAL_COLUMN}]"
            )
        has_index = len(header) == 6

        records: list[ImageRecord] = []
        first_seen: dict[str, int] = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            row = [c.strip() for c in row]
            image_id, subject_id, group, image_path, mask_path = row[:5]
            if not image_id or not subject_id or not group:
                raise InputError(f"{path}:{line}: image_id, subject_id and group must be non-empty")
            if image_id in first_seen:
                raise InputError(
                    f"duplicate image_id {image_id!r} on lines {first_seen[image_id]} and {line}"
                )
            first_seen[image_id] = line
            if allowed is not None and group not in allowed:
                raise InputError(f"{path}:{line}: group {group!r} not among declared groups {sorted(allowed)}")
            emb = None
            if has_index and row[5] != "":
                try:
                    emb = int(row[5])
                except ValueError:
                    raise InputError(f"{path}:{line}: embedding_index {row[5]!r} is not an integer") from None
                if emb < 0:
                    raise InputError(f"{path}:{line}: embedding_index must be nonnegative")
            records.append(
                ImageRecord(image_id, subject_id, group, base / image_path, base / mask_path, emb)
            )

    if not records:
        raise InputError(f"manifest has no data rows: {path}")
    return records


def write_manifest(path: str | os.PathLike, records: Sequence[ImageRecord], with_index: bool | None = None) -> None:
    path = Path(path)
    if with_index is None:
        with_index = any(r.embedding_index is not None for r in records)
    base = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS + ((OPTIONAL_COLUMN,) if with_index else ()))
        for r in records:
            row = [r.image_id, r.subject_id, r.group, _rel(r.image_path, base), _rel(r.mask_path, base)]
            if with_index:
                row.append("" if r.embedding_index is None else str(r.embedding_index))
            w.writerow(row)


def _rel(p: Path, base: Path) -> str:
    try:
        return Path(p).resolve().relative_to(base).as_posix()
    except ValueError:
        return str(p)


# ------------------------------------------------------------------ images


def to_luma(rgb: np.ndarray) -> np.ndarray:
    """Integer Rec.601 luma, round-half-up: (299R + 587G + 114B + 500) // 1000."""
    rgb = rgb.astype(np.int32)
    y = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return y.astype(np.uint8)


def load_gray_image(path: str | os.PathLike) -> GrayImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                px = np.asarray(im, dtype=np.uint8)
            elif mode == "LA":
                px = np.asarray(im.getchannel(0), dtype=np.uint8)
            elif mode in ("RGB", "RGBA", "P", "PA"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
                px = to_luma(rgb)
            else:
                raise InputError(f"unsupported image mode {mode!r} (8-bit grayscale or color required): {path}")
    except InputError:
        raise
    except (OSError, SyntaxError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return GrayImage(np.ascontiguousarray(px))


def load_label_map(path: str | os.PathLike, semantics: Mapping[int, str] | None = None) -> LabelMap:
    """Read a parsing label map; raw pixel values are region indices."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "P"):
                raise InputError(f"label map must be single-channel 8-bit, got mode {im.mode!r}: {path}")
            labels = np.array(im, dtype=np.uint8)
    except InputError:
        raise
    except (OSError, SyntaxError) as exc:
        raise InputError(f"cannot read label map {path}: {exc}") from exc
    try:
        return LabelMap(labels, dict(semantics) if semantics is not None else dict(DEFAULT_LABEL_SEMANTICS))
    except ValidationError as exc:
        raise InputError(f"{path}: {exc}") from exc


# -------------------------------------------------------------- embeddings


def write_embeddings(matrix_path, ids_path, rows: np.ndarray, ids: Sequence[str]) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2 or rows.shape[0] != len(ids):
        raise ValidationError(f"rows shape {rows.shape} does not match {len(ids)} ids")
    with open(matrix_path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, rows.shape[1], rows.shape[0]))
        fh.write(rows.tobytes())
    with open(ids_path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{i}\n" for i in ids)


def load_embeddings(matrix_path, ids_path, normalize: bool = True) -> EmbeddingStore:
    """Read an FLEB matrix and its ids sidecar.

    With ``normalize`` every row is scaled to unit L2 norm; a zero row is an error
    in that case since it has no direction.
    """
    matrix_path, ids_path = Path(matrix_path), Path(ids_path)
    for p in (matrix_path, ids_path):
        if not p.is_file():
            raise InputError(f"file not found: {p}")
    with matrix_path.open("rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise InputError(f"{matrix_path}: truncated header")
    magic, version, dim, count = _HEADER.unpack(head)
    if magic != EMBEDDING_MAGIC:
        raise InputError(f"{matrix_path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise InputError(f"{matrix_path}: unsupported version {version}")
    if dim == 0:
        raise InputError(f"{matrix_path}: dim must be positive")
    expected = _HEADER.size + 4 * dim * count
    actual = matrix_path.stat().st_size
    if actual != expected:
        raise InputError(f"{matrix_path}: size {actual} bytes, header implies {expected}")

    rows = np.fromfile(matrix_path, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    rows = rows.astype(np.float32, copy=False)

    with ids_path.open(encoding="utf-8") as fh:
        ids = tuple(line.rstrip("\r\n") for line in fh if line.strip())
    if len(ids) != count:
        raise InputError(f"{ids_path}: {len(ids)} ids but matrix has {count} rows")
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise InputError(f"{ids_path}: duplicate id {dup!r}")

    finite = np.isfinite(rows).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise InputError(f"{matrix_path}: non-finite value in row {bad} (id {ids[bad]!r})")

    if normalize:
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        if (norms == 0).any():
            bad = int(np.flatnonzero(norms == 0)[0])
            raise InputError(f"{matrix_path}: zero-norm row {bad} cannot be normalized")
        rows = (rows / norms[:, None]).astype(np.float32)
    return EmbeddingStore(rows, ids)


def link_embeddings(records: Sequence[ImageRecord], store: EmbeddingStore) -> np.ndarray:
    """Row index into ``store`` for each record, or -1 when it has none.

    Records carrying an explicit ``embedding_index`` use it; the rest are looked
    up by image_id.
    """
    index = store.index()
    known = {r.image_id for r in records}
    strangers = [i for i in store.ids if i not in known]
    if strangers:
        log.warning("%d embedding rows have no manifest record (e.g. %s)", len(strangers), strangers[0])
    out = np.full(len(records), -1, dtype=np.int64)
    for k, r in enumerate(records):
        if r.embedding_index is not None:
            if r.embedding_index >= store.count:
                raise InputError(
                    f"{r.image_id}: embedding_index {r.embedding_index} outside store of {store.count} rows"
                )
            if store.ids[r.embedding_index] != r.image_id:
                raise InputError(
                    f"{r.image_id}: embedding_index {r.embedding_index} holds id {store.ids[r.embedding_index]!r}"
                )
            out[k] = r.embedding_index
        else:
            out[k] = index.get(r.image_id, -1)
    return out


# ------------------------------------------------------------- score table


def load_score_table(path) -> ScoreTable:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"score table not found: {path}")
    a: list[str] = []
    b: list[str] = []
    s: list[float] = []
    seen: dict[tuple[str, str], int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["image_id_a", "image_id_b", "score"]:
            raise InputError(f"malformed score table header in {path}: {header}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise InputError(f"{path}:{line}: expected 3 fields")
            ia, ib, sc = (c.strip() for c in row)
            if ia == ib:
                raise InputError(f"{path}:{line}: self-pair {ia!r}")
            key = (ia, ib) if ia < ib else (ib, ia)
            if key in seen:
                raise InputError(f"{path}:{line}: pair {key} already given on line {seen[key]}")
            seen[key] = line
            try:
                v = float(sc)
            except ValueError:
                raise InputError(f"{path}:{line}: score {sc!r} is not a number") from None
            if not np.isfinite(v):
                raise InputError(f"{path}:{line}: non-finite score")
            a.append(ia)
            b.append(ib)
            s.append(v)
    return ScoreTable(tuple(a), tuple(b), np.asarray(s, dtype=np.float64))


def write_score_table(path, table: ScoreTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id_a", "image_id_b", "score"])
        for ia, ib, sc in zip(table.id_a, table.id_b, table.scores):
            w.writerow([ia, ib, repr(float(sc))])
