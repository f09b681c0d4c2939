"""Key-value configuration files.

One ``key = value`` per line, ``#`` starts a comment. Label semantics are
given as ``label.<index> = <region name>``; any label line replaces the
default mapping entirely. Example::

    calibration_group = CM
    target_fmr = 1e-4
    percentiles = 5, 15, 85, 95
    window = 145, 220, 40, 5
    label.1 = skin
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import InputError
from .ingest import DEFAULT_LABEL_SEMANTICS

ENV_VAR = "FACELIGHT_CONFIG"

DEFAULT_EXPORT_PAIRS = ("SU,SU", "U,U", "M,M", "O,O", "SO,SO", "U,O", "SU,SO")


@dataclass
class AuditConfig:
    percentiles: tuple[float, ...] = (5, 15, 85, 95)
    scheme_mode: str = "pooled"  # or per_group
    calibration_group: str = "CM"
    target_fmr: float = 1e-4
    min_support: int = 1_000_000
    min_genuine_pairs: int = 1_000
    normalize: bool = True
    score_range: tuple[float, float] = (-1.0, 1.0)
    score_bins: int = 2000
    impostor_scope: str = "within"
    saturation_fraction: float = 0.5
    window_lo: float = 145.0
    window_hi: float = 220.0
    window_width: float = 40.0
    window_step: float = 5.0
    window_label_origin: int = 6
    window_label_prefix: str = "M"
    export_pairs: tuple[str, ...] = DEFAULT_EXPORT_PAIRS
    tile_size: int = 1024
    threads: int = 0  # 0 = all cores
    label_semantics: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_LABEL_SEMANTICS))

    def snapshot(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["label_semantics"] = {str(k): v for k, v in sorted(self.label_semantics.items())}
        d.pop("threads")  # does not affect results
        return d

    def replace(self, **changes) -> "AuditConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    "percentiles": _floats,
    "scheme_mode": str,
    "calibration_group": str,
    "target_fmr": float,
    "min_support": int,
    "min_genuine_pairs": int,
    "normalize": _bool,
    "score_range": _floats,
    "score_bins": int,
    "impostor_scope": str,
    "saturation_fraction": float,
    "window_lo": float,
    "window_hi": float,
    "window_width": float,
    "window_step": float,
    "window_label_origin": int,
    "window_label_prefix": str,
    "export_pairs": lambda t: tuple(p.strip().replace(":", ",") for p in t.split(";") if p.strip()),
    "tile_size": int,
    "threads": int,
}


def parse_config(text: str, source: str = "<config>") -> AuditConfig:
    values: dict[str, Any] = {}
    labels: dict[int, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{n}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        try:
            if key.startswith("label."):
                labels[int(key[6:])] = value
            elif key == "window":
                lo, hi, width, step = _floats(value)
                values.update(window_lo=lo, window_hi=hi, window_width=width, window_step=step)
            elif key in _PARSERS:
                values[key] = _PARSERS[key](value)
            else:
                raise InputError(f"{source}:{n}: unknown key {key!r}")
        except InputError:
            raise
        except ValueError as exc:
            raise InputError(f"{source}:{n}: bad value for {key}: {exc}") from None
    if "score_range" in values and len(values["score_range"]) != 2:
        raise InputError(f"{source}: score_range needs two numbers")
    if "percentiles" in values and len(values["percentiles"]) != 4:
        raise InputError(f"{source}: percentiles needs four numbers")
    if "scheme_mode" in values and values["scheme_mode"] not in ("pooled", "per_group"):
        raise InputError(f"{source}: scheme_mode must be pooled or per_group")
    if "impostor_scope" in values and values["impostor_scope"] not in ("within", "cross"):
        raise InputError(f"{source}: impostor_scope must be within or cross")
    if labels:
        values["label_semantics"] = labels
    return AuditConfig(**values)


def load_config(path: str | os.PathLike | None = None) -> AuditConfig:
    """Read ``path``, else the file named by $FACELIGHT_CONFIG, else defaults."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is None:
        return AuditConfig()
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def format_config(cfg: AuditConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "label_semantics":
            lines += [f"label.{k} = {name}" for k, name in sorted(v.items())]
        elif f.name == "export_pairs":
            lines.append(f"export_pairs = {'; '.join(v)}")
        elif isinstance(v, tuple):
            lines.append(f"{f.name} = {', '.join(format(x, 'g') for x in v)}")
        elif isinstance(v, bool):
            lines.append(f"{f.name} = {str(v).lower()}")
        else:
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
