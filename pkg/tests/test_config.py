from __future__ import annotations

import pytest

from facelight.config import ENV_VAR, AuditConfig, format_config, load_config, parse_config
from facelight.errors import InputError


def test_defaults():
    cfg = AuditConfig()
    assert (cfg.calibration_group, cfg.target_fmr, cfg.percentiles) == ("CM", 1e-4, (5, 15, 85, 95))
    assert (cfg.window_lo, cfg.window_hi, cfg.window_width, cfg.window_step) == (145, 220, 40, 5)
    assert cfg.label_semantics[1] == "skin" and cfg.label_semantics[10] == "nose"


def test_parse_values_and_comments():
    cfg = parse_config(
        """
        # audit settings
        calibration_group = CF
        target_fmr = 1e-3   # looser
        percentiles = 10, 20, 80, 90
        window = 100, 200, 20, 10
        normalize = false
        export_pairs = SU:SU; U,O
        """
    )
    assert cfg.calibration_group == "CF" and cfg.target_fmr == 1e-3
    assert cfg.percentiles == (10, 20, 80, 90)
    assert (cfg.window_lo, cfg.window_hi, cfg.window_width, cfg.window_step) == (100, 200, 20, 10)
    assert cfg.normalize is False
    assert cfg.export_pairs == ("SU,SU", "U,O")


def test_label_lines_replace_mapping():
    cfg = parse_config("label.0 = background\nlabel.5 = skin\n")
    assert cfg.label_semantics == {0: "background", 5: "skin"}


@pytest.mark.parametrize(
    "text, message",
    [
        ("colour = red", "unknown key"),
        ("target_fmr = lots", "bad value"),
        ("just words", "key = value"),
        ("percentiles = 1, 2", "four"),
        ("scheme_mode = odd", "pooled"),
        ("impostor_scope = everywhere", "within"),
    ],
)
def test_parse_errors(text, message):
    with pytest.raises(InputError, match=message):
        parse_config(text)


def test_format_round_trip():
    cfg = parse_config("calibration_group = AAM\nwindow = 100, 200, 20, 10\nlabel.0 = background\nlabel.1 = skin\n")
    assert parse_config(format_config(cfg)) == cfg
    assert parse_config(format_config(AuditConfig())) == AuditConfig()


def test_env_fallback(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("calibration_group = AAF\n")
    monkeypatch.setenv(ENV_VAR, str(p))
    assert load_config().calibration_group == "AAF"
    q = tmp_path / "d.cfg"
    q.write_text("calibration_group = CF\n")
    assert load_config(q).calibration_group == "CF"
    monkeypatch.delenv(ENV_VAR)
    assert load_config() == AuditConfig()
    with pytest.raises(InputError, match="not found"):
        load_config(tmp_path / "missing.cfg")


def test_replace_ignores_none_and_snapshot_drops_threads():
    cfg = AuditConfig().replace(target_fmr=None, threads=4, calibration_group="CF")
    assert cfg.target_fmr == 1e-4 and cfg.threads == 4 and cfg.calibration_group == "CF"
    snap = cfg.snapshot()
    assert "threads" not in snap and snap["label_semantics"]["1"] == "skin"
