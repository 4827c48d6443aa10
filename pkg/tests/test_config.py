import pytest

from storyweave.config import DEFAULTS, Config, ConfigError, load_config, parse_text, parse_value


def test_defaults_roundtrip_through_text(tmp_path):
    cfg = Config({"unet.k": 5, "unet.mults": (1, 2), "sc.enabled": False, "sampler.guidance": 3.0})
    cfg.save(tmp_path / "c.txt")
    back = load_config(tmp_path / "c.txt")
    assert back == cfg
    assert set(back) == set(DEFAULTS)


def test_typed_parsing():
    assert parse_value("unet.k", "5") == 5
    assert parse_value("unet.mults", "1, 2,4") == (1, 2, 4)
    assert parse_value("sc.enabled", "off") is False
    assert parse_value("train.lr", "1e-3") == 1e-3
    with pytest.raises(ConfigError, match="unet.k"):
        parse_value("unet.k", "three")
    with pytest.raises(ConfigError, match="not one of"):
        parse_value("unet.mode", "video")
    with pytest.raises(ConfigError, match="unknown"):
        parse_value("unet.nope", "1")


def test_errors_name_file_and_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# comment\nseed = 3\nunet.k 4\n")
    with pytest.raises(ConfigError, match=r"bad.txt:3"):
        load_config(p)
    with pytest.raises(ConfigError, match="config file not found"):
        load_config(tmp_path / "missing.txt")


def test_overrides_win(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 3\nunet.k = 1  # vanilla\n")
    cfg = load_config(p, {"seed": "9", "unet.mode": None})
    assert cfg["seed"] == 9 and cfg["unet.k"] == 1 and cfg["unet.mode"] == "sv"


def test_unknown_key_rejected():
    cfg = Config()
    with pytest.raises(ConfigError):
        cfg["unet.bogus"] = 1
    assert parse_text("") == {}
