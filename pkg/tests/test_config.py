import pytest

from papa.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    config_digest,
    dump_config,
    load_config,
    parse_config_text,
)


def test_parse_nested_keys():
    cfg = parse_config_text(
        """
        # comment
        dataset=optdigits
        model=mlp[32,32]
        papa.variant=papa_all
        papa.freq=2
        papa.window=1,9
        aug.mixup=0,0.5,1.0
        swa.enabled=true
        """
    )
    assert cfg.dataset == "optdigits" and cfg.model == "mlp[32,32]"
    assert cfg.papa.variant == "papa_all" and cfg.papa.freq == 2 and cfg.papa.window == (1, 9)
    assert cfg.aug.mixup == (0, 0.5, 1.0) and cfg.swa.enabled is True


def test_dump_roundtrip():
    cfg = apply_overrides(ExperimentConfig(), [("papa.alpha", "0.9995"), ("schedule.milestones", "150,225"), ("papa.window", "none")])
    again = parse_config_text(dump_config(cfg))
    assert again == cfg
    assert config_digest(again) == config_digest(cfg)
    assert config_digest(apply_overrides(cfg, [("out", "elsewhere"), ("workers", "4")])) == config_digest(cfg)
    assert config_digest(apply_overrides(cfg, [("seed", "9")])) != config_digest(cfg)


@pytest.mark.parametrize(
    "text",
    [
        "nonsense=1",
        "papa.nope=1",
        "papa=1",
        "a.b.c=1",
        "p=two",
        "swa.enabled=maybe",
        "p=0",
        "dataset=mnist",
        "papa.variant=ema",
        "aug.mixup=",
        "n_epochs=5\npapa.window=1,9",
        "just a line",
    ],
)
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="missing.cfg"):
        load_config(tmp_path / "missing.cfg")
