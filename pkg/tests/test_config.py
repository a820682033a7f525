import json

import pytest

from semirest.config import MixMatchConfig, TrainConfig, config_from_mapping, load_config
from semirest.errors import ConfigError


@pytest.mark.parametrize("setting,lr,p,eps_plus,bs", [
    ("un", 1e-4, 1 / 4, 0.5, (4, 2, 0)),
    ("sup", 1e-4, 1 / 4, 0.25, (2, 2, 2)),
    ("semi", 3e-5, 1 / 10, 0.25, (3, 3, 2)),
])
def test_setting_defaults(setting, lr, p, eps_plus, bs):
    cfg = TrainConfig(setting=setting)
    assert (cfg.lr, cfg.p, cfg.eps_plus, cfg.eps_minus) == (lr, p, eps_plus, 0.08)
    assert (cfg.b1, cfg.b2, cfg.b3) == bs


def test_mixmatch_defaults():
    mm = TrainConfig().mixmatch
    assert (mm.gamma, mm.M, mm.lambda_u, mm.ramp_steps) == (0.5, 3, 5.0, 400)
    assert (mm.alpha_x, mm.alpha_u, mm.mixup_beta) == (0.25, 0.75, 0.75)


def test_for_setting_rederives_defaults_but_keeps_overrides():
    cfg = TrainConfig(setting="un", lr=0.5, seed=9)
    semi = cfg.for_setting("semi")
    assert semi.lr == 3e-5 and semi.seed == 9
    assert cfg.for_setting("semi", lr=1e-3).lr == 1e-3


def test_validation():
    for bad in (dict(p=0.0), dict(eps_plus=0.05), dict(b1=0, b2=0, b3=0), dict(residual_mode="cube"),
                dict(alpha1=0.9), dict(setting="weak")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        MixMatchConfig(M=0)
    with pytest.raises(ConfigError):
        MixMatchConfig(mix_scope="image")


def test_mapping_keys_and_coercion():
    cfg = config_from_mapping({"focal.alpha": "0.5", "mixmatch.M": 2, "knn_augment": "false", "setting": "sup"})
    assert cfg.focal_alpha == 0.5 and cfg.mixmatch.M == 2 and cfg.knn_augment is False
    assert cfg.setting == "supervised" and cfg.lr == 1e-4
    with pytest.raises(ConfigError):
        config_from_mapping({"mixmatch.zeta": 1})
    with pytest.raises(ConfigError):
        config_from_mapping({"nonsense": 1})
    with pytest.raises(ConfigError):
        config_from_mapping({"steps": "many"})


def test_setting_change_on_base_resets_dependent_fields():
    base = TrainConfig(setting="un")
    assert config_from_mapping({"setting": "semi"}, base).lr == 3e-5


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "steps": 10}))
    cfg = load_config(path, {"seed": 7, "setting": None})
    assert cfg.seed == 7 and cfg.steps == 10
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_round_trip_through_dict():
    cfg = TrainConfig(setting="semi", seed=3)
    d = cfg.to_dict()
    flat = {k: v for k, v in d.items() if k != "mixmatch"}
    flat.update({f"mixmatch.{k}": v for k, v in d["mixmatch"].items()})
    assert config_from_mapping(flat) == cfg
