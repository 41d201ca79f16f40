import json

import pytest
from pydantic import ValidationError

from adarand.harness.config import ExperimentConfig, dump_config, load_config


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.reg.kind == "AdaRand" and cfg.reg.lam == 1.0
    assert cfg.optim.momentum == 0.9 and cfg.optim.nesterov
    assert (cfg.optim.lr, cfg.optim.epochs, cfg.optim.milestones, cfg.optim.gamma) == (0.01, 60, [20, 40], 0.1)
    assert cfg.dataset.num_classes == 10


def test_lr_schedule():
    o = ExperimentConfig().optim
    assert [o.lr_at(e) for e in (0, 19, 20, 39, 40)] == pytest.approx([0.01, 0.01, 0.001, 0.001, 0.0001])


def test_lambda_uses_its_json_name(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"reg": {"kind": "FT", "lambda": 0.5}}))
    cfg = load_config(path)
    assert cfg.reg.lam == 0.5 and cfg.resolved()["reg"]["lambda"] == 0.5


def test_dump_load_round_trip(tmp_path):
    cfg = ExperimentConfig().with_updates(**{"reg.alpha": 0.25, "seeds.noise": 9})
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("data", [
    {"reg": {"kind": "Dropout"}},
    {"reg": {"lambda": -1}},
    {"reg": {"alpha": 1.5}},
    {"dataset": {"fraction": 0.0}},
    {"dataset": {"fraction": 1.5}},
    {"dataset": {"spread": 0.0}},
    {"dataset": {"num_classes": 20, "modes_per_class": 4}},
    {"dataset": {"source": "csv-file"}},
    {"optim": {"momentum": 1.0}},
    {"unknown": 1},
    {"reg": {"lamda": 1.0}},
])
def test_invalid_configs(data):
    with pytest.raises(ValidationError):
        ExperimentConfig.model_validate(data)


def test_with_updates_revalidates():
    with pytest.raises(ValidationError):
        ExperimentConfig().with_updates(**{"dataset.fraction": 2.0})


def test_seed_offset_moves_every_stream():
    s = ExperimentConfig().seeds.offset(3)
    assert (s.init, s.shuffle, s.noise, s.data) == (3, 4, 5, 6)
