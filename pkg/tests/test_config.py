import json

import pytest

from vocabrl.config import ConfigError, RunConfig, make_config, prepare_run_dir


def test_defaults_follow_recommended_settings():
    cfg = make_config()
    assert (cfg.lam, cfg.K, cfg.lr, cfg.momentum, cfg.rl_lr) == (0.005, 1000, 1.0, 0.75, 0.01)
    assert (cfg.clip_norm, cfg.weight_decay, cfg.dropout, cfg.pred_dropout) == (1.0, 1e-6, 0.2, 0.4)
    assert (cfg.pred_lr, cfg.smoothing, cfg.d_v, cfg.batch_size) == (0.08, 0.1, 512, 128)


def test_file_then_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"K": 50, "lam": 0.1, "name": "x"}))
    cfg = make_config(tmp_path / "c.json", {"K": "70", "attention": "false", "lam": 0.2})
    assert cfg.K == 70 and cfg.attention is False and cfg.lam == 0.2 and cfg.name == "x"


def test_unknown_and_invalid(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"learning_rate": 1}))
    with pytest.raises(ConfigError):
        make_config(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        make_config(None, {"nope": 1})
    with pytest.raises(ConfigError):
        make_config(None, {"lam": "2"})
    with pytest.raises(ConfigError):
        make_config(None, {"K": "many"})
    with pytest.raises(ConfigError):
        make_config(tmp_path / "absent.json")


def test_run_dir(tmp_path):
    cfg = make_config(None, {"runs_dir": str(tmp_path), "name": "r1"})
    run = prepare_run_dir(cfg)
    assert (run / "checkpoints").is_dir() and (run / "logs").is_dir()
    echoed = json.loads((run / "config.resolved").read_text())
    assert RunConfig(**echoed) == cfg
