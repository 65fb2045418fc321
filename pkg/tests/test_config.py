import json

import pytest

from moerpl import config
from moerpl.errors import ConfigError


def _write(tmp_path, data):
    path = tmp_path / 'exp.json'
    path.write_text(json.dumps(data))
    return path


def test_defaults():
    cfg = config.ExperimentConfig()
    assert cfg.construction.rank == 1
    assert cfg.schedule.end_ratio == 0.2
    assert cfg.selection.target_rho == 0.5
    assert cfg.run.record_wall_time is False
    assert set(cfg.sweep.values) == set(config.SWEEP_AXES)


def test_partial_file_keeps_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv('MOERPL_OUT_DIR', raising=False)
    cfg = config.load_config(_write(tmp_path, {'schedule': {'end_ratio': 0.3}, 'model': {'n_experts': 8}}))
    assert cfg.schedule.end_ratio == 0.3
    assert cfg.model.n_experts == 8
    assert cfg.model.top_k == 2
    assert cfg.run.out_dir == 'runs/default'


@pytest.mark.parametrize('data', [
    {'model': {'experts': 8}},
    {'optimizer': {}},
    {'model': {'n_experts': '8'}},
    {'run': {'record_wall_time': 1}},
    {'selection': {'target_rho': True}},
    {'model': {'n_experts': 2, 'top_k': 3}},
    {'schedule': {'end_ratio': 1.5}},
    {'construction': {'replace_mode': 'prune'}},
    {'sweep': {'values': {'learning_rate': [1e-3]}}},
    {'task': {'num_modes': 1}},
    {'model': []},
    {'run': {'seeds': ['a']}},
    {'run': {'seeds': [True]}},
    {'run': {'seeds': 3}},
    {'sweep': {'values': {'rank': ['x']}}},
    {'sweep': {'values': {'rank': [1.5]}}},
    {'sweep': {'values': {'end_ratio': ['0.2']}}},
    {'sweep': {'values': {'schedule': [1]}}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config.config_from_dict(data)


def test_invalid_json(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"model": ')
    with pytest.raises(ConfigError):
        config.load_config(path)


def test_integers_are_accepted_for_floats():
    cfg = config.config_from_dict({'optim': {'lr': 1}})
    assert isinstance(cfg.optim.lr, float)


def test_overrides():
    cfg = config.apply_overrides(config.ExperimentConfig(), seed=3, target_rho=0.4, end_ratio=0.1, rank=2,
                                 out='runs/x')
    assert (cfg.run.seed, cfg.selection.target_rho, cfg.schedule.end_ratio, cfg.construction.rank) == (3, 0.4, 0.1, 2)
    assert cfg.run.out_dir == 'runs/x'
    assert config.apply_overrides(cfg) == cfg


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv('MOERPL_OUT_DIR', str(tmp_path / 'env'))
    assert config.load_config(_write(tmp_path, {})).run.out_dir == str(tmp_path / 'env')
    explicit = config.load_config(_write(tmp_path, {'run': {'out_dir': 'mine'}}))
    assert explicit.run.out_dir == 'mine'


def test_save_load_round_trip(tmp_path, tiny_config, monkeypatch):
    monkeypatch.delenv('MOERPL_OUT_DIR', raising=False)
    path = tmp_path / 'config.json'
    config.save_config(path, tiny_config)
    assert config.load_config(path) == tiny_config


def test_model_hyper(tiny_config):
    hyper = config.model_hyper(tiny_config)
    assert (hyper.d_in, hyper.d_out, hyper.n_experts, hyper.n_layers) == (4, 3, 8, 2)
    assert hyper.task_kind == 'regression'
