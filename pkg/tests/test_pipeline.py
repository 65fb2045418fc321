import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from moerpl import app, config, moe_model, pipeline
from moerpl.errors import ConfigError, InfeasibleTargetError, MissingArtifactError

ARTIFACTS = ['pretrain.ckpt', 'pretrain_trace.csv', 'calibration.json', 'selection.json', 'compression.json',
             'compression.csv', 'compressed.ckpt', 'finetune_trace.csv', 'finetuned.ckpt', 'metrics.json',
             'metrics.csv', 'report.csv', 'importance_curves.csv']


def _run_all(cfg):
    pipeline.run_pretrain(cfg)
    pipeline.run_calibrate(cfg)
    pipeline.run_compress(cfg)
    pipeline.run_finetune(cfg)
    metrics = pipeline.run_eval(cfg)
    pipeline.run_report(pipeline.output_dir(cfg))
    return metrics


def test_phases_write_their_artifacts(tiny_config):
    metrics = _run_all(tiny_config)
    out = pipeline.output_dir(tiny_config)
    for name in ARTIFACTS + ['config.json']:
        assert (out / name).exists(), name
    csv = pd.read_csv(out / 'metrics.csv')
    assert list(csv.columns) == pipeline.CSV_COLUMNS
    assert list(csv['phase']) == ['pretrained', 'assembled', 'recovered']
    assert (csv['wall_ms'] == 0).all()
    assert abs(metrics.rho - tiny_config.selection.target_rho) <= tiny_config.selection.tol
    assert metrics.acc_before is None
    trace = pd.read_csv(out / 'finetune_trace.csv')
    assert len(trace) == tiny_config.run.finetune_steps
    assert trace['beta'].iloc[0] == 1.0


def test_runs_are_byte_identical(tiny_config, tmp_path):
    second = config.apply_overrides(tiny_config, out=tmp_path / 'again')
    _run_all(tiny_config)
    _run_all(second)
    for name in ARTIFACTS:
        first_bytes = (pipeline.output_dir(tiny_config) / name).read_bytes()
        assert first_bytes == (pipeline.output_dir(second) / name).read_bytes(), name


def test_compress_from_disk_matches_in_memory(tiny_config):
    model, _ = pipeline.run_pretrain(tiny_config)
    table, profile, calib = pipeline.run_calibrate(tiny_config, model=model)
    in_memory = pipeline.run_compress(tiny_config, model=model, table=table, profile=profile, calib=calib,
                                      write=False)
    from_disk = pipeline.run_compress(tiny_config)
    assert in_memory.plan == from_disk.plan
    disk_params = moe_model.named_parameters(from_disk.model)
    for name, value in moe_model.named_parameters(in_memory.model).items():
        assert np.array_equal(disk_params[name], value), name


def test_missing_artifacts(tiny_config):
    with pytest.raises(MissingArtifactError):
        pipeline.run_calibrate(tiny_config)
    with pytest.raises(MissingArtifactError):
        pipeline.run_compress(tiny_config)
    with pytest.raises(MissingArtifactError):
        pipeline.run_eval(tiny_config)
    with pytest.raises(MissingArtifactError):
        pipeline.run_report(pipeline.output_dir(tiny_config))


def test_eval_needs_compressed_next_to_finetuned(tiny_config):
    _run_all(tiny_config)
    (pipeline.output_dir(tiny_config) / 'compressed.ckpt').unlink()
    with pytest.raises(MissingArtifactError):
        pipeline.run_eval(tiny_config)


def test_eval_on_pretrained_only(tiny_config):
    pipeline.run_pretrain(tiny_config)
    metrics = pipeline.run_eval(tiny_config)
    assert metrics.loss_assembled is None
    assert list(metrics.rows()['phase']) == ['pretrained']


@pytest.fixture
def calibrated(tiny_config):
    model, _ = pipeline.run_pretrain(tiny_config)
    table, profile, _ = pipeline.run_calibrate(tiny_config, model=model)
    return model.hyper, table, profile


def test_search_reaches_the_target(tiny_config, calibrated):
    search = pipeline.search_threshold(*calibrated, tiny_config)
    assert search.converged
    assert abs(search.achieved_rho - 0.3) <= 0.05
    assert all(n <= 6 for n in search.plan.counts)


def test_zero_target_gives_empty_plan(tiny_config, calibrated):
    search = pipeline.search_threshold(*calibrated, tiny_config, target_rho=0.0)
    assert search.plan.counts == [0, 0]
    assert search.achieved_rho == 0.0
    assert search.steps == []


def test_loose_tolerance_stops_at_first_step(tiny_config, calibrated):
    search = pipeline.search_threshold(*calibrated, tiny_config, tol=1.0)
    assert len(search.steps) == 1
    assert search.base_threshold == pytest.approx((pipeline.SEARCH_LOW + pipeline.SEARCH_HIGH) / 2)


def test_unreachable_target(tiny_config, calibrated):
    with pytest.raises(InfeasibleTargetError) as info:
        pipeline.search_threshold(*calibrated, tiny_config, target_rho=0.8)
    assert info.value.max_rho == pytest.approx(0.3125)
    assert json.loads(info.value.to_json())['error'] == 'target_infeasible'


def test_sweep_rows(tiny_config):
    frame = pipeline.run_sweep(tiny_config, 'end_ratio')
    per_seed = frame[frame['phase'] == 'recovered']
    assert len(per_seed) == 4
    assert sorted(frame[frame['phase'] == 'mean']['value']) == [0.0, 0.2]
    assert len(frame) == 8
    assert (per_seed['wall_ms'] == 0).all()
    assert (pipeline.output_dir(tiny_config) / 'sweep_end_ratio.csv').exists()
    compression = pd.read_csv(pipeline.output_dir(tiny_config) / 'compression_end_ratio.csv')
    assert list(compression.columns) == ['value', 'seed', 'mode', 'rho', 'before', 'after', 'candidates', 'groups']
    assert len(compression) == 4
    assert list(compression['seed']) == [0, 1, 0, 1]
    assert np.allclose(compression['rho'].to_numpy(), per_seed['rho'].to_numpy())
    report = pipeline.run_report(pipeline.output_dir(tiny_config))
    assert report['phase'].str.startswith('end_ratio/').all()


def test_single_value_sweep_has_no_summary(tiny_config):
    frame = pipeline.run_sweep(tiny_config, 'rank')
    assert list(frame['phase']) == ['recovered', 'recovered']
    assert list(frame['seed']) == [0, 1]


def test_sweep_needs_values(tiny_config):
    with pytest.raises(ConfigError):
        pipeline.run_sweep(tiny_config, 'learning_rate')


@pytest.mark.parametrize('value, expected', [
    ('linear', ('linear', 3.0)),
    ('exponential:5.0', ('exponential', 5.0)),
    ('exponential', ('exponential', 3.0)),
])
def test_parse_schedule(value, expected):
    assert pipeline.parse_schedule(value) == expected


@pytest.mark.parametrize('value', ['cosine', 'exponential:fast'])
def test_parse_schedule_rejects(value):
    with pytest.raises(ConfigError):
        pipeline.parse_schedule(value)


def test_apply_axis(tiny_config):
    assert pipeline.apply_axis(tiny_config, 'rank', 2).construction.rank == 2
    assert pipeline.apply_axis(tiny_config, 'schedule', 'exponential:1.0').schedule.gamma == 1.0
    assert pipeline.apply_axis(tiny_config, 'replace_mode', 'lora').construction.replace_mode == 'lora'
    with pytest.raises(ConfigError):
        pipeline.apply_axis(tiny_config, 'lr', 1)


@pytest.mark.parametrize('mode', ['shared_single', 'no_base', 'lora'])
def test_replace_modes_run_end_to_end(tiny_config, mode):
    cfg = dataclasses.replace(tiny_config, construction=config.ConstructionConfig(replace_mode=mode))
    metrics = pipeline.run_pipeline(cfg, 0)
    assert metrics.loss_recovered is not None
    if mode == 'lora':
        assert metrics.rho == 0.0
    else:
        assert metrics.rho > 0.0


def test_cli_reports_errors_as_json(tmp_path, capsys):
    assert app.main(['compress', '--out', str(tmp_path / 'empty')]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err['error'] == 'missing_artifact'
    assert err['artifact'] == 'pretrain.ckpt'


def test_cli_runs_phases(tiny_config, tmp_path, capsys):
    path = tmp_path / 'exp.json'
    config.save_config(path, tiny_config)
    assert app.main(['pretrain', '--config', str(path)]) == 0
    assert app.main(['calibrate', '--config', str(path)]) == 0
    capsys.readouterr()
    assert app.main(['search-threshold', '--config', str(path), '--target-rho', '0.25']) == 0
    result = json.loads(capsys.readouterr().out)
    assert result['target_rho'] == 0.25
    assert 'plan' in result
    assert (pipeline.output_dir(tiny_config) / 'selection.json').exists()


def test_cli_dumps_the_dataset(tiny_config, tmp_path):
    path = tmp_path / 'exp.json'
    config.save_config(path, tiny_config)
    assert app.main(['dataset', '--config', str(path)]) == 0
    out = pipeline.output_dir(tiny_config)
    train = pd.read_csv(out / 'dataset_train.csv')
    evaluation = pd.read_csv(out / 'dataset_eval.csv')
    assert list(train.columns) == ['batch', 'x0', 'x1', 'x2', 'x3', 'y0', 'y1', 'y2', 'mode']
    assert len(train) == len(evaluation) == 32
    assert sorted(train['batch'].unique()) == [0, 1]
