import os

import pytest
from hypothesis import HealthCheck, settings

from moerpl import calibration, config, moe_model
from moerpl.tasks import TaskSpec

settings.register_profile('default', max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.register_profile('fast', max_examples=10, deadline=None,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.getenv('HYPOTHESIS_PROFILE', 'default'))


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow acceptance tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_hyper():
    return moe_model.ModelHyper(d_in=4, d_model=8, d_hidden=6, n_experts=4, top_k=2, n_layers=2, d_out=3,
                                precision='double')


@pytest.fixture
def tiny_model(tiny_hyper):
    return moe_model.init_model(tiny_hyper, seed=0)


@pytest.fixture
def tiny_task():
    return TaskSpec(input_dim=4, output_dim=3, num_modes=4, batch_tokens=16, seed=0)


@pytest.fixture
def tiny_calib(tiny_task):
    return calibration.build_calibration_set(tiny_task, 256, batch_tokens=64, precision='double')


@pytest.fixture
def tiny_config(tmp_path):
    return config.ExperimentConfig(
        model=config.ModelConfig(d_model=8, d_hidden=8, n_experts=8, top_k=2, n_layers=2),
        task=TaskSpec(input_dim=4, output_dim=3, num_modes=6, batch_tokens=16),
        calibration=config.CalibrationConfig(tokens=512, batch_tokens=128),
        selection=config.SelectionConfig(target_rho=0.3, tol=0.05),
        run=config.RunConfig(seed=0, seeds=[0, 1], pretrain_steps=30, finetune_steps=10, eval_batches=2,
                             log_every=0, out_dir=str(tmp_path / 'run')),
        sweep=config.SweepConfig(values={'end_ratio': [0.0, 0.2], 'rank': [1]}),
    )
