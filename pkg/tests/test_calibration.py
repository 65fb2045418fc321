import numpy as np
import pytest

from moerpl import calibration, moe_model, tasks
from moerpl.errors import ConfigError, PreconditionError


def test_calibration_set_covers_the_budget(tiny_task):
    calib = calibration.build_calibration_set(tiny_task, 300, batch_tokens=128)
    assert [b.tokens for b in calib.batches] == [128, 128, 44]
    assert calib.token_count == 300


def test_token_count_mismatch_is_rejected(tiny_calib):
    with pytest.raises(PreconditionError):
        calibration.CalibrationSet(batches=tiny_calib.batches, token_count=1)


@pytest.mark.parametrize('mode', ['post_topk', 'dense'])
def test_gate_scores_sum_to_one(tiny_model, tiny_calib, mode):
    table = calibration.accumulate_gate_scores(tiny_model, tiny_calib, mode=mode)
    assert table.scores.shape == (2, 4)
    assert np.all(np.abs(table.scores.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(table.scores >= 0)
    assert table.token_count == 256


def test_empty_calibration_set(tiny_model):
    with pytest.raises(PreconditionError):
        calibration.accumulate_gate_scores(tiny_model, calibration.CalibrationSet(batches=[]))
    with pytest.raises(PreconditionError):
        calibration.compute_router_norms(tiny_model, calibration.CalibrationSet(batches=[]))


def test_unknown_modes(tiny_model, tiny_calib):
    with pytest.raises(ConfigError):
        calibration.accumulate_gate_scores(tiny_model, tiny_calib, mode='mean')
    with pytest.raises(ConfigError):
        calibration.compute_router_norms(tiny_model, tiny_calib, mode='weights')


def test_relative_norms_example():
    profile = calibration.RouterNormProfile.from_raw_norms([0.6, 1.0])
    assert profile.relative_norms == pytest.approx([0.75, 1.25])


@pytest.mark.parametrize('mode', ['gates', 'logits'])
def test_router_norms_average_to_one(tiny_model, tiny_calib, mode):
    profile = calibration.compute_router_norms(tiny_model, tiny_calib, mode=mode)
    assert profile.relative_norms.mean() == pytest.approx(1.0)
    assert np.all(profile.raw_norms > 0)


def test_calibration_json_is_reproducible(tmp_path, tiny_model, tiny_calib):
    table = calibration.accumulate_gate_scores(tiny_model, tiny_calib)
    profile = calibration.compute_router_norms(tiny_model, tiny_calib)
    first, second = tmp_path / 'a.json', tmp_path / 'b.json'
    calibration.save_calibration(first, table, profile)
    again = calibration.accumulate_gate_scores(tiny_model, tiny_calib)
    calibration.save_calibration(second, again, calibration.compute_router_norms(tiny_model, tiny_calib))
    assert first.read_bytes() == second.read_bytes()
    loaded_table, loaded_profile = calibration.load_calibration(first)
    assert np.array_equal(loaded_table.scores, table.scores)
    assert np.array_equal(loaded_profile.relative_norms, profile.relative_norms)


def test_importance_curves(tiny_model, tiny_calib):
    table = calibration.accumulate_gate_scores(tiny_model, tiny_calib)
    profile = calibration.compute_router_norms(tiny_model, tiny_calib)
    curves = calibration.importance_curves(table, profile)
    assert len(curves) == 8
    for _, layer in curves.groupby('layer'):
        assert layer['score'].is_monotonic_increasing
        assert layer['cumulative'].iloc[-1] == pytest.approx(1.0)


def test_uniform_router_ties_break_by_index(tiny_model, tiny_calib):
    for layer in tiny_model.layers:
        layer.router.w_router[...] = 0.0
    table = calibration.accumulate_gate_scores(tiny_model, tiny_calib)
    for j in range(2):
        assert table.layer(j).tolist() == [0.5, 0.5, 0.0, 0.0]


def test_single_token_scores_are_one_hot():
    hyper = moe_model.ModelHyper(d_in=2, d_model=2, d_hidden=2, n_experts=4, top_k=1, n_layers=1, d_out=1,
                                 precision='double')
    model = moe_model.init_model(hyper, 0)
    model.input_proj[...] = np.eye(2)
    model.layers[0].router.w_router[...] = 0.0
    model.layers[0].router.w_router[:, 3] = 1.0
    token = tasks.Batch(inputs=np.array([[1.0, 1.0]]), targets=np.zeros((1, 1)),
                        mode_labels=np.zeros(1, dtype=np.int64))
    table = calibration.accumulate_gate_scores(model, calibration.CalibrationSet(batches=[token]))
    assert table.token_count == 1
    assert table.layer(0).tolist() == [0.0, 0.0, 0.0, 1.0]


def test_identical_layers_have_equal_norms(tiny_model, tiny_calib):
    for layer in tiny_model.layers:
        for expert in layer.experts.values():
            expert.w_in[...] = 0.0
            expert.w_out[...] = 0.0
    tiny_model.layers[1].router.w_router[...] = tiny_model.layers[0].router.w_router
    profile = calibration.compute_router_norms(tiny_model, tiny_calib)
    assert profile.relative_norms.tolist() == [1.0, 1.0]
