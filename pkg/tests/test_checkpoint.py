import json

import numpy as np
import pytest

from moerpl import checkpoint, construction, grouping, moe_model, selection
from moerpl.calibration import GateScoreTable
from moerpl.errors import CheckpointBoundsError, CheckpointVersionError


def _raw(manifest, payload=b''):
    encoded = json.dumps(manifest).encode('utf-8')
    return checkpoint.MAGIC + checkpoint._HEADER.pack(len(encoded)) + encoded + payload


def _split(data):
    (n,) = checkpoint._HEADER.unpack_from(data, len(checkpoint.MAGIC))
    start = len(checkpoint.MAGIC) + checkpoint._HEADER.size
    return json.loads(data[start:start + n]), data[start + n:]


def test_model_round_trip_is_bit_exact(tmp_path, tiny_model):
    path = tmp_path / 'model.ckpt'
    checkpoint.save_checkpoint(path, checkpoint.model_to_checkpoint(tiny_model))
    loaded = checkpoint.model_from_checkpoint(checkpoint.load_checkpoint(path))
    original = moe_model.named_parameters(tiny_model)
    restored = moe_model.named_parameters(loaded)
    assert list(original) == list(restored)
    for name, value in original.items():
        assert restored[name].dtype == value.dtype
        assert np.array_equal(restored[name], value)
    assert loaded.hyper == tiny_model.hyper


def test_save_load_save_is_byte_identical(tmp_path, tiny_model):
    first, second = tmp_path / 'a.ckpt', tmp_path / 'b.ckpt'
    checkpoint.save_checkpoint(first, checkpoint.model_to_checkpoint(tiny_model))
    model = checkpoint.model_from_checkpoint(checkpoint.load_checkpoint(first))
    checkpoint.save_checkpoint(second, checkpoint.model_to_checkpoint(model))
    assert first.read_bytes() == second.read_bytes()


def test_header_layout(tiny_model):
    data = checkpoint.encode_checkpoint(checkpoint.model_to_checkpoint(tiny_model))
    assert data[:8] == b'MOERPLC1'
    manifest, payload = _split(data)
    assert manifest['format_version'] == 1
    assert manifest['tensors']['input_proj']['dtype'] == '<f8'
    assert sum(entry['length'] for entry in manifest['tensors'].values()) == len(payload)


def test_truncated_file(tiny_model):
    data = checkpoint.encode_checkpoint(checkpoint.model_to_checkpoint(tiny_model))
    with pytest.raises(CheckpointBoundsError):
        checkpoint.decode_checkpoint(data[:-4])
    with pytest.raises(CheckpointBoundsError):
        checkpoint.decode_checkpoint(data[:40])


def test_foreign_magic():
    with pytest.raises(CheckpointVersionError):
        checkpoint.decode_checkpoint(b'PK\x03\x04' + bytes(32))
    with pytest.raises(CheckpointVersionError):
        checkpoint.decode_checkpoint(b'MOER')


def test_unknown_version():
    with pytest.raises(CheckpointVersionError):
        checkpoint.decode_checkpoint(_raw({'format_version': 2, 'tensors': {}}))


def test_overlapping_tensors():
    payload = np.arange(4, dtype='<f4').tobytes()
    manifest = {'format_version': 1, 'tensors': {
        'x': {'dtype': '<f4', 'shape': [2], 'offset': 0, 'length': 8},
        'y': {'dtype': '<f4', 'shape': [2], 'offset': 4, 'length': 8},
    }}
    with pytest.raises(CheckpointBoundsError):
        checkpoint.decode_checkpoint(_raw(manifest, payload))


def test_length_must_match_shape():
    manifest = {'format_version': 1, 'tensors': {'x': {'dtype': '<f4', 'shape': [3], 'offset': 0, 'length': 8}}}
    with pytest.raises(CheckpointBoundsError):
        checkpoint.decode_checkpoint(_raw(manifest, bytes(16)))


def test_missing_tensor(tiny_model):
    ckpt = checkpoint.model_to_checkpoint(tiny_model)
    del ckpt.tensors['output_head']
    with pytest.raises(CheckpointBoundsError):
        checkpoint.model_from_checkpoint(checkpoint.decode_checkpoint(checkpoint.encode_checkpoint(ckpt)))


def test_compressed_model_round_trip(tmp_path, tiny_model):
    plan = selection.SelectionPlan(layers=[selection.LayerSelection(0.5, [0, 2]),
                                           selection.LayerSelection(0.5, [3])])
    scores = GateScoreTable(scores=np.full((2, 4), 0.25), token_count=1)
    groups = grouping.dominant_group(tiny_model, None, plan, scores, group_size=2)
    compressed, _ = construction.assemble_compressed_model(tiny_model, plan, groups, scores, 1, seed=3)
    compressed.layers[0].replaced[0].adapter_in.b[...] = 0.1
    compressed.beta = 0.4
    path = tmp_path / 'compressed.ckpt'
    checkpoint.save_checkpoint(path, checkpoint.model_to_checkpoint(compressed, mode='annealed'))
    ckpt = checkpoint.load_checkpoint(path)
    assert ckpt.manifest['structure']['mode'] == 'annealed'
    loaded = checkpoint.model_from_checkpoint(ckpt)
    assert loaded.beta == 0.4
    assert sorted(loaded.layers[0].replaced) == [0, 2]
    x = np.random.default_rng(0).normal(size=(10, 4))
    assert np.array_equal(moe_model.model_forward(loaded, x), moe_model.model_forward(compressed, x))
