import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from moerpl import moe_model
from moerpl.errors import CheckpointBoundsError, CheckpointVersionError
from moerpl.moe_model import (ExpertParams, LowRankAdapter, MoELayer, MoEModel, ModelHyper,
                              ReplacedExpert, RouterParams, SharedBase)


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-23

"""Binary model checkpoints.

Layout: 8-byte magic b"MOERPLC1", 8-byte little-endian manifest length, the UTF-8 JSON
manifest, then the payload of concatenated little-endian tensor bytes. The manifest holds
the format version, the model hyperparameters, the compressed structure and a tensor
directory name -> {dtype, shape, offset, length} with offsets relative to the payload."""

MAGIC = b'MOERPLC1'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<Q')


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict = field(default_factory=dict)


def _little_endian(arr):
    dt = np.dtype(arr.dtype).newbyteorder('<')
    return np.ascontiguousarray(arr, dtype=dt)


def encode_checkpoint(checkpoint):
    directory, chunks, offset = {}, [], 0
    for name, value in checkpoint.tensors.items():
        arr = _little_endian(np.asarray(value))
        raw = arr.tobytes()
        directory[name] = {'dtype': arr.dtype.str, 'shape': list(arr.shape), 'offset': offset, 'length': len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(checkpoint.manifest)
    manifest['format_version'] = FORMAT_VERSION
    manifest['tensors'] = directory
    encoded = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + _HEADER.pack(len(encoded)) + encoded + b''.join(chunks)


def decode_checkpoint(data):
    if len(data) < len(MAGIC) + _HEADER.size or data[:len(MAGIC)] != MAGIC:
        raise CheckpointVersionError("Not a moerpl checkpoint (bad magic)")
    (manifest_len,) = _HEADER.unpack_from(data, len(MAGIC))
    start = len(MAGIC) + _HEADER.size
    if start + manifest_len > len(data):
        raise CheckpointBoundsError(f"Manifest of {manifest_len} bytes runs past the end of the file",
                                    file_length=len(data))
    try:
        manifest = json.loads(data[start:start + manifest_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointVersionError(f"Unreadable manifest: {e}")
    if manifest.get('format_version') != FORMAT_VERSION:
        raise CheckpointVersionError(f"Unsupported checkpoint version {manifest.get('format_version')}",
                                     expected=FORMAT_VERSION)
    payload = memoryview(data)[start + manifest_len:]
    directory = manifest.pop('tensors', {})
    # Every entry in bounds, sized by its shape, and no two entries overlapping.
    spans = []
    for name, entry in directory.items():
        dt = np.dtype(entry['dtype'])
        expected = int(np.prod(entry['shape'], dtype=np.int64)) * dt.itemsize
        offset, length = int(entry['offset']), int(entry['length'])
        if length != expected:
            raise CheckpointBoundsError(f"Tensor {name}: length {length} does not match shape {entry['shape']}")
        if offset < 0 or offset + length > len(payload):
            raise CheckpointBoundsError(f"Tensor {name} runs past the payload", tensor=name,
                                        offset=offset, length=length, payload_length=len(payload))
        spans.append((offset, offset + length, name))
    spans.sort()
    for (_, end, left), (begin, _, right) in zip(spans, spans[1:]):
        if begin < end:
            raise CheckpointBoundsError(f"Tensors {left} and {right} overlap")
    tensors = {}
    for name, entry in directory.items():
        dt = np.dtype(entry['dtype'])
        raw = payload[entry['offset']:entry['offset'] + entry['length']]
        arr = np.frombuffer(raw, dtype=dt).reshape(entry['shape'])
        tensors[name] = arr.astype(dt.newbyteorder('='), copy=True)
    return Checkpoint(manifest=manifest, tensors=tensors)


def save_checkpoint(path, checkpoint):
    data = encode_checkpoint(checkpoint)
    with open(path, 'wb') as f:
        f.write(data)
    logging.info(f"Checkpoint with {len(checkpoint.tensors)} tensors written to {path} ({len(data)} bytes)")


def load_checkpoint(path):
    with open(path, 'rb') as f:
        data = f.read()
    checkpoint = decode_checkpoint(data)
    logging.info(f"Loaded checkpoint {path} with {len(checkpoint.tensors)} tensors")
    return checkpoint


def _structure(model):
    layers = []
    for layer in model.layers:
        layers.append({
            'experts': sorted(int(i) for i in layer.experts),
            'originals': sorted(int(i) for i in layer.originals),
            'replaced': [{'expert': int(i), 'group': slot.group_id}
                         for i, slot in sorted(layer.replaced.items())],
            'bases': [{'group': int(g), 'members': [int(i) for i in base.member_ids]}
                      for g, base in sorted(layer.bases.items())],
            'retained_adapters': sorted(int(i) for i in layer.retained_adapters),
        })
    return {'beta': float(model.beta), 'layers': layers}


def model_to_checkpoint(model, mode=None):
    manifest = {'hyper': asdict(model.hyper), 'structure': _structure(model)}
    if mode is not None:
        manifest['structure']['mode'] = mode
    tensors = {name: value for name, value in moe_model.named_parameters(model).items()}
    return Checkpoint(manifest=manifest, tensors=tensors)


def _adapter(tensors, prefix):
    return LowRankAdapter(a=tensors[f"{prefix}.a"], b=tensors[f"{prefix}.b"])


def model_from_checkpoint(checkpoint):
    hyper = ModelHyper(**checkpoint.manifest['hyper'])
    structure = checkpoint.manifest.get('structure', {'beta': 1.0, 'layers': []})
    t = checkpoint.tensors
    try:
        layers = []
        for j in range(hyper.n_layers):
            pre = moe_model.layer_prefix(j)
            info = structure['layers'][j] if structure['layers'] else {
                'experts': list(range(hyper.n_experts)), 'originals': [], 'replaced': [],
                'bases': [], 'retained_adapters': []}
            layer = MoELayer(router=RouterParams(t[f"{pre}.router"]), experts={})
            for i in info['experts']:
                layer.experts[i] = ExpertParams(w_in=t[f"{pre}.experts.{i}.w_in"], w_out=t[f"{pre}.experts.{i}.w_out"])
            for i in info['originals']:
                layer.originals[i] = ExpertParams(w_in=t[f"{pre}.originals.{i}.w_in"],
                                                  w_out=t[f"{pre}.originals.{i}.w_out"])
            for entry in info['bases']:
                g = entry['group']
                layer.bases[g] = SharedBase(w_in=t[f"{pre}.bases.{g}.w_in"], w_out=t[f"{pre}.bases.{g}.w_out"],
                                            member_ids=list(entry['members']), group_id=g)
            for entry in info['replaced']:
                i = entry['expert']
                layer.replaced[i] = ReplacedExpert(group_id=entry['group'],
                                                   adapter_in=_adapter(t, f"{pre}.adapters.{i}.w_in"),
                                                   adapter_out=_adapter(t, f"{pre}.adapters.{i}.w_out"))
            for i in info['retained_adapters']:
                layer.retained_adapters[i] = (_adapter(t, f"{pre}.retained_adapters.{i}.w_in"),
                                              _adapter(t, f"{pre}.retained_adapters.{i}.w_out"))
            layers.append(layer)
        model = MoEModel(hyper=hyper, input_proj=t['input_proj'], layers=layers,
                         output_head=t['output_head'], beta=float(structure.get('beta', 1.0)))
    except KeyError as e:
        raise CheckpointBoundsError(f"Checkpoint is missing tensor {e.args[0]}", tensor=e.args[0])
    return model
