import json
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from moerpl import moe_model, tasks
from moerpl.errors import ConfigError, PreconditionError


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-17

"""Expert importance from calibration data.

Normalized gate scores: G_i = sum_x G(x)_i / sum_i sum_x G(x)_i per layer.
Router norms: per-layer mean L2 norm of the router output, then relative to the mean
over layers. All accumulation is float64 in batch order."""

GATE_MODES = ('post_topk', 'dense')
NORM_MODES = ('gates', 'logits')

# Calibration draws training batches far away from the pretraining indices.
CALIBRATION_BATCH_OFFSET = 500_000


@dataclass
class CalibrationSet:
    batches: list
    token_count: int = 0

    def __post_init__(self):
        counted = sum(b.tokens for b in self.batches)
        if self.token_count == 0:
            self.token_count = counted
        elif self.token_count != counted:
            raise PreconditionError(f"token_count {self.token_count} does not match the {counted} tokens in the batches")


@dataclass
class GateScoreTable:
    scores: np.ndarray
    token_count: int
    mode: str = 'post_topk'

    @property
    def n_layers(self):
        return self.scores.shape[0]

    def layer(self, j):
        return self.scores[j]


@dataclass
class RouterNormProfile:
    raw_norms: np.ndarray
    relative_norms: np.ndarray
    mode: str = 'gates'

    @classmethod
    def from_raw_norms(cls, raw_norms, mode='gates'):
        raw = np.asarray(raw_norms, dtype=np.float64)
        if raw.size < 1 or np.any(raw <= 0):
            raise PreconditionError("Router norms must be positive and cover at least one layer")
        return cls(raw_norms=raw, relative_norms=raw / raw.mean(), mode=mode)


# Sample calibration tokens from the training split.
def build_calibration_set(spec, tokens, batch_tokens=4096, precision='single',
                          start=CALIBRATION_BATCH_OFFSET):
    if tokens < 1:
        raise PreconditionError(f"Calibration budget must be positive, got {tokens}")
    calib_batches = []
    remaining = tokens
    index = start
    while remaining > 0:
        n = min(batch_tokens, remaining)
        calib_batches.append(tasks.generate(spec, 'train', index, precision=precision, tokens=n))
        remaining -= n
        index += 1
    return CalibrationSet(batches=calib_batches)


def _require_tokens(calib):
    if not calib.batches or calib.token_count <= 0:
        raise PreconditionError("Calibration set is empty")


def accumulate_gate_scores(model, calib, mode='post_topk'):
    if mode not in GATE_MODES:
        raise ConfigError(f"Unknown gate score mode '{mode}'", allowed=list(GATE_MODES))
    _require_tokens(calib)
    totals = np.zeros((len(model.layers), model.hyper.n_experts), dtype=np.float64)
    for batch in calib.batches:
        _, gatings = moe_model.trace_routing(model, batch.inputs)
        for j, gating in enumerate(gatings):
            if mode == 'post_topk':
                contrib = np.zeros(gating.dense_gates.shape, dtype=np.float64)
                np.put_along_axis(contrib, gating.active_indices,
                                  gating.active_gates.astype(np.float64), axis=1)
            else:
                contrib = gating.dense_gates.astype(np.float64)
            totals[j] += contrib.sum(axis=0)
    scores = totals / totals.sum(axis=1, keepdims=True)
    logging.info(f"Gate scores over {calib.token_count} tokens ({mode}); "
                 f"max per layer {np.round(scores.max(axis=1), 4).tolist()}")
    return GateScoreTable(scores=scores, token_count=calib.token_count, mode=mode)


def compute_router_norms(model, calib, mode='gates'):
    if mode not in NORM_MODES:
        raise ConfigError(f"Unknown router norm mode '{mode}'", allowed=list(NORM_MODES))
    _require_tokens(calib)
    sums = np.zeros(len(model.layers), dtype=np.float64)
    for batch in calib.batches:
        _, gatings = moe_model.trace_routing(model, batch.inputs)
        for j, gating in enumerate(gatings):
            out = gating.dense_gates if mode == 'gates' else gating.logits
            sums[j] += np.linalg.norm(out.astype(np.float64), axis=1).sum()
    profile = RouterNormProfile.from_raw_norms(sums / calib.token_count, mode=mode)
    logging.info(f"Relative router norms: {np.round(profile.relative_norms, 4).tolist()}")
    return profile


def calibration_to_dict(table, profile):
    layers = []
    for j in range(table.n_layers):
        layers.append({
            'scores': [float(s) for s in table.scores[j]],
            'raw_norm': float(profile.raw_norms[j]),
            'relative_norm': float(profile.relative_norms[j]),
        })
    return {'layers': layers, 'token_count': int(table.token_count),
            'gate_mode': table.mode, 'norm_mode': profile.mode}


def calibration_from_dict(data):
    scores = np.array([layer['scores'] for layer in data['layers']], dtype=np.float64)
    table = GateScoreTable(scores=scores, token_count=int(data['token_count']),
                           mode=data.get('gate_mode', 'post_topk'))
    profile = RouterNormProfile.from_raw_norms([layer['raw_norm'] for layer in data['layers']],
                                               mode=data.get('norm_mode', 'gates'))
    return table, profile


def save_calibration(path, table, profile):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(calibration_to_dict(table, profile), indent=2, sort_keys=True) + '\n')
    logging.info(f"Calibration written to {path}")


def load_calibration(path):
    with open(path, 'r', encoding='utf-8') as f:
        return calibration_from_dict(json.load(f))


# Sorted score curves per layer, lowest importance first.
def importance_curves(table, profile=None):
    rows = []
    for j in range(table.n_layers):
        order = np.argsort(table.scores[j], kind='stable')
        cumulative = np.cumsum(table.scores[j][order])
        for position, expert in enumerate(order):
            row = {'layer': j, 'position': position, 'expert': int(expert),
                   'score': float(table.scores[j][expert]), 'cumulative': float(cumulative[position])}
            if profile is not None:
                row['relative_norm'] = float(profile.relative_norms[j])
            rows.append(row)
    return pd.DataFrame(rows)
