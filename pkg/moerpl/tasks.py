import functools
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from moerpl import numerics
from moerpl.errors import ConfigError


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-15

"""Synthetic tasks that push experts to specialize.

Tokens come from K modes with Zipf-like frequencies; every mode has its own centroid and
its own linear map (regression) or class (classification). Rare modes make rarely used
experts, which is the redundancy the compression pipeline feeds on."""

TASK_KINDS = {
    'cluster-regression': 'regression',
    'modular-classification': 'classification',
}

SPLITS = {
    'train': numerics.STREAM_TRAIN,
    'eval': numerics.STREAM_EVAL,
}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = 'cluster-regression'
    input_dim: int = 16
    output_dim: int = 8
    num_modes: int = 16
    mode_skew: float = 1.0
    noise_std: float = 0.05
    seed: int = 0
    batch_tokens: int = 32
    centroid_scale: float = 2.0
    spread: float = 0.5

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"Unknown task kind '{self.kind}'", allowed=sorted(TASK_KINDS))
        if self.num_modes < 2:
            raise ConfigError(f"num_modes must be >= 2, got {self.num_modes}")
        if min(self.input_dim, self.output_dim, self.batch_tokens) < 1:
            raise ConfigError("Task dimensions and batch_tokens must be positive")
        if self.mode_skew < 0 or self.noise_std < 0 or self.spread < 0:
            raise ConfigError("mode_skew, noise_std and spread must be non-negative")
        if self.kind == 'modular-classification' and self.noise_std > 1:
            raise ConfigError("noise_std is a label-flip probability for classification and must be <= 1")

    @property
    def task_kind(self):
        return TASK_KINDS[self.kind]


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    mode_labels: np.ndarray

    @property
    def tokens(self):
        return self.inputs.shape[0]


# Mode k is drawn with probability proportional to (k + 1) ** -mode_skew.
def mode_probabilities(spec):
    weights = (np.arange(spec.num_modes, dtype=np.float64) + 1.0) ** -spec.mode_skew
    return weights / weights.sum()


# Planted centroids and per-mode linear maps, fixed by the task seed.
@functools.lru_cache(maxsize=16)
def planted(spec):
    rng = numerics.make_rng(spec.seed, numerics.STREAM_TASK)
    centroids = rng.standard_normal((spec.num_modes, spec.input_dim)) * spec.centroid_scale
    maps = rng.standard_normal((spec.num_modes, spec.input_dim, spec.output_dim)) * spec.input_dim ** -0.5
    centroids.setflags(write=False)
    maps.setflags(write=False)
    return centroids, maps


def generate(spec, split, batch_index, precision='single', tokens=None):
    if split not in SPLITS:
        raise ConfigError(f"Unknown split '{split}'", allowed=sorted(SPLITS))
    dt = numerics.dtype_for(precision)
    n = tokens or spec.batch_tokens
    rng = numerics.make_rng(spec.seed, SPLITS[split], batch_index)
    centroids, maps = planted(spec)
    modes = rng.choice(spec.num_modes, size=n, p=mode_probabilities(spec))
    inputs = (centroids[modes] + spec.spread * rng.standard_normal((n, spec.input_dim))).astype(dt)
    if spec.task_kind == 'regression':
        noise = rng.standard_normal((n, spec.output_dim))
        x = inputs.astype(np.float64)
        targets = np.einsum('td,tdo->to', x, maps[modes]) + spec.noise_std * noise
        targets = targets.astype(dt)
    else:
        flips = rng.random(n) < spec.noise_std
        random_labels = rng.integers(0, spec.output_dim, size=n)
        targets = np.where(flips, random_labels, modes % spec.output_dim).astype(np.int64)
    return Batch(inputs=inputs, targets=targets, mode_labels=modes.astype(np.int64))


def batches(spec, split, start, count, precision='single', tokens=None):
    for index in range(start, start + count):
        yield generate(spec, split, index, precision=precision, tokens=tokens)


# Dump a few batches to CSV for inspection.
def dump_dataset(spec, split, n_batches, path, precision='single'):
    frames = []
    for index, batch in enumerate(batches(spec, split, 0, n_batches, precision=precision)):
        df = pd.DataFrame(batch.inputs, columns=[f"x{d}" for d in range(spec.input_dim)])
        if spec.task_kind == 'regression':
            for o in range(spec.output_dim):
                df[f"y{o}"] = batch.targets[:, o]
        else:
            df['label'] = batch.targets
        df['mode'] = batch.mode_labels
        df.insert(0, 'batch', index)
        frames.append(df)
    data = pd.concat(frames, ignore_index=True)
    data.to_csv(path, index=False)
    logging.info(f"Dumped {len(data)} {split} tokens of task '{spec.kind}' to {path}")
    return data
