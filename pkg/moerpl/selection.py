import logging
from dataclasses import dataclass, field

import numpy as np

from moerpl.errors import ConfigError, PreconditionError


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-18

"""Pick the experts to replace.

Adaptive thresholds: p_j = clip(p * exp(-alpha * (norm_j - 1)), (1 - maxd) p, (1 + maxd) p).
Each layer then takes the smallest ascending-score prefix whose cumulative score
reaches p_j, the crossing expert included."""


@dataclass
class ThresholdConfig:
    base_threshold: float
    alpha: float = 0.3
    max_delta: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.base_threshold < 1.0:
            raise ConfigError(f"base_threshold must lie in (0, 1), got {self.base_threshold}")
        if self.max_delta < 0.0 or (1.0 - self.max_delta) * self.base_threshold < 0.0:
            raise ConfigError(f"max_delta={self.max_delta} gives a negative minimum threshold")

    @property
    def p_min(self):
        return (1.0 - self.max_delta) * self.base_threshold

    @property
    def p_max(self):
        return (1.0 + self.max_delta) * self.base_threshold


@dataclass
class LayerSelection:
    threshold: float
    candidate_ids: list = field(default_factory=list)
    cumulative_score: float = 0.0


@dataclass
class SelectionPlan:
    layers: list
    method: str = 'adaptive'

    @property
    def counts(self):
        return [len(layer.candidate_ids) for layer in self.layers]

    def candidate_set(self, j):
        return set(self.layers[j].candidate_ids)

    def to_dict(self):
        return {
            'method': self.method,
            'layers': [{'threshold': None if layer.threshold is None else float(layer.threshold),
                        'candidates': [int(i) for i in layer.candidate_ids],
                        'cumulative_score': float(layer.cumulative_score)} for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data):
        layers = []
        for layer in data['layers']:
            threshold = layer['threshold']
            layers.append(LayerSelection(threshold=None if threshold is None else float(threshold),
                                         candidate_ids=[int(i) for i in layer['candidates']],
                                         cumulative_score=float(layer.get('cumulative_score', 0.0))))
        return cls(layers=layers, method=data.get('method', 'adaptive'))


def adaptive_thresholds(profile, cfg):
    norms = np.asarray(profile.relative_norms, dtype=np.float64)
    if norms.size < 1:
        raise PreconditionError("Router norm profile has no layers")
    raw = cfg.base_threshold * np.exp(-cfg.alpha * (norms - 1.0))
    return np.clip(raw, cfg.p_min, cfg.p_max)


def ascending_order(scores):
    return np.argsort(np.asarray(scores, dtype=np.float64), kind='stable')


def _select_layer(scores, threshold, max_candidates=None):
    order = ascending_order(scores)
    cumulative = np.cumsum(np.asarray(scores, dtype=np.float64)[order])
    reached = np.nonzero(cumulative >= threshold)[0]
    count = 0 if threshold <= 0.0 else (int(reached[0]) + 1 if reached.size else len(order))
    if max_candidates is not None:
        count = min(count, max_candidates)
    chosen = [int(i) for i in order[:count]]
    total = float(cumulative[count - 1]) if count else 0.0
    return LayerSelection(threshold=float(threshold), candidate_ids=chosen, cumulative_score=total)


# Smallest ascending prefix per layer whose cumulative score reaches the layer threshold.
def select_candidates(scores, thresholds, max_candidates=None, method='adaptive'):
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape[0] != scores.n_layers:
        raise PreconditionError(f"{thresholds.shape[0]} thresholds for {scores.n_layers} layers")
    if np.any(thresholds < 0.0) or np.any(thresholds >= 1.0):
        raise PreconditionError("Layer thresholds must lie in [0, 1)")
    layers = [_select_layer(scores.layer(j), thresholds[j], max_candidates) for j in range(scores.n_layers)]
    plan = SelectionPlan(layers=layers, method=method)
    logging.debug(f"Selection ({method}) counts per layer: {plan.counts}")
    return plan


def uniform_select(scores, base_threshold, max_candidates=None):
    return select_candidates(scores, np.full(scores.n_layers, float(base_threshold)),
                             max_candidates=max_candidates, method='uniform')


# The `count_per_layer` lowest-score experts of every layer.
def average_select(scores, count_per_layer):
    n_experts = scores.scores.shape[1]
    if not 0 <= count_per_layer <= n_experts:
        raise PreconditionError(f"count_per_layer={count_per_layer} outside [0, {n_experts}]")
    layers = []
    for j in range(scores.n_layers):
        order = ascending_order(scores.layer(j))[:count_per_layer]
        total = float(np.asarray(scores.layer(j), dtype=np.float64)[order].sum())
        layers.append(LayerSelection(threshold=None, candidate_ids=[int(i) for i in order],
                                     cumulative_score=total))
    return SelectionPlan(layers=layers, method='average')


def mirrored_average_count(adaptive_plan):
    counts = adaptive_plan.counts
    return int(round(sum(counts) / len(counts))) if counts else 0
