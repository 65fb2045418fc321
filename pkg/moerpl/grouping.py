import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.metrics.pairwise import cosine_similarity

from moerpl import autodiff as ad
from moerpl import moe_model
from moerpl.errors import ConfigError, ContractViolation, PreconditionError


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-19

"""Partition each layer's replacement candidates into groups sharing one base.

Dominant grouping: the M = ceil(N'/group_size) highest-score candidates become
dominants and every other candidate joins its most similar dominant. The k-means
baseline clusters candidates by their mean output on calibration tokens."""

SIMILARITY_MODES = ('router', 'profile')


@dataclass
class Group:
    dominant_id: int
    member_ids: list


@dataclass
class GroupAssignment:
    layers: list
    group_size_target: int = 3
    method: str = 'dominant'

    @property
    def group_counts(self):
        return [len(groups) for groups in self.layers]

    def to_dict(self):
        return {
            'method': self.method,
            'group_size_target': self.group_size_target,
            'layers': [[{'dominant': int(g.dominant_id), 'members': [int(i) for i in g.member_ids]}
                        for g in groups] for groups in self.layers],
        }

    @classmethod
    def from_dict(cls, data):
        layers = [[Group(dominant_id=int(g['dominant']), member_ids=[int(i) for i in g['members']])
                   for g in groups] for groups in data['layers']]
        return cls(layers=layers, group_size_target=int(data.get('group_size_target', 3)),
                   method=data.get('method', 'dominant'))


@dataclass
class SimilarityMatrix:
    layers: list
    row_ids: list = field(default_factory=list)
    dominant_ids: list = field(default_factory=list)


def _by_importance(ids, layer_scores):
    return sorted(ids, key=lambda i: (-float(layer_scores[i]), i))


def group_count(n_candidates, group_size):
    return math.ceil(n_candidates / group_size) if n_candidates else 0


# The M highest-score candidates of every layer, most important first.
def pick_dominants(plan, scores, group_size):
    if group_size < 1:
        raise PreconditionError(f"group_size must be >= 1, got {group_size}")
    dominants = []
    for j, layer in enumerate(plan.layers):
        m = group_count(len(layer.candidate_ids), group_size)
        dominants.append(_by_importance(layer.candidate_ids, scores.layer(j))[:m])
    return dominants


def _logit_profiles(model, calib):
    profiles = [[] for _ in model.layers]
    for batch in calib.batches:
        _, gatings = moe_model.trace_routing(model, batch.inputs)
        for j, gating in enumerate(gatings):
            profiles[j].append(gating.logits.astype(np.float64))
    return [np.concatenate(p, axis=0) for p in profiles]


def routing_similarity(model, calib, plan, dominants, mode='router'):
    if mode not in SIMILARITY_MODES:
        raise ConfigError(f"Unknown similarity mode '{mode}'", allowed=list(SIMILARITY_MODES))
    if mode == 'profile':
        if not calib.batches:
            raise PreconditionError("Calibration set is empty")
        sources = _logit_profiles(model, calib)
    else:
        sources = [layer.router.w_router.astype(np.float64) for layer in model.layers]
    matrices, row_ids = [], []
    for j, layer in enumerate(plan.layers):
        rows = list(layer.candidate_ids)
        row_ids.append(rows)
        if not rows or not dominants[j]:
            matrices.append(np.zeros((len(rows), len(dominants[j]))))
            continue
        # Each expert is a column of the router weights or of the logit profile.
        sim = cosine_similarity(sources[j][:, rows].T, sources[j][:, dominants[j]].T)
        matrices.append(np.clip(sim, -1.0, 1.0))
    return SimilarityMatrix(layers=matrices, row_ids=row_ids, dominant_ids=[list(d) for d in dominants])


# Every candidate joins its most similar dominant; ties go to the earlier (more important) dominant.
def assign_members(dominants, sim, group_size_target=3):
    layers = []
    for j, doms in enumerate(dominants):
        rows = sim.row_ids[j]
        if rows and not doms:
            raise PreconditionError(f"Layer {j} has candidates but no dominants")
        members = {d: [d] for d in doms}
        for r, expert in enumerate(rows):
            if expert in members:
                continue
            members[doms[int(np.argmax(sim.layers[j][r]))]].append(expert)
        layers.append([Group(dominant_id=d, member_ids=sorted(members[d])) for d in doms])
    return GroupAssignment(layers=layers, group_size_target=group_size_target, method='dominant')


def dominant_group(model, calib, plan, scores, group_size=3, mode='router'):
    dominants = pick_dominants(plan, scores, group_size)
    sim = routing_similarity(model, calib, plan, dominants, mode=mode)
    return assign_members(dominants, sim, group_size_target=group_size)


# One group per layer holding every candidate, led by the most important one.
def single_group(plan, scores):
    layers = []
    for j, layer in enumerate(plan.layers):
        if not layer.candidate_ids:
            layers.append([])
            continue
        members = sorted(layer.candidate_ids)
        layers.append([Group(dominant_id=_by_importance(members, scores.layer(j))[0], member_ids=members)])
    return GroupAssignment(layers=layers, group_size_target=0, method='single')


def empty_groups(n_layers):
    return GroupAssignment(layers=[[] for _ in range(n_layers)], group_size_target=0, method='none')


# Cluster feature rows into n_clusters with a seeded k-means++ start.
def kmeans_partition(features, n_clusters, seed=0):
    n = features.shape[0]
    if not 1 <= n_clusters <= n:
        raise PreconditionError(f"Cannot form {n_clusters} clusters from {n} candidates")
    if n_clusters == n:
        return np.arange(n)
    kmeans = KMeans(n_clusters=n_clusters, init='k-means++', n_init=1, max_iter=100,
                    tol=1e-6, random_state=seed)
    return kmeans.fit_predict(features)


def _calibration_layer_inputs(model, calib):
    inputs = [[] for _ in model.layers]
    for batch in calib.batches:
        layer_inputs, _ = moe_model.trace_routing(model, batch.inputs)
        for j, x in enumerate(layer_inputs):
            inputs[j].append(x)
    return [np.concatenate(x, axis=0) for x in inputs]


def mean_expert_outputs(model, calib, j, expert_ids, layer_inputs=None):
    if layer_inputs is None:
        layer_inputs = _calibration_layer_inputs(model, calib)
    x = layer_inputs[j].astype(np.float64)
    layer = model.layers[j]
    features = []
    for i in expert_ids:
        w_in, w_out = moe_model.expert_weight_arrays(layer, i, model.beta, j)
        h = ad.silu(ad.constant(x @ w_in.astype(np.float64))).value
        features.append((h @ w_out.astype(np.float64)).mean(axis=0))
    return np.array(features)


# k-means over mean expert outputs; n_groups is one count or one count per layer.
def kmeans_group(model, calib, plan, n_groups, scores, seed=0):
    if not calib.batches:
        raise PreconditionError("Calibration set is empty")
    counts = n_groups if isinstance(n_groups, (list, tuple)) else [n_groups] * len(plan.layers)
    if len(counts) != len(plan.layers):
        raise ContractViolation(f"{len(counts)} group counts for {len(plan.layers)} layers")
    layer_inputs = _calibration_layer_inputs(model, calib)
    layers = []
    for j, layer in enumerate(plan.layers):
        candidates = list(layer.candidate_ids)
        if not candidates:
            layers.append([])
            continue
        if counts[j] < 1 or counts[j] > len(candidates):
            raise PreconditionError(f"Layer {j}: M={counts[j]} outside [1, {len(candidates)}]")
        features = mean_expert_outputs(model, calib, j, candidates, layer_inputs)
        labels = kmeans_partition(features, counts[j], seed=seed)
        groups = []
        for label in sorted(set(int(x) for x in labels)):
            members = sorted(candidates[r] for r in range(len(candidates)) if labels[r] == label)
            groups.append(Group(dominant_id=_by_importance(members, scores.layer(j))[0], member_ids=members))
        layers.append(sorted(groups, key=lambda g: (-float(scores.layer(j)[g.dominant_id]), g.dominant_id)))
        logging.debug(f"Layer {j}: k-means grouped {len(candidates)} candidates into {len(groups)} groups")
    return GroupAssignment(layers=layers, group_size_target=0, method='kmeans')
