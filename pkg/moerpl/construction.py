import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from moerpl import moe_model, numerics
from moerpl.errors import ContractViolation, PreconditionError
from moerpl.moe_model import LowRankAdapter, ReplacedExpert, SharedBase


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-21

"""Hierarchical expert construction.

Each group of replaced experts gets a shared base, the G-weighted average of its members
(W_share = sum G_i W_i / sum G_i); each replaced expert gets a rank-r adapter b @ a per
weight matrix. Expert compression ratio per weight matrix shape (n, m):

    rho = 1 - ((N - N' + M) n m + N' r (n + m)) / (N n m)
"""

REPLACE_MODES = ('annealed', 'shared_single', 'no_base', 'lora')


@dataclass
class LayerCompression:
    layer: int
    n_experts: int
    n_candidates: int
    n_groups: int
    shapes: list
    rank: int
    expert_param_count_before: int
    expert_param_count_after: int
    rho: float


@dataclass
class CompressionReport:
    layers: list
    mode: str = 'annealed'
    expert_param_count_before: int = 0
    expert_param_count_after: int = 0
    rho: float = 0.0

    def to_dict(self):
        data = asdict(self)
        for layer in data['layers']:
            layer['shapes'] = [list(s) for s in layer['shapes']]
        return data

    def to_frame(self):
        rows = []
        for layer in self.layers:
            row = asdict(layer)
            row['shapes'] = ';'.join(f"{n}x{m}" for n, m in layer.shapes)
            rows.append(row)
        rows.append({'layer': 'total', 'expert_param_count_before': self.expert_param_count_before,
                     'expert_param_count_after': self.expert_param_count_after, 'rho': self.rho})
        return pd.DataFrame(rows)

    def csv_row(self):
        counts = [layer.n_candidates for layer in self.layers]
        groups = [layer.n_groups for layer in self.layers]
        return pd.DataFrame([{'mode': self.mode, 'rho': self.rho,
                              'before': self.expert_param_count_before,
                              'after': self.expert_param_count_after,
                              'candidates': '/'.join(map(str, counts)),
                              'groups': '/'.join(map(str, groups))}])


# G-weighted average of the group's weights; uniform weights when every score is zero.
def build_shared_base(members, scores, group_id=0):
    ids = sorted(members)
    if not ids:
        raise PreconditionError("A shared base needs at least one member")
    weights = np.array([float(scores[i]) for i in ids], dtype=np.float64)
    if weights.sum() <= 0.0:
        weights = np.ones(len(ids), dtype=np.float64)
    dtype = members[ids[0]].w_in.dtype
    if len(ids) == 1:
        only = members[ids[0]]
        return SharedBase(w_in=only.w_in.copy(), w_out=only.w_out.copy(), member_ids=ids, group_id=group_id)
    averaged = {}
    for which in ('w_in', 'w_out'):
        acc = np.zeros(getattr(members[ids[0]], which).shape, dtype=np.float64)
        for w, i in zip(weights, ids):
            acc += w * getattr(members[i], which).astype(np.float64)
        averaged[which] = (acc / weights.sum()).astype(dtype)
    return SharedBase(w_in=averaged['w_in'], w_out=averaged['w_out'], member_ids=ids, group_id=group_id)


# a ~ N(0, 1/r), b = 0, so b @ a starts at zero.
def init_adapter(n, m, r, rng, dtype=np.float32):
    if not 1 <= r <= min(n, m):
        raise PreconditionError(f"Adapter rank {r} outside [1, min({n}, {m})]")
    a = numerics.gaussian(rng, (r, m), r ** -0.5, dtype)
    b = np.zeros((n, r), dtype=dtype)
    return LowRankAdapter(a=a, b=b)


def _as_shapes(dims):
    if len(dims) == 2 and all(isinstance(d, (int, np.integer)) for d in dims):
        return [tuple(int(d) for d in dims)]
    return [tuple(int(d) for d in s) for s in dims]


def expert_param_counts(dims, n_experts, n_candidates, n_groups, rank):
    if not 0 <= n_groups <= n_candidates <= n_experts:
        raise PreconditionError(f"Need M <= N' <= N, got M={n_groups}, N'={n_candidates}, N={n_experts}")
    if rank < 0:
        raise PreconditionError(f"Rank must be >= 0, got {rank}")
    shapes = _as_shapes(dims)
    dense = sum(n * m for n, m in shapes)
    low_rank = sum(n + m for n, m in shapes)
    before = n_experts * dense
    after = (n_experts - n_candidates + n_groups) * dense + n_candidates * rank * low_rank
    return before, after


def compression_ratio(dims, n_experts, n_candidates, n_groups, rank):
    before, after = expert_param_counts(dims, n_experts, n_candidates, n_groups, rank)
    return 1.0 - after / before


def expert_shapes(hyper):
    return [(hyper.d_model, hyper.d_hidden), (hyper.d_hidden, hyper.d_model)]


# Per-layer ratios, aggregated over layers by parameter count.
def compression_report(hyper, candidate_counts, group_counts, rank, mode='annealed'):
    shapes = expert_shapes(hyper)
    layers = []
    for j, (n_cand, n_groups) in enumerate(zip(candidate_counts, group_counts)):
        before, after = expert_param_counts(shapes, hyper.n_experts, n_cand, n_groups, rank)
        layers.append(LayerCompression(layer=j, n_experts=hyper.n_experts, n_candidates=n_cand,
                                       n_groups=n_groups, shapes=shapes, rank=rank,
                                       expert_param_count_before=before, expert_param_count_after=after,
                                       rho=1.0 - after / before))
    before = sum(layer.expert_param_count_before for layer in layers)
    after = sum(layer.expert_param_count_after for layer in layers)
    rho = 1.0 - after / before if before else 0.0
    return CompressionReport(layers=layers, mode=mode, expert_param_count_before=before,
                             expert_param_count_after=after, rho=rho)


def plan_ratio(hyper, plan, groups, rank, mode='annealed'):
    counts = plan.counts
    if mode == 'no_base':
        group_counts = [0] * len(counts)
    else:
        group_counts = groups.group_counts
    return compression_report(hyper, counts, group_counts, rank, mode=mode)


# Walk serialized tensors and count the expert parameters that survive inference.
def count_expert_parameters(tensors):
    total = 0
    for name, value in tensors.items():
        parts = name.split('.')
        if len(parts) > 2 and parts[0] == 'layers' and parts[2] in ('experts', 'bases', 'adapters'):
            total += int(np.asarray(value).size)
    return total


def _check_partition(plan, groups, n_layers):
    if len(plan.layers) != n_layers:
        raise ContractViolation(f"Plan covers {len(plan.layers)} layers, model has {n_layers}")
    if groups is None or len(groups.layers) != n_layers:
        raise ContractViolation("Group assignment does not cover every layer")
    for j, layer in enumerate(plan.layers):
        seen = []
        for group in groups.layers[j]:
            if group.dominant_id not in group.member_ids:
                raise ContractViolation(f"Layer {j}: dominant {group.dominant_id} outside its group")
            seen.extend(group.member_ids)
        if len(seen) != len(set(seen)) or set(seen) != set(layer.candidate_ids):
            raise ContractViolation(f"Layer {j}: groups do not partition the candidates",
                                    candidates=sorted(layer.candidate_ids), grouped=sorted(seen))


def assemble_compressed_model(model, plan, groups, scores, rank, attach_retained_adapters=True,
                              seed=0, mode='annealed'):
    if mode not in REPLACE_MODES:
        raise ContractViolation(f"Unknown replace mode '{mode}'", allowed=list(REPLACE_MODES))
    hyper = model.hyper
    if mode == 'no_base':
        if len(plan.layers) != len(model.layers):
            raise ContractViolation(f"Plan covers {len(plan.layers)} layers, model has {len(model.layers)}")
    else:
        _check_partition(plan, groups, len(model.layers))
    compressed = moe_model.clone_model(model)
    compressed.beta = 1.0
    rng = numerics.make_rng(seed, numerics.STREAM_ADAPTER)
    dt = hyper.dtype

    def adapter_pair():
        return (init_adapter(hyper.d_model, hyper.d_hidden, rank, rng, dt),
                init_adapter(hyper.d_hidden, hyper.d_model, rank, rng, dt))

    for j, layer in enumerate(compressed.layers):
        if layer.is_compressed:
            raise ContractViolation(f"Layer {j} is already compressed")
        group_of = {}
        if mode != 'no_base':
            for g, group in enumerate(groups.layers[j]):
                members = {i: layer.experts[i] for i in group.member_ids}
                layer.bases[g] = build_shared_base(members, scores.layer(j), group_id=g)
                for i in group.member_ids:
                    group_of[i] = g
        for i in sorted(plan.layers[j].candidate_ids):
            layer.originals[i] = layer.experts.pop(i)
            ad_in, ad_out = adapter_pair()
            layer.replaced[i] = ReplacedExpert(group_id=group_of.get(i), adapter_in=ad_in, adapter_out=ad_out)
        if attach_retained_adapters:
            for i in sorted(layer.experts):
                layer.retained_adapters[i] = adapter_pair()

    report = plan_ratio(hyper, plan, groups, rank, mode=mode)
    logging.info(f"Assembled compressed model ({mode}): candidates {plan.counts}, rho={report.rho:.4f}")
    return compressed, report


def drop_originals(model):
    if any(layer.originals for layer in model.layers) and model.beta != 0.0:
        raise ContractViolation(f"Originals are still in use at beta={model.beta}")
    for layer in model.layers:
        layer.originals.clear()
    return model


# Fold retained-expert adapters into their dense weights: w <- w + b @ a.
def merge_retained_adapters(model):
    for layer in model.layers:
        for i in sorted(layer.retained_adapters):
            ad_in, ad_out = layer.retained_adapters[i]
            expert = layer.experts[i]
            expert.w_in = expert.w_in + ad_in.product()
            expert.w_out = expert.w_out + ad_out.product()
        layer.retained_adapters.clear()
    return model


def finalize_compressed_model(model):
    drop_originals(model)
    merge_retained_adapters(model)
    return model
