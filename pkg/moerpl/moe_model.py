import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from moerpl import autodiff as ad
from moerpl import numerics
from moerpl.errors import ConfigError, ContractViolation, NonFiniteLossError


# __Author__: pablo-chacon
# __Version__: 2.0.1
# __Date__: 2026-09-16

"""Toy Mixture-of-Experts network.

Each MoE layer holds a router (d_model x N) and N two-matrix SiLU experts around a
residual connection. Routing is a full softmax followed by top-k with renormalization.
A layer may also carry the compressed structure built by ``construction``: frozen
originals, shared bases, per-expert low-rank adapters and retained-expert adapters."""

TASK_KINDS = ('regression', 'classification')


@dataclass
class ExpertParams:
    w_in: np.ndarray
    w_out: np.ndarray


@dataclass
class RouterParams:
    w_router: np.ndarray


@dataclass
class GatingOutput:
    logits: np.ndarray
    dense_gates: np.ndarray
    active_indices: np.ndarray
    active_gates: np.ndarray


@dataclass
class LowRankAdapter:
    a: np.ndarray
    b: np.ndarray

    @property
    def rank(self):
        return self.a.shape[0]

    def product(self):
        return self.b @ self.a


@dataclass
class SharedBase:
    w_in: np.ndarray
    w_out: np.ndarray
    member_ids: list
    group_id: int


@dataclass
class ReplacedExpert:
    group_id: object
    adapter_in: LowRankAdapter
    adapter_out: LowRankAdapter


@dataclass
class MoELayer:
    router: RouterParams
    experts: dict
    # Compressed structure, empty on an uncompressed layer.
    originals: dict = field(default_factory=dict)
    replaced: dict = field(default_factory=dict)
    bases: dict = field(default_factory=dict)
    retained_adapters: dict = field(default_factory=dict)

    @property
    def n_experts(self):
        return self.router.w_router.shape[1]

    @property
    def is_compressed(self):
        return bool(self.replaced or self.retained_adapters)


@dataclass
class ModelHyper:
    d_in: int
    d_model: int
    d_hidden: int
    n_experts: int
    top_k: int
    n_layers: int
    d_out: int
    task_kind: str = 'regression'
    aux_loss_coeff: float = 0.0
    precision: str = 'single'

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if min(self.d_in, self.d_model, self.d_hidden, self.d_out) < 1:
            raise ConfigError("All model dimensions must be positive")
        if self.task_kind not in TASK_KINDS:
            raise ConfigError(f"Unknown task kind '{self.task_kind}'", allowed=list(TASK_KINDS))
        numerics.dtype_for(self.precision)

    @property
    def dtype(self):
        return numerics.dtype_for(self.precision)


@dataclass
class MoEModel:
    hyper: ModelHyper
    input_proj: np.ndarray
    layers: list
    output_head: np.ndarray
    beta: float = 1.0


@dataclass
class ForwardPass:
    predictions: ad.Node
    gatings: list
    layer_inputs: list
    aux_loss: object = None


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


# Initialize a model with seeded Gaussian weights.
def init_model(hyper, seed):
    rng = numerics.make_rng(seed, numerics.STREAM_INIT)
    dt = hyper.dtype
    input_proj = numerics.gaussian(rng, (hyper.d_in, hyper.d_model), hyper.d_in ** -0.5, dt)
    layers = []
    for _ in range(hyper.n_layers):
        router = RouterParams(numerics.gaussian(rng, (hyper.d_model, hyper.n_experts),
                                                hyper.d_model ** -0.5, dt))
        experts = {}
        for i in range(hyper.n_experts):
            experts[i] = ExpertParams(
                w_in=numerics.gaussian(rng, (hyper.d_model, hyper.d_hidden), hyper.d_model ** -0.5, dt),
                w_out=numerics.gaussian(rng, (hyper.d_hidden, hyper.d_model), hyper.d_hidden ** -0.5, dt),
            )
        layers.append(MoELayer(router=router, experts=experts))
    output_head = numerics.gaussian(rng, (hyper.d_model, hyper.d_out), hyper.d_model ** -0.5, dt)
    return MoEModel(hyper=hyper, input_proj=input_proj, layers=layers, output_head=output_head)


def clone_model(model):
    return copy.deepcopy(model)


def layer_prefix(j):
    return f"layers.{j}"


# All parameter arrays by id, in a fixed order.
def named_parameters(model):
    params = {'input_proj': model.input_proj}
    for j, layer in enumerate(model.layers):
        pre = layer_prefix(j)
        params[f"{pre}.router"] = layer.router.w_router
        for i in sorted(layer.experts):
            params[f"{pre}.experts.{i}.w_in"] = layer.experts[i].w_in
            params[f"{pre}.experts.{i}.w_out"] = layer.experts[i].w_out
        for i in sorted(layer.originals):
            params[f"{pre}.originals.{i}.w_in"] = layer.originals[i].w_in
            params[f"{pre}.originals.{i}.w_out"] = layer.originals[i].w_out
        for g in sorted(layer.bases):
            params[f"{pre}.bases.{g}.w_in"] = layer.bases[g].w_in
            params[f"{pre}.bases.{g}.w_out"] = layer.bases[g].w_out
        for i in sorted(layer.replaced):
            slot = layer.replaced[i]
            for which, adapter in (('w_in', slot.adapter_in), ('w_out', slot.adapter_out)):
                params[f"{pre}.adapters.{i}.{which}.a"] = adapter.a
                params[f"{pre}.adapters.{i}.{which}.b"] = adapter.b
        for i in sorted(layer.retained_adapters):
            for which, adapter in zip(('w_in', 'w_out'), layer.retained_adapters[i]):
                params[f"{pre}.retained_adapters.{i}.{which}.a"] = adapter.a
                params[f"{pre}.retained_adapters.{i}.{which}.b"] = adapter.b
    params['output_head'] = model.output_head
    return params


def adapter_parameter_names(model, include_retained=True):
    names = []
    for name in named_parameters(model):
        if '.adapters.' in name or (include_retained and '.retained_adapters.' in name):
            names.append(name)
    return names


# Effective weight as a graph: beta * W + (1 - beta) * W_share + b @ a.
def effective_weight_node(original, base, b, a, beta):
    delta = ad.matmul(b, a)
    combined = None
    if beta > 0.0:
        if original is None:
            raise ContractViolation(f"beta={beta} needs the original expert weights, which were dropped")
        combined = ad.scale(original, beta)
    if base is not None and beta < 1.0:
        term = ad.scale(base, 1.0 - beta)
        combined = term if combined is None else ad.add(combined, term)
    return delta if combined is None else ad.add(combined, delta)


def _expert_weights(layer, j, i, beta, param):
    pre = layer_prefix(j)
    if i in layer.experts:
        expert = layer.experts[i]
        w_in = param(f"{pre}.experts.{i}.w_in", expert.w_in)
        w_out = param(f"{pre}.experts.{i}.w_out", expert.w_out)
        if i in layer.retained_adapters:
            ad_in, ad_out = layer.retained_adapters[i]
            w_in = ad.add(w_in, ad.matmul(param(f"{pre}.retained_adapters.{i}.w_in.b", ad_in.b),
                                          param(f"{pre}.retained_adapters.{i}.w_in.a", ad_in.a)))
            w_out = ad.add(w_out, ad.matmul(param(f"{pre}.retained_adapters.{i}.w_out.b", ad_out.b),
                                            param(f"{pre}.retained_adapters.{i}.w_out.a", ad_out.a)))
        return w_in, w_out
    if i not in layer.replaced:
        raise ContractViolation(f"Layer {j} has no weights for expert {i}")
    slot = layer.replaced[i]
    original = layer.originals.get(i)
    base = layer.bases.get(slot.group_id) if slot.group_id is not None else None
    weights = []
    for which, adapter in (('w_in', slot.adapter_in), ('w_out', slot.adapter_out)):
        orig_node = None
        if original is not None:
            orig_node = param(f"{pre}.originals.{i}.{which}", getattr(original, which))
        base_node = None
        if base is not None:
            base_node = param(f"{pre}.bases.{slot.group_id}.{which}", getattr(base, which))
        weights.append(effective_weight_node(
            orig_node, base_node,
            param(f"{pre}.adapters.{i}.{which}.b", adapter.b),
            param(f"{pre}.adapters.{i}.{which}.a", adapter.a),
            beta))
    return weights[0], weights[1]


def _constant_param(name, value):
    return ad.constant(value)


# Effective (w_in, w_out) arrays of expert i under the current beta.
def expert_weight_arrays(layer, i, beta=1.0, j=0):
    w_in, w_out = _expert_weights(layer, j, i, beta, _constant_param)
    return w_in.value, w_out.value


def route(layer, x, top_k):
    if x.shape[1] != layer.router.w_router.shape[0]:
        raise ContractViolation(f"Input width {x.shape[1]} does not match router {layer.router.w_router.shape}")
    if top_k > layer.n_experts:
        raise ConfigError(f"top_k={top_k} exceeds the {layer.n_experts} experts of the layer")
    logits = numerics.matmul(x, layer.router.w_router)
    dense = numerics.softmax_rows(logits)
    idx = numerics.topk_indices(dense, top_k)
    selected = np.take_along_axis(dense, idx, axis=1)
    return GatingOutput(logits=logits, dense_gates=dense, active_indices=idx,
                        active_gates=selected / selected.sum(axis=1, keepdims=True))


def _layer_graph(layer, j, x, top_k, beta, param, idx=None):
    router = param(f"{layer_prefix(j)}.router", layer.router.w_router)
    logits = ad.matmul(x, router)
    dense = ad.softmax_rows(logits)
    if idx is None:
        idx = numerics.topk_indices(dense.value, top_k)
    active = ad.topk_renorm(dense, idx)
    gating = GatingOutput(logits=logits.value, dense_gates=dense.value,
                          active_indices=idx, active_gates=active.value)
    n_tokens = x.shape[0]
    y = x
    for i in range(layer.n_experts):
        rows, slots = np.nonzero(idx == i)
        if rows.size == 0:
            continue
        w_in, w_out = _expert_weights(layer, j, i, beta, param)
        hidden = ad.silu(ad.matmul(ad.take_rows(x, rows), w_in))
        out = ad.scale_rows(ad.matmul(hidden, w_out), ad.take_entries(active, rows, slots))
        y = ad.add(y, ad.scatter_rows(out, rows, n_tokens))
    return y, gating, dense


def _load_balance(dense, idx, n_experts):
    counts = np.bincount(idx.reshape(-1), minlength=n_experts).astype(dense.value.dtype)
    fractions = (counts / idx.size).reshape(1, -1)
    return ad.scale(ad.dot_const(ad.column_mean(dense), fractions), float(n_experts))


# Record the forward graph; parameters named in `trainable` become trainable leaves.
# fixed_routing, one index array per layer, replaces the top-k choice.
def forward_graph(model, inputs, trainable=frozenset(), with_aux=False, fixed_routing=None):
    cache = {}

    def param(name, value):
        node = cache.get(name)
        if node is None:
            node = ad.leaf(value, name=name, trainable=name in trainable)
            cache[name] = node
        return node

    h = ad.matmul(ad.constant(inputs), param('input_proj', model.input_proj))
    gatings, layer_inputs = [], []
    aux = None
    for j, layer in enumerate(model.layers):
        layer_inputs.append(h.value)
        idx = None if fixed_routing is None else fixed_routing[j]
        h, gating, dense = _layer_graph(layer, j, h, model.hyper.top_k, model.beta, param, idx)
        gatings.append(gating)
        if with_aux:
            term = _load_balance(dense, gating.active_indices, layer.n_experts)
            aux = term if aux is None else ad.add(aux, term)
    pred = ad.matmul(h, param('output_head', model.output_head))
    if aux is not None:
        aux = ad.scale(aux, 1.0 / len(model.layers))
    return ForwardPass(predictions=pred, gatings=gatings, layer_inputs=layer_inputs, aux_loss=aux)


def layer_forward(layer, x, top_k, beta=1.0, j=0):
    y, _, _ = _layer_graph(layer, j, ad.constant(x), top_k, beta, _constant_param)
    return y.value


# Dense formulation: every expert on every token, gates zeroed outside the active set.
def layer_forward_dense(layer, x, top_k, beta=1.0, j=0):
    gating = route(layer, x, top_k)
    gates = np.zeros_like(gating.dense_gates)
    np.put_along_axis(gates, gating.active_indices, gating.active_gates, axis=1)
    y = x.copy()
    for i in range(layer.n_experts):
        w_in, w_out = expert_weight_arrays(layer, i, beta, j)
        out = ad.silu(ad.constant(x @ w_in)).value @ w_out
        y = y + gates[:, i:i + 1] * out
    return y


def model_forward(model, batch_inputs):
    return forward_graph(model, batch_inputs).predictions.value


# Per-layer inputs and gating of a batch, without keeping the graph.
def trace_routing(model, batch_inputs):
    fwd = forward_graph(model, batch_inputs)
    return fwd.layer_inputs, fwd.gatings


def loss_from_predictions(model, predictions, batch):
    if model.hyper.task_kind == 'classification':
        return ad.cross_entropy(predictions, batch.targets)
    return ad.mse(predictions, batch.targets)


def batch_loss(model, batch, trainable=frozenset(), with_aux=False, fixed_routing=None):
    fwd = forward_graph(model, batch.inputs, trainable, with_aux=with_aux, fixed_routing=fixed_routing)
    loss = loss_from_predictions(model, fwd.predictions, batch)
    if fwd.aux_loss is not None and model.hyper.aux_loss_coeff > 0.0:
        loss = ad.add(loss, ad.scale(fwd.aux_loss, model.hyper.aux_loss_coeff))
    return loss, fwd


# Token-weighted eval loss and, for classification, accuracy.
def evaluate(model, batches):
    total_loss, total_correct, total_tokens = 0.0, 0, 0
    for batch in batches:
        loss, fwd = batch_loss(model, batch)
        n = batch.inputs.shape[0]
        total_loss += float(loss.value[0, 0]) * n
        total_tokens += n
        if model.hyper.task_kind == 'classification':
            total_correct += int((fwd.predictions.value.argmax(axis=1) == batch.targets).sum())
    accuracy = total_correct / total_tokens if model.hyper.task_kind == 'classification' else None
    return total_loss / total_tokens, accuracy


def make_optimizer(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    return AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)


# Decoupled weight decay followed by the bias-corrected Adam update, in place.
def adamw_step(params, grads, state):
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        p = params[name]
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if state.weight_decay:
            p *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        m *= p.dtype.type(state.beta1)
        m += p.dtype.type(1.0 - state.beta1) * g
        v *= p.dtype.type(state.beta2)
        v += p.dtype.type(1.0 - state.beta2) * g * g
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)


# One forward/backward/AdamW step on the masked parameters; returns the loss before the update.
def train_step(model, batch, optimizer_state, trainable_mask, with_aux=None):
    trainable = frozenset(trainable_mask)
    if with_aux is None:
        with_aux = model.hyper.aux_loss_coeff > 0.0
    loss, _ = batch_loss(model, batch, trainable, with_aux=with_aux)
    value = float(loss.value[0, 0])
    if not np.isfinite(value):
        logging.error(f"Non-finite loss {value} at optimizer step {optimizer_state.step}")
        raise NonFiniteLossError(f"Loss became {value} at optimizer step {optimizer_state.step}",
                                 step=optimizer_state.step)
    if trainable:
        grads = ad.backward(loss)
        adamw_step(named_parameters(model), grads, optimizer_state)
    return value
