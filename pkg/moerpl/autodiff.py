from dataclasses import dataclass
import logging

import numpy as np

from moerpl import numerics
from moerpl.errors import ContractViolation, PreconditionError


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-15

"""Reverse-mode differentiation over the small op set the toy MoE model needs.

A forward pass records Nodes; ``backward`` walks them in reverse topological order and
returns gradients for leaves marked trainable. A recorded graph belongs to the thread
that built it."""


class Node:
    __slots__ = ('value', 'parents', 'backward_fn', 'name', 'trainable', 'requires_grad')

    def __init__(self, value, parents=(), backward_fn=None, name=None, trainable=False):
        self.value = value
        self.name = name
        self.trainable = trainable
        self.requires_grad = trainable or any(p.requires_grad for p in parents)
        # Drop the closure when nothing upstream needs a gradient.
        self.parents = parents if self.requires_grad else ()
        self.backward_fn = backward_fn if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(name={self.name!r}, shape={self.value.shape}, trainable={self.trainable})"


def leaf(value, name=None, trainable=False):
    return Node(value, name=name, trainable=trainable)


def constant(value):
    return Node(value)


def _grad_if(node, fn):
    return fn() if node.requires_grad else None


def add(a, b):
    if a.shape != b.shape:
        raise ContractViolation(f"Cannot add {a.shape} and {b.shape}")
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def scale(a, c):
    return Node(a.value * a.value.dtype.type(c), (a,), lambda g: (g * a.value.dtype.type(c),))


def matmul(a, b):
    value = numerics.matmul(a.value, b.value)

    def backward_fn(g):
        return (_grad_if(a, lambda: g @ b.value.T), _grad_if(b, lambda: a.value.T @ g))

    return Node(value, (a, b), backward_fn)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# SiLU: x * sigmoid(x).
def silu(a):
    s = _sigmoid(a.value)
    value = a.value * s
    return Node(value, (a,), lambda g: (g * (s * (1.0 + a.value * (1.0 - s))),))


def softmax_rows(a):
    y = numerics.softmax_rows(a.value)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Node(y, (a,), backward_fn)


# Gather the k selected gates per row and renormalize them to sum to one.
def topk_renorm(gates, indices):
    selected = np.take_along_axis(gates.value, indices, axis=1)
    total = selected.sum(axis=1, keepdims=True)
    r = selected / total

    def backward_fn(g):
        g_sel = (g - (g * r).sum(axis=1, keepdims=True)) / total
        out = np.zeros_like(gates.value)
        np.put_along_axis(out, indices, g_sel, axis=1)
        return (out,)

    return Node(r, (gates,), backward_fn)


def take_rows(a, rows):
    def backward_fn(g):
        out = np.zeros_like(a.value)
        np.add.at(out, rows, g)
        return (out,)

    return Node(a.value[rows], (a,), backward_fn)


# Pick a[rows[i], cols[i]] as a column vector.
def take_entries(a, rows, cols):
    def backward_fn(g):
        out = np.zeros_like(a.value)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return Node(a.value[rows, cols].reshape(-1, 1), (a,), backward_fn)


# Multiply every row of a by the matching entry of the column vector w.
def scale_rows(a, w):
    if w.shape != (a.shape[0], 1):
        raise ContractViolation(f"Row weights {w.shape} do not match {a.shape}")

    def backward_fn(g):
        return (_grad_if(a, lambda: g * w.value),
                _grad_if(w, lambda: (g * a.value).sum(axis=1, keepdims=True)))

    return Node(a.value * w.value, (a, w), backward_fn)


def scatter_rows(a, rows, n_rows):
    out = np.zeros((n_rows, a.shape[1]), dtype=a.value.dtype)
    np.add.at(out, rows, a.value)
    return Node(out, (a,), lambda g: (g[rows],))


def sum_all(a):
    value = a.value.sum().reshape(1, 1)
    return Node(value, (a,), lambda g: (np.full_like(a.value, g[0, 0]),))


def half_sum_squares(a):
    value = (0.5 * (a.value * a.value).sum()).reshape(1, 1)
    return Node(value, (a,), lambda g: (a.value * g[0, 0],))


def column_mean(a):
    n = a.shape[0]
    value = a.value.mean(axis=0, keepdims=True)
    return Node(value, (a,), lambda g: (np.repeat(g / n, n, axis=0),))


# sum(a * c) for a constant matrix c.
def dot_const(a, c):
    value = (a.value * c).sum().reshape(1, 1)
    return Node(value, (a,), lambda g: (c * g[0, 0],))


def mse(pred, target):
    if pred.shape != target.shape:
        raise ContractViolation(f"Prediction {pred.shape} and target {target.shape} differ")
    diff = pred.value - target
    value = (diff * diff).mean().reshape(1, 1)
    return Node(value, (pred,), lambda g: (diff * (2.0 * g[0, 0] / diff.size),))


def cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ContractViolation(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    probs = numerics.softmax_rows(logits.value)
    rows = np.arange(labels.shape[0])
    picked = np.maximum(probs[rows, labels], np.finfo(probs.dtype).tiny)
    value = (-np.log(picked)).mean().reshape(1, 1)

    def backward_fn(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g[0, 0] / labels.shape[0]),)

    return Node(value.astype(logits.value.dtype), (logits,), backward_fn)


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


# Reverse-mode gradients of a scalar loss, keyed by trainable leaf name.
def backward(loss):
    if loss.value.shape != (1, 1):
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    result = {}
    if not loss.requires_grad:
        return result
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.trainable and node.name is not None:
            if node.name in result:
                result[node.name] = result[node.name] + g
            else:
                result[node.name] = g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


@dataclass
class GradReport:
    max_relative_error: float
    worst_parameter_id: str
    analytic: float
    numeric: float
    samples: int


def relative_error(analytic, numeric, eps_abs=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), eps_abs)


# Compare backward() against central differences on randomly sampled scalars.
def grad_check(model_parameters, loss_fn, samples, h=1e-5, seed=0):
    if samples < 1:
        raise PreconditionError("grad_check needs at least one sample", samples=samples)
    if not 0.0 < h <= 1e-2:
        raise PreconditionError(f"Step h={h} outside (0, 1e-2]")
    for name, p in model_parameters.items():
        if p.dtype != np.float64:
            raise PreconditionError(f"grad_check needs double precision, '{name}' is {p.dtype}")

    grads = backward(loss_fn())
    names = [n for n in model_parameters if n in grads]
    if not names:
        raise PreconditionError("loss_fn produced no gradient for any supplied parameter")
    rng = numerics.make_rng(seed, numerics.STREAM_GRADCHECK)
    names = [names[i] for i in rng.permutation(len(names))]

    report = GradReport(0.0, '', 0.0, 0.0, samples)
    for j in range(samples):
        name = names[j % len(names)]
        p = model_parameters[name]
        idx = tuple(int(rng.integers(0, s)) for s in p.shape)
        original = p[idx]
        p[idx] = original + h
        f_plus = float(loss_fn().value[0, 0])
        p[idx] = original - h
        f_minus = float(loss_fn().value[0, 0])
        p[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * h)
        analytic = float(grads[name][idx])
        err = relative_error(analytic, numeric)
        if err >= report.max_relative_error:
            report = GradReport(err, f"{name}{list(idx)}", analytic, numeric, samples)
    logging.info(f"grad_check over {samples} samples: max relative error {report.max_relative_error:.3e} "
                 f"at {report.worst_parameter_id}")
    return report
