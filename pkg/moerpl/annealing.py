import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from moerpl import autodiff as ad
from moerpl import construction, moe_model, numerics, tasks
from moerpl.errors import ConfigError, NonFiniteLossError, PreconditionError


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-22

"""Annealed expert replacement.

During recovery fine-tuning every replaced expert uses

    W* = beta * W + (1 - beta) * W_share + b @ a

with beta decaying from 1 to 0 by step end_ratio * T. Only adapters are trained;
originals, bases and routers stay frozen. An end ratio of 0 swaps the originals
out at step 0 (direct replacement)."""

SCHEDULE_KINDS = ('linear', 'exponential')

# Recovery batches are drawn far away from pretraining and calibration indices.
FINETUNE_BATCH_OFFSET = 1_000_000


def _check_step(t):
    if t < 0:
        raise PreconditionError(f"Step must be >= 0, got {t}")


def beta_linear(t, total_steps, end_ratio):
    _check_step(t)
    horizon = end_ratio * total_steps
    if end_ratio <= 0.0 or horizon <= 0.0:
        return 0.0
    return max(1.0 - t / horizon, 0.0)


def beta_exponential(t, total_steps, end_ratio, gamma):
    _check_step(t)
    if gamma <= 0.0:
        raise PreconditionError(f"gamma must be > 0, got {gamma}")
    horizon = end_ratio * total_steps
    if end_ratio <= 0.0 or horizon <= 0.0:
        return 0.0
    tau = t / horizon
    if tau >= 1.0:
        return 0.0
    floor = math.exp(-gamma)
    return max((math.exp(-gamma * tau) - floor) / (1.0 - floor), 0.0)


@dataclass(frozen=True)
class AnnealSchedule:
    kind: str = 'linear'
    end_ratio: float = 0.2
    total_steps: int = 2000
    gamma: float = 3.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"Unknown schedule kind '{self.kind}'", allowed=list(SCHEDULE_KINDS))
        if not 0.0 <= self.end_ratio <= 1.0:
            raise ConfigError(f"end_ratio must lie in [0, 1], got {self.end_ratio}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")

    def beta(self, t):
        if self.kind == 'exponential':
            return beta_exponential(t, self.total_steps, self.end_ratio, self.gamma)
        return beta_linear(t, self.total_steps, self.end_ratio)

    @property
    def anneal_end_step(self):
        return math.ceil(self.end_ratio * self.total_steps)


@dataclass
class AnnealState:
    step: int = 0
    beta: float = 1.0

    def advance(self, schedule):
        self.beta = schedule.beta(self.step)
        return self.beta


@dataclass
class LossTrace:
    losses: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    swap_step: object = None
    anneal_end_step: int = 0
    baseline_loss: object = None

    def __len__(self):
        return len(self.losses)

    def append(self, loss, beta):
        self.losses.append(float(loss))
        self.betas.append(float(beta))

    def to_frame(self):
        return pd.DataFrame({'step': np.arange(len(self.losses), dtype=np.int64),
                             'loss': self.losses, 'beta': self.betas},
                            columns=['step', 'loss', 'beta'])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)
        logging.info(f"Loss trace ({len(self)} steps) written to {path}")


def _constant_matrix(values):
    return ad.constant(numerics.as_matrix(values, dtype=np.asarray(values).dtype))


# W* for plain arrays; W may be None once beta is 0.
def effective_weight(original, base, adapter, beta):
    if not 0.0 <= beta <= 1.0:
        raise PreconditionError(f"beta must lie in [0, 1], got {beta}")
    node = moe_model.effective_weight_node(
        None if original is None else _constant_matrix(original),
        None if base is None else _constant_matrix(base),
        _constant_matrix(adapter.b), _constant_matrix(adapter.a), beta)
    return node.value


def _optimizer_from(optim):
    if isinstance(optim, moe_model.AdamWState):
        return optim
    return moe_model.make_optimizer(lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2,
                                    eps=optim.eps, weight_decay=optim.weight_decay)


# Recovery fine-tuning; beta is set before every forward pass.
def finetune(model, spec, schedule, optim, include_retained=True, batch_offset=FINETUNE_BATCH_OFFSET,
             log_every=100, finalize=True, baseline_loss=None):
    trainable = moe_model.adapter_parameter_names(model, include_retained=include_retained)
    optimizer = _optimizer_from(optim)
    state = AnnealState()
    trace = LossTrace(swap_step=0 if schedule.end_ratio == 0.0 else None,
                      anneal_end_step=schedule.anneal_end_step, baseline_loss=baseline_loss)
    logging.info(f"Fine-tuning {len(trainable)} adapter tensors for {schedule.total_steps} steps "
                 f"({schedule.kind}, end_ratio={schedule.end_ratio})")
    for t in range(schedule.total_steps):
        state.step = t
        model.beta = state.advance(schedule)
        batch = tasks.generate(spec, 'train', batch_offset + t, precision=model.hyper.precision)
        try:
            loss = moe_model.train_step(model, batch, optimizer, trainable, with_aux=False)
        except NonFiniteLossError as e:
            raise NonFiniteLossError(e.message, trace=trace, step=t, beta=model.beta) from e
        trace.append(loss, model.beta)
        if log_every and t % log_every == 0:
            logging.info(f"Finetune step {t}: loss={loss:.6f} beta={model.beta:.4f}")
    if schedule.total_steps == 0:
        logging.warning("Zero fine-tuning steps, model left in its assembled state")
        return model, trace
    model.beta = 0.0
    if finalize:
        construction.finalize_compressed_model(model)
    return model, trace
