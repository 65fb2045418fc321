import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

from moerpl.annealing import SCHEDULE_KINDS
from moerpl.calibration import GATE_MODES, NORM_MODES
from moerpl.construction import REPLACE_MODES
from moerpl.errors import ConfigError
from moerpl.grouping import SIMILARITY_MODES
from moerpl.moe_model import ModelHyper
from moerpl.numerics import PRECISIONS
from moerpl.tasks import TaskSpec


# __Author__: pablo-chacon
# __Version__: 2.0.0
# __Date__: 2026-09-24

"""Experiment configuration.

A JSON file maps onto a tree of dataclasses; unknown keys and out-of-range values are
rejected. MOERPL_OUT_DIR supplies the output directory when the file does not."""

SELECTION_METHODS = ('adaptive', 'uniform', 'average')
GROUPING_METHODS = ('dominant', 'kmeans')
SWEEP_AXES = ('end_ratio', 'rank', 'group_size', 'selection_method', 'grouping_method',
              'calib_tokens', 'max_delta', 'schedule', 'replace_mode')


# Item type of each sweep axis.
AXIS_TYPES = {
    'end_ratio': 'number', 'max_delta': 'number',
    'rank': 'int', 'group_size': 'int', 'calib_tokens': 'int',
    'selection_method': 'str', 'grouping_method': 'str', 'schedule': 'str', 'replace_mode': 'str',
}


def _one_of(value, allowed, what):
    if value not in allowed:
        raise ConfigError(f"Unknown {what} '{value}'", allowed=list(allowed))


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _item_ok(value, kind):
    if kind == 'int':
        return _is_int(value)
    if kind == 'number':
        return _is_number(value)
    return isinstance(value, str)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_hidden: int = 64
    n_experts: int = 16
    top_k: int = 2
    n_layers: int = 4
    aux_loss_coeff: float = 0.0
    precision: str = 'single'

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if min(self.d_model, self.d_hidden) < 1:
            raise ConfigError("d_model and d_hidden must be positive")
        if self.aux_loss_coeff < 0:
            raise ConfigError(f"aux_loss_coeff must be >= 0, got {self.aux_loss_coeff}")
        _one_of(self.precision, PRECISIONS, 'precision')


@dataclass(frozen=True)
class CalibrationConfig:
    tokens: int = 2 ** 17
    batch_tokens: int = 4096
    gate_mode: str = 'post_topk'
    norm_mode: str = 'gates'

    def __post_init__(self):
        if self.tokens < 1 or self.batch_tokens < 1:
            raise ConfigError("Calibration tokens and batch_tokens must be positive")
        _one_of(self.gate_mode, GATE_MODES, 'gate score mode')
        _one_of(self.norm_mode, NORM_MODES, 'router norm mode')


@dataclass(frozen=True)
class SelectionConfig:
    method: str = 'adaptive'
    target_rho: float = 0.5
    tol: float = 0.02
    base_threshold: float = None
    alpha: float = 0.3
    max_delta: float = 0.2
    average_count: int = None
    max_candidates: int = None

    def __post_init__(self):
        _one_of(self.method, SELECTION_METHODS, 'selection method')
        if not 0.0 <= self.target_rho < 1.0:
            raise ConfigError(f"target_rho must lie in [0, 1), got {self.target_rho}")
        if self.tol <= 0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.base_threshold is not None and not 0.0 < self.base_threshold < 1.0:
            raise ConfigError(f"base_threshold must lie in (0, 1), got {self.base_threshold}")
        if self.max_delta < 0 or self.max_delta > 1:
            raise ConfigError(f"max_delta must lie in [0, 1], got {self.max_delta}")
        if self.average_count is not None and self.average_count < 0:
            raise ConfigError(f"average_count must be >= 0, got {self.average_count}")
        if self.max_candidates is not None and self.max_candidates < 0:
            raise ConfigError(f"max_candidates must be >= 0, got {self.max_candidates}")


@dataclass(frozen=True)
class GroupingConfig:
    method: str = 'dominant'
    group_size: int = 3
    similarity: str = 'router'

    def __post_init__(self):
        _one_of(self.method, GROUPING_METHODS, 'grouping method')
        _one_of(self.similarity, SIMILARITY_MODES, 'similarity mode')
        if self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {self.group_size}")


# Default rank 1 stands in for rank 16 on full-size experts: at 32x64 an adapter costs
# 0.047 * r of a dense expert, so rank 16 would leave rho = 0.5 out of reach.
@dataclass(frozen=True)
class ConstructionConfig:
    rank: int = 1
    replace_mode: str = 'annealed'
    train_retained_adapters: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        _one_of(self.replace_mode, REPLACE_MODES, 'replace mode')


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = 'linear'
    end_ratio: float = 0.2
    gamma: float = 3.0

    def __post_init__(self):
        _one_of(self.kind, SCHEDULE_KINDS, 'schedule kind')
        if not 0.0 <= self.end_ratio <= 1.0:
            raise ConfigError(f"end_ratio must lie in [0, 1], got {self.end_ratio}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    pretrain_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ConfigError("Learning rates must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay non-negative")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    pretrain_steps: int = 3000
    finetune_steps: int = 2000
    eval_batches: int = 32
    log_every: int = 100
    out_dir: str = 'runs/default'
    record_wall_time: bool = False

    def __post_init__(self):
        if not isinstance(self.seeds, list) or not all(_is_int(s) for s in self.seeds):
            raise ConfigError(f"run.seeds must be a list of integers, got {self.seeds!r}")
        if self.seed < 0 or any(s < 0 for s in self.seeds):
            raise ConfigError("Seeds must be non-negative")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.pretrain_steps < 0 or self.finetune_steps < 0:
            raise ConfigError("Step budgets must be >= 0")
        if self.eval_batches < 1:
            raise ConfigError(f"eval_batches must be >= 1, got {self.eval_batches}")
        if self.log_every < 0:
            raise ConfigError(f"log_every must be >= 0, got {self.log_every}")


def _default_sweep_values():
    return {
        'end_ratio': [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        'rank': [1, 2, 4],
        'group_size': [1, 2, 3, 4],
        'selection_method': ['adaptive', 'uniform', 'average'],
        'grouping_method': ['dominant', 'kmeans'],
        'calib_tokens': [2 ** 13, 2 ** 15, 2 ** 17, 2 ** 19],
        'max_delta': [0.0, 0.1, 0.2, 0.3],
        'schedule': ['linear', 'exponential:1.0', 'exponential:3.0', 'exponential:5.0'],
        'replace_mode': ['annealed', 'shared_single', 'no_base', 'lora'],
    }


@dataclass(frozen=True)
class SweepConfig:
    values: dict = field(default_factory=_default_sweep_values)

    def __post_init__(self):
        for axis, values in self.values.items():
            _one_of(axis, SWEEP_AXES, 'sweep axis')
            if not isinstance(values, list) or not values:
                raise ConfigError(f"Sweep axis '{axis}' needs a non-empty list of values")
            kind = AXIS_TYPES[axis]
            bad = [v for v in values if not _item_ok(v, kind)]
            if bad:
                raise ConfigError(f"Sweep axis '{axis}' takes {kind} values, got {bad!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    construction: ConstructionConfig = field(default_factory=ConstructionConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def _check_value(section, name, default, value):
    if value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) or name in ('average_count', 'max_candidates'):
        ok = _is_int(value)
    elif isinstance(default, float) or name == 'base_threshold':
        ok = _is_number(value)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{name} has the wrong type: {value!r}")
    return value


def _build_section(section, data):
    factory = SECTIONS[section]
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object")
    defaults = factory()
    known = {f.name for f in dataclasses.fields(defaults)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {unknown}", allowed=sorted(known))
    values = {name: _check_value(section, name, getattr(defaults, name), value)
              for name, value in data.items()}
    return dataclasses.replace(defaults, **values)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("Config must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config sections: {unknown}", allowed=sorted(SECTIONS))
    sections = {name: _build_section(name, section) for name, section in data.items()}
    return ExperimentConfig(**sections)


def load_config(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}")
    env_out = os.environ.get('MOERPL_OUT_DIR')
    if env_out and 'out_dir' not in data.get('run', {}):
        data.setdefault('run', {})['out_dir'] = env_out
    cfg = config_from_dict(data)
    logging.info(f"Loaded config {path}")
    return cfg


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def save_config(path, cfg):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + '\n')


# CLI overrides; None leaves the value as configured.
def apply_overrides(cfg, seed=None, target_rho=None, end_ratio=None, rank=None, out=None):
    if seed is not None:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=seed))
    if target_rho is not None:
        cfg = dataclasses.replace(cfg, selection=dataclasses.replace(cfg.selection, target_rho=target_rho))
    if end_ratio is not None:
        cfg = dataclasses.replace(cfg, schedule=dataclasses.replace(cfg.schedule, end_ratio=end_ratio))
    if rank is not None:
        cfg = dataclasses.replace(cfg, construction=dataclasses.replace(cfg.construction, rank=rank))
    if out is not None:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, out_dir=str(out)))
    return cfg


def model_hyper(cfg):
    m = cfg.model
    return ModelHyper(d_in=cfg.task.input_dim, d_model=m.d_model, d_hidden=m.d_hidden,
                      n_experts=m.n_experts, top_k=m.top_k, n_layers=m.n_layers,
                      d_out=cfg.task.output_dim, task_kind=cfg.task.task_kind,
                      aux_loss_coeff=m.aux_loss_coeff, precision=m.precision)
