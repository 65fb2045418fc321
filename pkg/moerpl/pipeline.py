import contextlib
import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from moerpl import annealing, calibration, checkpoint, config, construction, grouping, moe_model, selection, tasks
from moerpl.errors import ConfigError, InfeasibleTargetError, MissingArtifactError, PreconditionError


# __Author__: pablo-chacon
# __Version__: 2.0.2
# __Date__: 2026-09-26

"""Experiment orchestration: pretrain -> calibrate -> compress -> finetune -> eval -> report.

Every phase reads the artifacts of the previous one from the output directory unless it
is handed the in-memory objects, and writes its own artifacts next to them."""

CSV_COLUMNS = ['phase', 'seed', 'value', 'rho', 'eval_loss', 'eval_acc', 'wall_ms']
COMPRESSION_COLUMNS = ['value', 'seed', 'mode', 'rho', 'before', 'after', 'candidates', 'groups']

# Base-threshold search range and iteration cap.
SEARCH_LOW = 1e-4
SEARCH_HIGH = 0.999
SEARCH_MAX_ITER = 40


def write_json(path, data):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(data, indent=2, sort_keys=True) + '\n')


def _require(path, phase):
    if not Path(path).exists():
        logging.error(f"Phase '{phase}' is missing {path}")
        raise MissingArtifactError(Path(path).name, phase)
    return Path(path)


def read_json(path, phase):
    with open(_require(path, phase), 'r', encoding='utf-8') as f:
        return json.load(f)


def load_model(path, phase):
    return checkpoint.model_from_checkpoint(checkpoint.load_checkpoint(_require(path, phase)))


def output_dir(cfg, out_dir=None):
    path = Path(out_dir or cfg.run.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# The task stream follows the run seed so each seed sees its own data.
def task_for(cfg, seed):
    return dataclasses.replace(cfg.task, seed=cfg.task.seed + seed)


@contextlib.contextmanager
def _stopwatch(cfg, timings, phase):
    start = time.perf_counter()
    yield
    elapsed = (time.perf_counter() - start) * 1000.0
    logging.info(f"Phase {phase} took {elapsed:.0f} ms")
    timings[phase] = int(round(elapsed)) if cfg.run.record_wall_time else 0


# Pretraining.

def pretrain(cfg, seed):
    hyper = config.model_hyper(cfg)
    model = moe_model.init_model(hyper, seed)
    spec = task_for(cfg, seed)
    o = cfg.optim
    optimizer = moe_model.make_optimizer(lr=o.pretrain_lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                                         weight_decay=o.weight_decay)
    names = list(moe_model.named_parameters(model))
    losses = []
    for t in range(cfg.run.pretrain_steps):
        batch = tasks.generate(spec, 'train', t, precision=hyper.precision)
        losses.append(moe_model.train_step(model, batch, optimizer, names))
        if cfg.run.log_every and t % cfg.run.log_every == 0:
            logging.info(f"Pretrain step {t}: loss={losses[-1]:.6f}")
    trace = pd.DataFrame({'step': np.arange(len(losses), dtype=np.int64), 'loss': losses},
                         columns=['step', 'loss'])
    return model, trace


def run_pretrain(cfg, out_dir=None, seed=None):
    seed = cfg.run.seed if seed is None else seed
    out = output_dir(cfg, out_dir)
    model, trace = pretrain(cfg, seed)
    config.save_config(out / 'config.json', cfg)
    checkpoint.save_checkpoint(out / 'pretrain.ckpt', checkpoint.model_to_checkpoint(model))
    trace.to_csv(out / 'pretrain_trace.csv', index=False)
    return model, trace


# Calibration.

def calibration_set(cfg, seed, precision):
    c = cfg.calibration
    return calibration.build_calibration_set(task_for(cfg, seed), c.tokens, batch_tokens=c.batch_tokens,
                                             precision=precision)


def run_calibrate(cfg, model=None, out_dir=None, seed=None, write=True):
    seed = cfg.run.seed if seed is None else seed
    out = output_dir(cfg, out_dir) if write else None
    if model is None:
        model = load_model(output_dir(cfg, out_dir) / 'pretrain.ckpt', 'calibrate')
    calib = calibration_set(cfg, seed, model.hyper.precision)
    table = calibration.accumulate_gate_scores(model, calib, mode=cfg.calibration.gate_mode)
    profile = calibration.compute_router_norms(model, calib, mode=cfg.calibration.norm_mode)
    if write:
        calibration.save_calibration(out / 'calibration.json', table, profile)
    return table, profile, calib


# Selection plans and the base-threshold search.

def candidate_cap(cfg, hyper):
    if cfg.selection.max_candidates is not None:
        return cfg.selection.max_candidates
    return hyper.n_experts - hyper.top_k


def empty_plan(n_layers, method='adaptive'):
    return selection.SelectionPlan(layers=[selection.LayerSelection(threshold=0.0) for _ in range(n_layers)],
                                   method=method)


def plan_for_threshold(table, profile, cfg, base_threshold, hyper):
    sel = cfg.selection
    if base_threshold <= 0.0:
        return empty_plan(table.n_layers, sel.method)
    cap = candidate_cap(cfg, hyper)
    if sel.method == 'uniform':
        return selection.uniform_select(table, base_threshold, max_candidates=cap)
    thresholds = selection.adaptive_thresholds(
        profile, selection.ThresholdConfig(base_threshold, alpha=sel.alpha, max_delta=sel.max_delta))
    # The clip range can push layer thresholds past 1 when the base threshold is near 1.
    thresholds = np.minimum(thresholds, SEARCH_HIGH)
    adaptive = selection.select_candidates(table, thresholds, max_candidates=cap)
    if sel.method == 'adaptive':
        return adaptive
    count = sel.average_count if sel.average_count is not None else selection.mirrored_average_count(adaptive)
    return selection.average_select(table, min(count, cap))


def group_counts(plan, cfg):
    mode = cfg.construction.replace_mode
    counts = []
    for n in plan.counts:
        if mode in ('no_base', 'lora'):
            counts.append(0)
        elif mode == 'shared_single':
            counts.append(1 if n else 0)
        else:
            counts.append(grouping.group_count(n, cfg.grouping.group_size))
    return counts


def report_for_plan(hyper, plan, cfg, rank):
    return construction.compression_report(hyper, plan.counts, group_counts(plan, cfg), rank,
                                           mode=cfg.construction.replace_mode)


@dataclass
class SearchStep:
    base_threshold: float
    rho: float
    counts: list


@dataclass
class ThresholdSearch:
    base_threshold: float
    achieved_rho: float
    target_rho: float
    tol: float
    converged: bool
    plan: selection.SelectionPlan
    steps: list = field(default_factory=list)

    def to_dict(self):
        return {'base_threshold': self.base_threshold, 'achieved_rho': self.achieved_rho,
                'target_rho': self.target_rho, 'tol': self.tol, 'converged': self.converged,
                'steps': [asdict(p) for p in self.steps]}


# Binary search on the base threshold; returns the step closest to the target.
def search_threshold(hyper, table, profile, cfg, target_rho=None, tol=None, rank=None):
    target = cfg.selection.target_rho if target_rho is None else target_rho
    tol = cfg.selection.tol if tol is None else tol
    rank = cfg.construction.rank if rank is None else rank
    n = hyper.n_experts
    if not 0.0 <= target < (n - 1) / n:
        raise PreconditionError(f"target_rho={target} outside [0, {(n - 1) / n:.4f})")
    if tol <= 0:
        raise PreconditionError(f"tol must be > 0, got {tol}")
    if target == 0.0:
        plan = plan_for_threshold(table, profile, cfg, 0.0, hyper)
        rho = report_for_plan(hyper, plan, cfg, rank).rho
        return ThresholdSearch(base_threshold=0.0, achieved_rho=rho, target_rho=target, tol=tol,
                               converged=True, plan=plan)
    lo, hi = SEARCH_LOW, SEARCH_HIGH
    steps, best = [], None
    for _ in range(SEARCH_MAX_ITER):
        p = (lo + hi) / 2.0
        plan = plan_for_threshold(table, profile, cfg, p, hyper)
        rho = report_for_plan(hyper, plan, cfg, rank).rho
        steps.append(SearchStep(base_threshold=p, rho=rho, counts=plan.counts))
        logging.debug(f"Threshold step p={p:.6f}: rho={rho:.4f} counts={plan.counts}")
        if best is None or abs(rho - target) < abs(best[1] - target):
            best = (p, rho, plan)
        if abs(rho - target) <= tol:
            break
        if rho < target:
            lo = p
        else:
            hi = p
    p, rho, plan = best
    converged = abs(rho - target) <= tol
    if not converged:
        top = report_for_plan(hyper, plan_for_threshold(table, profile, cfg, SEARCH_HIGH, hyper), cfg, rank)
        max_rho = max([top.rho] + [step.rho for step in steps])
        if target > max_rho:
            logging.error(f"Target rho {target} unreachable, max achievable {max_rho:.4f}")
            raise InfeasibleTargetError(f"Target rho {target} is unreachable", max_rho=max_rho,
                                        target_rho=target, rank=rank)
        logging.warning(f"No step within tol {tol} of rho {target}; closest p={p:.6f} gives rho={rho:.4f}")
    logging.info(f"Base threshold {p:.6f} gives rho={rho:.4f} (target {target}) after {len(steps)} steps")
    return ThresholdSearch(base_threshold=p, achieved_rho=rho, target_rho=target, tol=tol,
                           converged=converged, plan=plan, steps=steps)


# Grouping and assembly.

def build_groups(model, calib, plan, table, cfg, seed):
    mode = cfg.construction.replace_mode
    if mode == 'lora':
        return grouping.empty_groups(len(plan.layers))
    if mode == 'no_base':
        return None
    if mode == 'shared_single':
        return grouping.single_group(plan, table)
    g = cfg.grouping
    if g.method == 'kmeans':
        counts = [grouping.group_count(n, g.group_size) for n in plan.counts]
        return grouping.kmeans_group(model, calib(), plan, counts, table, seed=seed)
    if g.similarity == 'profile':
        return grouping.dominant_group(model, calib(), plan, table, g.group_size, mode='profile')
    return grouping.dominant_group(model, None, plan, table, g.group_size, mode='router')


@dataclass
class CompressionOutcome:
    model: moe_model.MoEModel
    plan: selection.SelectionPlan
    groups: object
    report: construction.CompressionReport
    search: object = None


def run_compress(cfg, model=None, table=None, profile=None, calib=None, out_dir=None, seed=None, write=True):
    seed = cfg.run.seed if seed is None else seed
    if model is None:
        model = load_model(output_dir(cfg, out_dir) / 'pretrain.ckpt', 'compress')
    if table is None or profile is None:
        table, profile = calibration.calibration_from_dict(
            read_json(output_dir(cfg, out_dir) / 'calibration.json', 'compress'))
    cache = {'calib': calib}

    def lazy_calib():
        if cache['calib'] is None:
            cache['calib'] = calibration_set(cfg, seed, model.hyper.precision)
        return cache['calib']

    hyper = model.hyper
    mode = cfg.construction.replace_mode
    rank = cfg.construction.rank
    search = None
    if mode == 'lora':
        plan = empty_plan(len(model.layers), cfg.selection.method)
    elif cfg.selection.base_threshold is not None:
        plan = plan_for_threshold(table, profile, cfg, cfg.selection.base_threshold, hyper)
    else:
        search = search_threshold(hyper, table, profile, cfg, rank=rank)
        plan = search.plan
    groups = build_groups(model, lazy_calib, plan, table, cfg, seed)
    attach = cfg.construction.train_retained_adapters or mode == 'lora'
    compressed, report = construction.assemble_compressed_model(
        model, plan, groups, table, rank, attach_retained_adapters=attach, seed=seed, mode=mode)
    if write:
        out = output_dir(cfg, out_dir)
        base = search.base_threshold if search else cfg.selection.base_threshold
        write_json(out / 'selection.json', {
            'mode': mode,
            'base_threshold': base,
            'plan': plan.to_dict(),
            'groups': None if groups is None else groups.to_dict(),
            'search': None if search is None else search.to_dict(),
        })
        write_json(out / 'compression.json', report.to_dict())
        report.to_frame().to_csv(out / 'compression.csv', index=False)
        checkpoint.save_checkpoint(out / 'compressed.ckpt', checkpoint.model_to_checkpoint(compressed, mode=mode))
    return CompressionOutcome(model=compressed, plan=plan, groups=groups, report=report, search=search)


# Recovery fine-tuning.

def schedule_for(cfg):
    s = cfg.schedule
    # The replace baselines swap at step 0.
    end_ratio = 0.0 if cfg.construction.replace_mode in ('shared_single', 'no_base') else s.end_ratio
    return annealing.AnnealSchedule(kind=s.kind, end_ratio=end_ratio, total_steps=cfg.run.finetune_steps,
                                    gamma=s.gamma)


def _first_batch_loss(model, cfg, seed):
    batch = tasks.generate(task_for(cfg, seed), 'train', annealing.FINETUNE_BATCH_OFFSET,
                           precision=model.hyper.precision)
    loss, _ = moe_model.batch_loss(model, batch)
    return float(loss.value[0, 0])


def run_finetune(cfg, compressed=None, pretrained=None, out_dir=None, seed=None, write=True):
    seed = cfg.run.seed if seed is None else seed
    if compressed is None:
        compressed = load_model(output_dir(cfg, out_dir) / 'compressed.ckpt', 'finetune')
    if pretrained is None and write and (output_dir(cfg, out_dir) / 'pretrain.ckpt').exists():
        pretrained = load_model(output_dir(cfg, out_dir) / 'pretrain.ckpt', 'finetune')
    baseline = _first_batch_loss(pretrained, cfg, seed) if pretrained is not None else None
    mode = cfg.construction.replace_mode
    model, trace = annealing.finetune(
        moe_model.clone_model(compressed), task_for(cfg, seed), schedule_for(cfg), cfg.optim,
        include_retained=cfg.construction.train_retained_adapters or mode == 'lora',
        log_every=cfg.run.log_every, baseline_loss=baseline)
    if write:
        out = output_dir(cfg, out_dir)
        trace.to_csv(out / 'finetune_trace.csv')
        checkpoint.save_checkpoint(out / 'finetuned.ckpt', checkpoint.model_to_checkpoint(model, mode=mode))
    return model, trace


# Evaluation and reports.

def evaluate_model(model, cfg, seed):
    spec = task_for(cfg, seed)
    return moe_model.evaluate(model, tasks.batches(spec, 'eval', 0, cfg.run.eval_batches,
                                                   precision=model.hyper.precision))


@dataclass
class MetricsReport:
    seed: int
    rho: float
    loss_before: float
    acc_before: object = None
    loss_assembled: object = None
    acc_assembled: object = None
    loss_recovered: object = None
    acc_recovered: object = None
    value: object = None
    wall_ms: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def rows(self):
        phases = [('pretrained', 0.0, self.loss_before, self.acc_before),
                  ('assembled', self.rho, self.loss_assembled, self.acc_assembled),
                  ('recovered', self.rho, self.loss_recovered, self.acc_recovered)]
        rows = [{'phase': phase, 'seed': self.seed, 'value': self.value, 'rho': rho, 'eval_loss': loss,
                 'eval_acc': acc, 'wall_ms': self.wall_ms.get(phase, 0)}
                for phase, rho, loss, acc in phases if loss is not None]
        return pd.DataFrame(rows, columns=CSV_COLUMNS)


def run_eval(cfg, pretrained=None, compressed=None, finetuned=None, rho=None, out_dir=None, seed=None,
             write=True, wall_ms=None):
    seed = cfg.run.seed if seed is None else seed
    timings = dict(wall_ms or {})
    if write or pretrained is None:
        out = output_dir(cfg, out_dir)
        if pretrained is None:
            pretrained = load_model(out / 'pretrain.ckpt', 'eval')
        if compressed is None and (out / 'compressed.ckpt').exists():
            compressed = load_model(out / 'compressed.ckpt', 'eval')
        if finetuned is None and (out / 'finetuned.ckpt').exists():
            if compressed is None:
                raise MissingArtifactError('compressed.ckpt', 'eval')
            finetuned = load_model(out / 'finetuned.ckpt', 'eval')
        if rho is None and compressed is not None:
            rho = read_json(out / 'compression.json', 'eval')['rho']
    loss_before, acc_before = evaluate_model(pretrained, cfg, seed)
    metrics = MetricsReport(seed=seed, rho=float(rho or 0.0), loss_before=loss_before, acc_before=acc_before,
                            wall_ms=timings)
    if compressed is not None:
        metrics.loss_assembled, metrics.acc_assembled = evaluate_model(compressed, cfg, seed)
    if finetuned is not None:
        metrics.loss_recovered, metrics.acc_recovered = evaluate_model(finetuned, cfg, seed)
    logging.info(f"Eval seed {seed}: before={metrics.loss_before:.6f} assembled={metrics.loss_assembled} "
                 f"recovered={metrics.loss_recovered} rho={metrics.rho:.4f}")
    if write:
        write_json(out / 'metrics.json', metrics.to_dict())
        metrics.rows().to_csv(out / 'metrics.csv', index=False)
    return metrics


# All phases in memory for one (config, seed) cell.
def run_pipeline(cfg, seed, value=None, pretrained=None, reports=None):
    timings = {}
    if pretrained is None:
        with _stopwatch(cfg, timings, 'pretrained'):
            pretrained, _ = pretrain(cfg, seed)
    table, profile, calib = run_calibrate(cfg, model=pretrained, seed=seed, write=False)
    with _stopwatch(cfg, timings, 'assembled'):
        outcome = run_compress(cfg, model=pretrained, table=table, profile=profile, calib=calib,
                               seed=seed, write=False)
    if reports is not None:
        reports.append(outcome.report)
    with _stopwatch(cfg, timings, 'recovered'):
        finetuned, _ = run_finetune(cfg, compressed=outcome.model, pretrained=pretrained, seed=seed, write=False)
    metrics = run_eval(cfg, pretrained=pretrained, compressed=outcome.model, finetuned=finetuned,
                       rho=outcome.report.rho, seed=seed, write=False, wall_ms=timings)
    metrics.value = value
    return metrics


def parse_schedule(value, default_gamma=3.0):
    kind, _, gamma = str(value).partition(':')
    if kind not in annealing.SCHEDULE_KINDS:
        raise ConfigError(f"Unknown schedule '{value}'", allowed=list(annealing.SCHEDULE_KINDS))
    try:
        return kind, float(gamma) if gamma else default_gamma
    except ValueError:
        raise ConfigError(f"Bad exponential gamma in schedule '{value}'")


def apply_axis(cfg, axis, value):
    r = dataclasses.replace
    if axis == 'end_ratio':
        return r(cfg, schedule=r(cfg.schedule, end_ratio=float(value)))
    if axis == 'rank':
        return r(cfg, construction=r(cfg.construction, rank=int(value)))
    if axis == 'group_size':
        return r(cfg, grouping=r(cfg.grouping, group_size=int(value)))
    if axis == 'selection_method':
        return r(cfg, selection=r(cfg.selection, method=value))
    if axis == 'grouping_method':
        return r(cfg, grouping=r(cfg.grouping, method=value))
    if axis == 'calib_tokens':
        return r(cfg, calibration=r(cfg.calibration, tokens=int(value)))
    if axis == 'max_delta':
        return r(cfg, selection=r(cfg.selection, max_delta=float(value)))
    if axis == 'schedule':
        kind, gamma = parse_schedule(value, cfg.schedule.gamma)
        return r(cfg, schedule=r(cfg.schedule, kind=kind, gamma=gamma))
    if axis == 'replace_mode':
        return r(cfg, construction=r(cfg.construction, replace_mode=value))
    raise ConfigError(f"Unknown sweep axis '{axis}'", allowed=list(config.SWEEP_AXES))


def _summary_rows(frame):
    rows = []
    for value, cell in frame.groupby('value', sort=False):
        for phase, stat in (('mean', cell.mean(numeric_only=True)), ('stdev', cell.std(numeric_only=True))):
            rows.append({'phase': phase, 'seed': None, 'value': value, 'rho': stat.get('rho'),
                         'eval_loss': stat.get('eval_loss'), 'eval_acc': stat.get('eval_acc'),
                         'wall_ms': stat.get('wall_ms')})
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


# One row per (value, seed); mean/stdev rows per value when several values and seeds ran.
def run_sweep(cfg, axis, out_dir=None):
    if axis not in config.SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis '{axis}'", allowed=list(config.SWEEP_AXES))
    values = cfg.sweep.values.get(axis)
    if not values:
        raise PreconditionError(f"No values listed for sweep axis '{axis}'")
    seeds = list(cfg.run.seeds)
    pretrained = {}
    rows = []
    compression_rows = []
    for value in values:
        cell = apply_axis(cfg, axis, value)
        for seed in seeds:
            if seed not in pretrained:
                pretrained[seed], _ = pretrain(cfg, seed)
            logging.info(f"Sweep {axis}={value} seed={seed}")
            reports = []
            metrics = run_pipeline(cell, seed, value=value, pretrained=pretrained[seed], reports=reports)
            rows.append(metrics.rows().iloc[-1].to_dict())
            compression_rows.append(reports[0].csv_row().assign(value=value, seed=seed))
    frame = pd.DataFrame(rows, columns=CSV_COLUMNS)
    if len(values) > 1 and len(seeds) > 1:
        frame = pd.concat([frame, _summary_rows(frame)], ignore_index=True)
    out = output_dir(cfg, out_dir)
    frame.to_csv(out / f"sweep_{axis}.csv", index=False)
    logging.info(f"Sweep over {axis} written to {out / f'sweep_{axis}.csv'} ({len(frame)} rows)")
    compression = pd.concat(compression_rows, ignore_index=True)[COMPRESSION_COLUMNS]
    compression.to_csv(out / f"compression_{axis}.csv", index=False)
    return frame


def run_report(out_dir):
    out = Path(out_dir)
    frames = []
    if (out / 'metrics.json').exists():
        frames.append(MetricsReport.from_dict(read_json(out / 'metrics.json', 'report')).rows())
    for path in sorted(out.glob('sweep_*.csv')):
        sweep = pd.read_csv(path)
        axis = path.stem[len('sweep_'):]
        sweep['phase'] = axis + '/' + sweep['phase'].astype(str)
        frames.append(sweep[CSV_COLUMNS])
    if not frames:
        raise MissingArtifactError('metrics.json', 'report')
    report = pd.concat(frames, ignore_index=True)[CSV_COLUMNS]
    report.to_csv(out / 'report.csv', index=False)
    if (out / 'calibration.json').exists():
        table, profile = calibration.calibration_from_dict(read_json(out / 'calibration.json', 'report'))
        calibration.importance_curves(table, profile).to_csv(out / 'importance_curves.csv', index=False)
    logging.info(f"Report with {len(report)} rows written to {out / 'report.csv'}")
    return report


# Train and eval tokens of the run's task, for inspection.
def run_dataset(cfg, out_dir=None, seed=None):
    seed = cfg.run.seed if seed is None else seed
    out = output_dir(cfg, out_dir)
    spec = task_for(cfg, seed)
    return {split: tasks.dump_dataset(spec, split, cfg.run.eval_batches, out / f"dataset_{split}.csv",
                                      precision=cfg.model.precision)
            for split in ('train', 'eval')}
