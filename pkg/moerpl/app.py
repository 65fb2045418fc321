import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from moerpl import calibration, config, pipeline
from moerpl.errors import MoerplError


# __Author__: pablo-chacon
# __Version__: 2.0.1
# __Date__: 2026-09-27

"""Command line entry point.

    moerpl pretrain --config exp.json --seed 1
    moerpl calibrate --config exp.json
    moerpl search-threshold --config exp.json --target-rho 0.4
    moerpl compress --config exp.json --rank 2
    moerpl finetune --config exp.json --end-ratio 0.2
    moerpl eval --config exp.json
    moerpl sweep --config exp.json --axis end_ratio
    moerpl report --out runs/default
    moerpl dataset --config exp.json
"""

COMMANDS = ('pretrain', 'calibrate', 'search-threshold', 'compress', 'finetune', 'eval', 'sweep', 'report',
            'dataset')


def build_parser():
    parser = argparse.ArgumentParser(prog='moerpl', description='Expert replacement compression lab for toy MoE models.')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument('--config', help='JSON experiment config (defaults when omitted)')
        cmd.add_argument('--seed', type=int)
        cmd.add_argument('--target-rho', type=float)
        cmd.add_argument('--end-ratio', type=float)
        cmd.add_argument('--rank', type=int)
        cmd.add_argument('--out', help='output directory')
        cmd.add_argument('--log-level', default=os.environ.get('MOERPL_LOG_LEVEL', 'INFO'))
        if name == 'sweep':
            cmd.add_argument('--axis', required=True, choices=config.SWEEP_AXES)
    return parser


def resolve_config(args):
    if args.config:
        cfg = config.load_config(args.config)
    else:
        cfg = config.ExperimentConfig()
        if os.environ.get('MOERPL_OUT_DIR'):
            cfg = config.apply_overrides(cfg, out=os.environ['MOERPL_OUT_DIR'])
    return config.apply_overrides(cfg, seed=args.seed, target_rho=args.target_rho, end_ratio=args.end_ratio,
                                  rank=args.rank, out=args.out)


def _search(cfg):
    out = pipeline.output_dir(cfg)
    model = pipeline.load_model(out / 'pretrain.ckpt', 'search-threshold')
    table, profile = calibration.calibration_from_dict(pipeline.read_json(out / 'calibration.json',
                                                                           'search-threshold'))
    search = pipeline.search_threshold(model.hyper, table, profile, cfg)
    result = dict(search.to_dict(), plan=search.plan.to_dict())
    pipeline.write_json(out / 'selection.json', {'mode': cfg.construction.replace_mode,
                                                 'base_threshold': search.base_threshold,
                                                 'plan': search.plan.to_dict(), 'groups': None,
                                                 'search': search.to_dict()})
    print(json.dumps(result, sort_keys=True))


def dispatch(args, cfg):
    if args.command == 'pretrain':
        pipeline.run_pretrain(cfg)
    elif args.command == 'calibrate':
        pipeline.run_calibrate(cfg)
    elif args.command == 'search-threshold':
        _search(cfg)
    elif args.command == 'compress':
        pipeline.run_compress(cfg)
    elif args.command == 'finetune':
        pipeline.run_finetune(cfg)
    elif args.command == 'eval':
        pipeline.run_eval(cfg)
    elif args.command == 'sweep':
        pipeline.run_sweep(cfg, args.axis)
    elif args.command == 'report':
        pipeline.run_report(pipeline.output_dir(cfg))
    elif args.command == 'dataset':
        pipeline.run_dataset(cfg)


def main(argv=None):
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    try:
        dispatch(args, resolve_config(args))
    except MoerplError as e:
        sys.stderr.write(e.to_json() + '\n')
        return 1
    except OSError as e:
        sys.stderr.write(json.dumps({'error': 'io', 'message': str(e)}, sort_keys=True) + '\n')
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
