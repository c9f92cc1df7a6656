#!/usr/bin/env python3
"""
Text GAN Toolkit - Main Entry Point

Adversarial text generation with discrete-sequence gradient estimators
(Taylor, REINFORCE, Straight-Through, Gumbel-Softmax) and an MLE baseline.

Usage:
    python main.py train --config run.cfg
    python main.py sample --ckpt runs/run/last.ckpt -n 10 --temperature 1.0 --seed 0
    python main.py evaluate --ckpt runs/run/last.ckpt --lm-ckpt runs/lm/last.ckpt
    python main.py sweep --ckpt runs/run/last.ckpt --temperatures 0.5,1.0,1.5
    python main.py verify
"""

import argparse
import json
import logging
import os
import sys

from config.run_config import ConfigError, load_config
from config.settings import APP_NAME, APP_VERSION, EVAL_TEMPERATURE, SWEEP_TEMPERATURES
from core.autodiff import ShapeError
from core.checkpoint import CheckpointError
from core.metrics import InsufficientSamplesError
from core.oracle import FAULTS
from core.trainer import (SWEEP_METRICS, TrainingDivergedError, evaluate, parse_temperatures, sample,
                          sweep, train, verify)
from core.vocab import VocabularyError, WordVectorFormatError

LIBRARY_ERRORS = (ConfigError, CheckpointError, TrainingDivergedError, InsufficientSamplesError,
                  VocabularyError, WordVectorFormatError, ShapeError, OSError, ValueError)


def parse_args(argv=None):
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(
        description=f"{APP_NAME} {APP_VERSION} - discrete sequence GAN training and evaluation"
    )
    parser.add_argument(
        '--verbose',
        action='store_true',
        help='Debug logging'
    )
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('train', help='Train a model from a run config')
    p.add_argument('--config', help='Flat key = value run file (defaults if omitted)')

    p = commands.add_parser('sample', help='Print sentences sampled from a checkpoint')
    p.add_argument('--ckpt', required=True)
    p.add_argument('-n', type=int, default=10, help='Number of sentences')
    p.add_argument('--temperature', type=float, default=EVAL_TEMPERATURE)
    p.add_argument('--seed', type=int, default=0)

    p = commands.add_parser('evaluate', help='Score a checkpoint at one temperature')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--lm-ckpt', help='MLE language model for the lm score')
    p.add_argument('--temperature', type=float, default=EVAL_TEMPERATURE)
    p.add_argument('--references', help='Real text file (default: the run\'s validation split)')
    p.add_argument('--metrics', default=','.join(SWEEP_METRICS))
    p.add_argument('--seed', type=int, default=0)

    p = commands.add_parser('sweep', help='Score a checkpoint over several temperatures')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--temperatures', default=SWEEP_TEMPERATURES, help='Comma separated list')
    p.add_argument('--output', help='CSV path (default: sweep.csv next to the checkpoint)')
    p.add_argument('--lm-ckpt', help='MLE language model for the lm score')
    p.add_argument('--references', help='Real text file (default: the run\'s validation split)')
    p.add_argument('--metrics', default=','.join(SWEEP_METRICS))
    p.add_argument('--seed', type=int, default=0)

    p = commands.add_parser('verify', help='Run the exact-enumeration gradient checks')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--fault', choices=FAULTS, help='Inject a known fault (suite must fail)')

    return parser.parse_args(argv)


def _metrics(text: str):
    return [m.strip() for m in text.split(',') if m.strip()]


def run_command(args) -> int:
    if args.command == 'train':
        config = load_config(args.config)
        path = train(config)
        print(f"[{APP_NAME}] Final checkpoint: {path}")
        return 0

    if args.command == 'sample':
        for line in sample(args.ckpt, args.n, args.temperature, args.seed):
            print(line)
        return 0

    if args.command == 'evaluate':
        results = evaluate(args.ckpt, args.temperature, lm_ckpt=args.lm_ckpt,
                           references=args.references, seed=args.seed, metrics=_metrics(args.metrics))
        for result in results:
            print(json.dumps(result.to_dict(), sort_keys=True))
        return 0

    if args.command == 'sweep':
        output = args.output or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "sweep.csv")
        sweep(args.ckpt, parse_temperatures(args.temperatures), output, lm_ckpt=args.lm_ckpt,
              references=args.references, seed=args.seed, metrics=_metrics(args.metrics))
        print(f"[{APP_NAME}] Sweep table: {output}")
        return 0

    if args.command == 'verify':
        return verify(seed=args.seed, fault=args.fault)

    return 1


def main(argv=None):
    """Main entry point"""
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="[%(name)s] %(message)s")

    try:
        code = run_command(args)

    except KeyboardInterrupt:
        print(f"\n[{APP_NAME}] Interrupted by user")
        code = 1

    except LIBRARY_ERRORS as e:
        print(f"Error: {e}", file=sys.stderr)
        code = 1

    sys.exit(code)


if __name__ == "__main__":
    main()
