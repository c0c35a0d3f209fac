#!/usr/bin/env python3
"""
Linha de comando do MAT-SEI: geração de dataset, treino, grid de ablação,
relatórios, avaliação e diagnóstico.

Logs vão para stderr; a última linha de stdout é sempre um objeto JSON.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import config
from modules import evalkit, experiment
from modules.experiment import ExperimentConfig, ExperimentManifest
from modules.gradcore import CheckpointError
from modules.mat_trainer import BEST_CHECKPOINT, LAST_CHECKPOINT, NonFiniteLossError, load_params
from modules.sigkit import (DatasetFileError, build_dataset, load_dataset, load_raw_iq, normalize_min_max,
                            save_dataset)

logger = logging.getLogger(__name__)

METRIC_CHOICES = {'center': 'center', 'pa': 'proxy_anchor', 'none': 'none'}
SCHEDULE_CHOICES = {'alt': 'alternating', 'sim': 'simultaneous'}


class ReportError(OSError):
    """Missing or corrupt report stream."""


def emit(payload):
    print(json.dumps(payload, sort_keys=True, default=str))
    sys.stdout.flush()


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else config.LOG_LEVEL
    logging.basicConfig(level=level, format=config.LOG_FORMAT, stream=sys.stderr, force=True)


def _progress(args):
    return not args.quiet and sys.stderr.isatty()


# ---------------------------------------------------------------------------
# experiment flags
# ---------------------------------------------------------------------------

def add_experiment_args(parser, training=True):
    parser.add_argument('--config', type=Path, help='experiment JSON (dataset / model / train)')
    parser.add_argument('--seed', type=int, help='master seed; component seeds are derived from it')
    parser.add_argument('--labeled-ratio', type=float)
    if not training:
        return
    parser.add_argument('--metric', choices=sorted(METRIC_CHOICES))
    parser.add_argument('--schedule', choices=sorted(SCHEDULE_CHOICES))
    parser.add_argument('--no-vat', action='store_true')
    parser.add_argument('--no-ssml', action='store_true', help='drop the metric term (same as --metric none)')
    parser.add_argument('--no-unlabeled', action='store_true')
    parser.add_argument('--supervised-metric', action='store_true',
                        help='metric term over labeled samples only')
    parser.add_argument('--tau', type=float)
    parser.add_argument('--epsilon', type=float)
    parser.add_argument('--iterations', type=int)
    parser.add_argument('--batch-size', type=int)


def experiment_from_args(args):
    """ExperimentConfig from --config plus flag overrides."""
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    overrides = {}
    if args.labeled_ratio is not None:
        overrides['dataset.labeled_ratio'] = args.labeled_ratio
    if hasattr(args, 'metric'):
        if args.metric:
            overrides['train.metric'] = METRIC_CHOICES[args.metric]
        if args.no_ssml:
            overrides['train.metric'] = 'none'
        if args.schedule:
            overrides['train.schedule'] = SCHEDULE_CHOICES[args.schedule]
        if args.no_vat:
            overrides['train.vat_enabled'] = False
        if args.no_unlabeled:
            overrides['train.unlabeled_enabled'] = False
        if args.supervised_metric:
            overrides['train.metric_unlabeled'] = False
        for flag, key in (('tau', 'train.tau'), ('epsilon', 'train.epsilon'),
                          ('iterations', 'train.iterations'), ('batch_size', 'train.batch_size')):
            if getattr(args, flag) is not None:
                overrides[key] = getattr(args, flag)
    return exp.with_overrides(overrides) if overrides else exp


def _read_dataset(path):
    dataset = load_dataset(path)
    return dataset if dataset.is_normalized else normalize_min_max(dataset)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    exp = experiment_from_args(args)
    if args.raw_iq:
        dataset = load_raw_iq(args.raw_iq, exp.dataset.labeled_ratio, seed=exp.dataset.master_seed,
                              validation_fraction=exp.dataset.validation_fraction)
    else:
        dataset = build_dataset(exp.dataset, progress=_progress(args))
    dataset = normalize_min_max(dataset)
    save_dataset(dataset, args.out)
    summary = dataset.summary()
    emit({'command': 'gen', 'path': str(args.out), **summary})
    return config.EXIT_OK


def cmd_train(args):
    exp = experiment_from_args(args)
    out_dir = args.out_dir
    dataset = _read_dataset(args.dataset) if args.dataset else None
    resume_from = None
    if args.resume:
        resume_from = out_dir / LAST_CHECKPOINT
        if not resume_from.exists():
            raise FileNotFoundError(f"nothing to resume: {resume_from}")
    summary = experiment.run_experiment(exp, out_dir, dataset=dataset, progress=_progress(args),
                                        resume_from=resume_from)
    print(f"val_acc={summary['best_val_acc']} test_acc={summary['test_accuracy']}", file=sys.stderr)
    emit({'command': 'train', 'out_dir': str(out_dir),
          'best_checkpoint': str(out_dir / BEST_CHECKPOINT),
          **{k: summary[k] for k in ('config_hash', 'method', 'iterations', 'best_iteration',
                                     'best_val_acc', 'test_accuracy', 'silhouette')}})
    return config.EXIT_OK


def cmd_grid(args):
    manifest = ExperimentManifest.load(args.manifest)
    workers = args.workers if args.workers is not None else manifest.workers
    if workers == 0:
        workers = experiment.cpu_count()
    result = experiment.run_grid(manifest, workers=workers)
    emit({'command': 'grid', 'experiment_id': manifest.experiment_id, 'cells': len(result.rows),
          'failed': result.failed, 'aggregate': str(result.aggregate_path), 'table': str(result.table_path)})
    return config.EXIT_FAILURE if result.failed else config.EXIT_OK


def cmd_report(args):
    try:
        runs = experiment.build_report(args.runs, args.out)
    except (FileNotFoundError, ValueError) as e:
        raise ReportError(str(e)) from e
    emit({'command': 'report', 'out': str(args.out), 'runs': len(runs),
          'files': ['loss_curves.csv', 'accuracy_vs_ratio.csv', 'summary.md']})
    return config.EXIT_OK


def cmd_eval(args):
    params, _ = load_params(args.checkpoint)
    dataset = _read_dataset(args.dataset)
    partition = dataset.partition(args.partition)
    quality = None
    if len(dataset.unlabeled) and dataset.diagnostic_labels is not None:
        quality = evalkit.pseudo_label_quality(params, dataset.unlabeled, dataset.diagnostic_labels,
                                               args.tau, args.batch_size)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    result_path = args.out_dir / f"eval_{args.partition}.json"
    if args.partition == 'unlabeled':
        # no ground truth here: only the pseudo-label diagnostics are scored
        if len(partition) == 0:
            raise ValueError("dataset has no unlabeled samples")
        payload = {'samples': len(partition),
                   'pseudo_label_accuracy': quality.accuracy if quality else None,
                   'pseudo_label_coverage': quality.coverage if quality else None}
        result_path.write_text(json.dumps(payload, indent=2))
        accuracy, score = None, None
    else:
        result = evalkit.evaluate(params, partition, args.batch_size)
        if quality is not None:
            result.pseudo_label_accuracy, result.pseudo_label_coverage = quality.accuracy, quality.coverage
        result.to_json(result_path)
        accuracy, score = result.accuracy, result.silhouette
    embeddings = evalkit.export_embeddings(params, partition, args.out_dir / f"embeddings_{args.partition}.tsv",
                                           args.batch_size)
    emit({'command': 'eval', 'partition': args.partition, 'accuracy': accuracy, 'silhouette': score,
          'pseudo_label_accuracy': quality.accuracy if quality else None,
          'pseudo_label_coverage': quality.coverage if quality else None,
          'result': str(result_path), 'embeddings': str(embeddings)})
    return config.EXIT_OK


def cmd_diagnose(args):
    import diagnostico
    checks = diagnostico.run_checks()
    emit({'command': 'diagnose', **checks})
    return config.EXIT_OK if all(checks.values()) else config.EXIT_FAILURE


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog='mat-sei', description='Semi-supervised emitter identification')
    parser.add_argument('--verbose', '-v', action='store_true')
    parser.add_argument('--quiet', '-q', action='store_true')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='build, normalize and save a dataset')
    add_experiment_args(gen, training=False)
    gen.add_argument('--raw-iq', type=Path, help='directory with manifest.json and per-class f32 captures')
    gen.add_argument('--out', type=Path, required=True)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser('train', help='train one configuration')
    add_experiment_args(tr)
    tr.add_argument('--dataset', type=Path, help='dataset file; generated in memory when omitted')
    tr.add_argument('--out-dir', type=Path, required=True)
    tr.add_argument('--resume', action='store_true', help=f"continue from OUT_DIR/{LAST_CHECKPOINT}")
    tr.set_defaults(func=cmd_train)

    grid = sub.add_parser('grid', help='run an ablation grid')
    grid.add_argument('manifest', type=Path)
    grid.add_argument('--workers', type=int, help='parallel processes (0 = all CPUs)')
    grid.set_defaults(func=cmd_grid)

    rep = sub.add_parser('report', help='loss curves and summary tables of finished runs')
    rep.add_argument('runs', type=Path, nargs='+')
    rep.add_argument('--out', type=Path, required=True)
    rep.set_defaults(func=cmd_report)

    ev = sub.add_parser('eval', help='score a checkpoint on a dataset partition')
    ev.add_argument('--checkpoint', type=Path, required=True)
    ev.add_argument('--dataset', type=Path, required=True)
    ev.add_argument('--partition', default='test', choices=('labeled', 'unlabeled', 'validation', 'test'))
    ev.add_argument('--out-dir', type=Path, required=True)
    ev.add_argument('--tau', type=float, default=config.DEFAULT_TAU)
    ev.add_argument('--batch-size', type=int, default=256)
    ev.set_defaults(func=cmd_eval)

    diag = sub.add_parser('diagnose', help='environment and smoke checks')
    diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except NonFiniteLossError as e:
        logger.error(f"❌ {e}")
        emit({'command': args.command, 'error': str(e), 'dump': str(e.dump_path) if e.dump_path else None})
        return config.EXIT_NON_FINITE
    except (DatasetFileError, CheckpointError, OSError) as e:
        logger.error(f"❌ I/O: {e}", exc_info=args.verbose)
        emit({'command': args.command, 'error': str(e)})
        return config.EXIT_IO_ERROR
    except (ValueError, KeyError) as e:
        logger.error(f"❌ configuração: {e}", exc_info=args.verbose)
        emit({'command': args.command, 'error': str(e)})
        return config.EXIT_CONFIG_ERROR
    except Exception as e:
        logger.error(f"❌ {type(e).__name__}: {e}", exc_info=args.verbose)
        emit({'command': args.command, 'error': str(e)})
        return config.EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
