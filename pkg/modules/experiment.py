"""
Experiment layer shared by the CLI: the single JSON experiment config, seed
derivation, one-run execution (train + test evaluation + run summary), the
ablation grid and the report tables.
"""

import copy
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from modules import evalkit
from modules.cvnet import ModelConfig
from modules.mat_trainer import REPORT_FILE, TrainConfig, TrainReport, resume, run_hash, train
from modules.sigkit import DatasetConfig, build_dataset, load_dataset, normalize_min_max

logger = logging.getLogger(__name__)

RUN_SUMMARY = 'run.json'
DONE_MARKER = 'DONE.json'
ABLATIONS = ('full', 'no_ssml', 'no_vat', 'no_utd')
GRID_AXES = ('labeled_ratio', 'metric', 'ablation', 'schedule', 'seeds')


def derive_seed(seed, component):
    """Stable 64-bit seed for one component, from sha256("{seed}:{component}")."""
    digest = hashlib.sha256(f"{seed}:{component}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return {'dataset': self.dataset.to_dict(), 'model': self.model.to_dict(),
                'train': self.train.to_dict()}

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {'dataset', 'model', 'train'}
        if unknown:
            raise ValueError(f"unknown experiment config sections: {sorted(unknown)}")
        dataset = DatasetConfig.from_dict(data.get('dataset', {}))
        model_data = {'num_classes': dataset.num_classes, 'input_length': dataset.sample_length}
        model_data.update(data.get('model', {}))
        return cls(dataset, ModelConfig.from_dict(model_data), TrainConfig.from_dict(data.get('train', {})))

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def config_hash(self):
        return run_hash(self.dataset, self.model, self.train)

    def with_seed(self, seed):
        """Copy with dataset and trainer seeds derived from one master seed."""
        out = copy.deepcopy(self)
        out.dataset.master_seed = derive_seed(seed, 'sigkit')
        out.train.seed = derive_seed(seed, 'mat_trainer')
        return out

    def with_overrides(self, overrides):
        """Copy with dotted-key overrides such as {'train.metric': 'none'}."""
        data = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.partition('.')
            if section not in data or not name:
                raise ValueError(f"bad override key '{key}'")
            data[section][name] = value
        return ExperimentConfig.from_dict(data)


def method_label(train_config):
    """Table row name: MAT-CL / MAT-PA with ablation suffixes, CVNN for the supervised baseline."""
    cfg = train_config
    if cfg.metric == 'none' and not cfg.vat_enabled and not cfg.unlabeled_enabled:
        return 'CVNN'
    base = {'center': 'MAT-CL', 'proxy_anchor': 'MAT-PA', 'none': 'MAT'}[cfg.metric]
    if not cfg.metric_unlabeled and cfg.metric != 'none':
        base += ' (ML)'
    suffixes = []
    if cfg.metric == 'none':
        suffixes.append('w/o SSML')
    if not cfg.vat_enabled:
        suffixes.append('w/o VAT')
    if not cfg.unlabeled_enabled:
        suffixes.append('w/o UTD')
    if cfg.schedule == 'simultaneous' and cfg.metric != 'none' and cfg.vat_enabled:
        suffixes.append('sim')
    return ' '.join([base] + suffixes)


def align_to_dataset(exp, dataset):
    """Take dataset geometry (and its generator config, when known) from a built dataset."""
    model = replace(exp.model, num_classes=dataset.num_classes, input_length=dataset.sample_length)
    return replace(exp, dataset=dataset.config or exp.dataset, model=model)


def run_experiment(exp, out_dir, dataset=None, progress=False, resume_from=None):
    """Train one configuration, score the best checkpoint on the test split, write run.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = normalize_min_max(build_dataset(exp.dataset, progress=progress))
    exp = align_to_dataset(exp, dataset)
    if resume_from is not None:
        result = resume(resume_from, dataset, exp.train, exp.model, out_dir=out_dir, progress=progress)
    else:
        result = train(dataset, exp.train, exp.model, out_dir=out_dir, progress=progress)
    test = None
    if len(dataset.test):
        test = evalkit.evaluate(result.best_params, dataset.test, exp.train.eval_batch_size)
        if len(dataset.unlabeled) and dataset.diagnostic_labels is not None:
            quality = evalkit.pseudo_label_quality(result.best_params, dataset.unlabeled,
                                                   dataset.diagnostic_labels, exp.train.tau)
            test.pseudo_label_accuracy, test.pseudo_label_coverage = quality.accuracy, quality.coverage
    summary = {
        'config': exp.to_dict(),
        'config_hash': result.config_hash,
        'method': method_label(exp.train),
        'labeled_ratio': exp.dataset.labeled_ratio,
        'iterations': len(result.report),
        'best_iteration': result.best_iteration,
        'best_val_acc': result.best_val_acc,
        'test_accuracy': test.accuracy if test else None,
        'silhouette': test.silhouette if test else None,
        'evaluation': test.to_dict() if test else None,
    }
    (out_dir / RUN_SUMMARY).write_text(json.dumps(summary, indent=2))
    logger.info(f"✅ run {result.config_hash} done: test_acc={summary['test_accuracy']}")
    return summary


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass
class GridCell:
    cell_id: str
    labeled_ratio: float
    metric: str
    ablation: str
    schedule: str
    seed: int

    def overrides(self):
        out = {'dataset.labeled_ratio': self.labeled_ratio, 'train.metric': self.metric,
               'train.schedule': self.schedule}
        if self.ablation == 'no_ssml':
            out['train.metric'] = 'none'
        elif self.ablation == 'no_vat':
            out['train.vat_enabled'] = False
        elif self.ablation == 'no_utd':
            out['train.unlabeled_enabled'] = False
        return out


@dataclass
class ExperimentManifest:
    experiment_id: str
    config: ExperimentConfig
    output_dir: Path
    axes: Dict[str, list]
    dataset_path: Optional[Path] = None
    workers: int = 1

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from e
        unknown = set(data) - {'experiment_id', 'config', 'config_path', 'output_dir', 'grid',
                               'dataset_path', 'workers'}
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        if 'config_path' in data:
            exp = ExperimentConfig.load(path.parent / data['config_path'])
        else:
            exp = ExperimentConfig.from_dict(data.get('config', {}))
        axes = dict(data.get('grid', {}))
        bad = set(axes) - set(GRID_AXES)
        if bad:
            raise ValueError(f"unknown grid axes: {sorted(bad)}")
        axes.setdefault('labeled_ratio', [exp.dataset.labeled_ratio])
        axes.setdefault('metric', [exp.train.metric])
        axes.setdefault('ablation', ['full'])
        axes.setdefault('schedule', [exp.train.schedule])
        axes.setdefault('seeds', [0])
        for name in GRID_AXES:
            if not isinstance(axes[name], list) or not axes[name]:
                raise ValueError(f"grid axis '{name}' must be a non-empty list")
        for ablation in axes['ablation']:
            if ablation not in ABLATIONS:
                raise ValueError(f"unknown ablation '{ablation}', expected one of {ABLATIONS}")
        output_dir = Path(data.get('output_dir', path.parent / data.get('experiment_id', path.stem)))
        dataset_path = data.get('dataset_path')
        if dataset_path and len(axes['labeled_ratio']) > 1:
            raise ValueError("a fixed dataset_path carries its own split; the labeled_ratio axis "
                             f"must hold a single value, got {axes['labeled_ratio']}")
        return cls(experiment_id=data.get('experiment_id', path.stem), config=exp,
                   output_dir=output_dir, axes=axes,
                   dataset_path=Path(dataset_path) if dataset_path else None,
                   workers=int(data.get('workers', 1)))

    def cells(self):
        """Cartesian product of the grid axes."""
        cells = []
        for ratio, metric, ablation, schedule, seed in itertools.product(
                self.axes['labeled_ratio'], self.axes['metric'], self.axes['ablation'],
                self.axes['schedule'], self.axes['seeds']):
            cell_id = f"r{ratio}_{metric}_{ablation}_{schedule}_s{seed}"
            cells.append(GridCell(cell_id, ratio, metric, ablation, schedule, seed))
        return cells


def run_cell(manifest, cell):
    """Run one grid cell unless its DONE marker exists; returns the aggregate row."""
    cell_dir = Path(manifest.output_dir) / cell.cell_id
    done = cell_dir / DONE_MARKER
    row = {'cell': cell.cell_id, 'labeled_ratio': cell.labeled_ratio, 'metric': cell.metric,
           'ablation': cell.ablation, 'schedule': cell.schedule, 'seed': cell.seed}
    if done.exists():
        logger.info(f"⏭️ cell {cell.cell_id} already complete")
        row.update(json.loads(done.read_text()))
        return row
    try:
        exp = manifest.config.with_seed(cell.seed).with_overrides(cell.overrides())
        dataset = None
        if manifest.dataset_path is not None:
            dataset = load_dataset(manifest.dataset_path)
            if not dataset.is_normalized:
                dataset = normalize_min_max(dataset)
        logger.info(f"▶️ cell {cell.cell_id}")
        summary = run_experiment(exp, cell_dir, dataset=dataset)
    except Exception as e:  # a failing cell must not stop the grid
        logger.error(f"❌ cell {cell.cell_id} failed: {e}")
        row.update({'status': 'failed', 'error': f"{type(e).__name__}: {e}"})
        return row
    result = {'status': 'ok', 'labeled_ratio': summary['labeled_ratio'], 'method': summary['method'],
              'test_accuracy': summary['test_accuracy'],
              'silhouette': summary['silhouette'], 'best_val_acc': summary['best_val_acc']}
    done.write_text(json.dumps(result, indent=2))
    row.update(result)
    return row


@dataclass
class GridSummary:
    rows: List[dict]
    aggregate_path: Path
    table_path: Path

    @property
    def failed(self):
        return [r['cell'] for r in self.rows if r.get('status') != 'ok']


def run_grid(manifest, workers=None):
    """Execute every cell (in worker processes when workers > 1) and write the aggregate CSVs."""
    workers = manifest.workers if workers is None else workers
    cells = manifest.cells()
    Path(manifest.output_dir).mkdir(parents=True, exist_ok=True)
    logger.info(f"🧪 grid {manifest.experiment_id}: {len(cells)} cells, {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, [manifest] * len(cells), cells))
    else:
        rows = [run_cell(manifest, cell) for cell in cells]
    return write_grid_tables(manifest.output_dir, rows)


def write_grid_tables(output_dir, rows):
    output_dir = Path(output_dir)
    frame = pd.DataFrame(rows)
    for column in ('status', 'method', 'test_accuracy', 'silhouette', 'best_val_acc', 'error'):
        if column not in frame:
            frame[column] = None
    aggregate_path = output_dir / 'aggregate.csv'
    frame.to_csv(aggregate_path, index=False)

    ok = frame[frame['status'] == 'ok'].copy()
    table_path = output_dir / 'table.csv'
    if len(ok):
        ok['test_accuracy'] = ok['test_accuracy'].astype(float)
        ok['method'] = ok['method'] + ' [' + ok['schedule'] + ']'
        table = ok.pivot_table(index='method', columns='labeled_ratio', values='test_accuracy', aggfunc='mean')
        table.to_csv(table_path)
    else:
        pd.DataFrame().to_csv(table_path)
    summary = GridSummary(rows, aggregate_path, table_path)
    if summary.failed:
        logger.error(f"❌ {len(summary.failed)} cell(s) failed: {summary.failed}")
    return summary


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def load_run(run_dir):
    run_dir = Path(run_dir)
    report_file = run_dir / REPORT_FILE
    if not report_file.exists():
        raise FileNotFoundError(f"{run_dir}: no {REPORT_FILE}")
    report = TrainReport.read_jsonl(report_file)
    if not len(report):
        raise ValueError(f"{report_file}: empty report")
    summary_file = run_dir / RUN_SUMMARY
    summary = json.loads(summary_file.read_text()) if summary_file.exists() else {}
    return report, summary


def _fmt(value, digits=4):
    return '-' if value is None or (isinstance(value, float) and np.isnan(value)) else f"{value:.{digits}f}"


def build_report(run_dirs, out_dir):
    """Loss curves, accuracy-vs-ratio series and a markdown summary for a set of runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves, rows = None, []
    names = _unique_names(run_dirs)
    for name, run_dir in zip(names, run_dirs):
        report, summary = load_run(run_dir)
        frame = pd.DataFrame({'t': [r['t'] for r in report.records], name: report.losses()})
        curves = frame if curves is None else curves.merge(frame, on='t', how='outer')
        losses = report.losses()
        rows.append({
            'run': name,
            'method': summary.get('method', '-'),
            'labeled_ratio': summary.get('labeled_ratio'),
            'iterations': len(report),
            'initial_loss': losses[0],
            'final_loss': losses[-1],
            'best_val_acc': summary.get('best_val_acc'),
            'test_accuracy': summary.get('test_accuracy'),
            'silhouette': summary.get('silhouette'),
            'mean_wall_ms': float(np.mean([r['wall_ms'] for r in report.records])),
        })
    curves = curves.sort_values('t')
    curves.to_csv(out_dir / 'loss_curves.csv', index=False)
    runs = pd.DataFrame(rows)
    runs[['run', 'method', 'labeled_ratio', 'test_accuracy', 'silhouette']].to_csv(
        out_dir / 'accuracy_vs_ratio.csv', index=False)
    (out_dir / 'summary.md').write_text(_markdown(runs))
    logger.info(f"📊 report written to {out_dir}")
    return runs


def _unique_names(run_dirs):
    names, seen = [], {}
    for run_dir in run_dirs:
        base = Path(run_dir).name or 'run'
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return names


def _markdown(runs):
    lines = ['# Run summary', '',
             '| run | method | labeled ratio | iterations | initial loss | final loss | best val acc | '
             'test acc | silhouette | ms/iteration |',
             '|---|---|---|---|---|---|---|---|---|---|']
    for r in runs.to_dict('records'):
        lines.append(f"| {r['run']} | {r['method']} | {_fmt(r['labeled_ratio'], 2)} | {r['iterations']} | "
                     f"{_fmt(r['initial_loss'])} | {_fmt(r['final_loss'])} | {_fmt(r['best_val_acc'])} | "
                     f"{_fmt(r['test_accuracy'])} | {_fmt(r['silhouette'])} | {_fmt(r['mean_wall_ms'], 1)} |")
    scored = runs.dropna(subset=['test_accuracy', 'labeled_ratio'])
    if len(scored):
        table = scored.pivot_table(index='method', columns='labeled_ratio', values='test_accuracy', aggfunc='mean')
        lines += ['', '## Test accuracy by labeled ratio', '',
                  '| method | ' + ' | '.join(f"{c:.0%}" for c in table.columns) + ' |',
                  '|---|' + '---|' * len(table.columns)]
        for method, values in table.iterrows():
            lines.append(f"| {method} | " + ' | '.join(_fmt(v) for v in values) + ' |')
    return '\n'.join(lines) + '\n'


def cpu_count():
    return os.cpu_count() or 1
