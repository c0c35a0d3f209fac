"""
Testes da camada de experimentos: config única, sementes derivadas, grid e relatórios (experiment)
"""

import json

import pandas as pd
import pytest

from modules import experiment, sigkit
from modules.experiment import ExperimentConfig, ExperimentManifest, GridCell
from modules.mat_trainer import TrainConfig

TINY = {
    'dataset': {'num_classes': 3, 'sample_length': 32, 'per_class_count': 12, 'labeled_ratio': 0.5,
                'snr_db': 20.0, 'test_per_class_count': 4},
    'model': {'num_blocks': 2, 'channels': 4, 'kernel': 3, 'variant': 'short'},
    'train': {'iterations': 1, 'batch_size': 8},
}


def tiny_experiment(**train):
    data = json.loads(json.dumps(TINY))
    data['train'].update(train)
    return ExperimentConfig.from_dict(data)


def write_manifest(tmp_path, grid, **extra):
    manifest = {'experiment_id': 'tiny', 'config': TINY, 'output_dir': str(tmp_path / 'grid'), 'grid': grid}
    manifest.update(extra)
    path = tmp_path / 'manifest.json'
    path.write_text(json.dumps(manifest))
    return path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_derived_seeds_are_stable_and_distinct():
    assert experiment.derive_seed(0, 'sigkit') == experiment.derive_seed(0, 'sigkit')
    assert experiment.derive_seed(0, 'sigkit') != experiment.derive_seed(0, 'mat_trainer')
    assert experiment.derive_seed(0, 'sigkit') != experiment.derive_seed(1, 'sigkit')
    assert 0 <= experiment.derive_seed(5, 'sigkit') < 2 ** 64


def test_model_geometry_defaults_from_dataset():
    exp = tiny_experiment()
    assert exp.model.num_classes == 3
    assert exp.model.input_length == 32


@pytest.mark.parametrize("data", [
    {'optimizer': {}},
    {'train': {'momentum': 0.9}},
    {'dataset': {'labeled_ratio': 0.0}},
    {'model': {'kernel': 2}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(data)


def test_config_file_round_trip(tmp_path):
    exp = tiny_experiment(metric='proxy_anchor')
    exp.save(tmp_path / 'exp.json')
    loaded = ExperimentConfig.load(tmp_path / 'exp.json')
    assert loaded.to_dict() == exp.to_dict()
    assert loaded.config_hash() == exp.config_hash()


def test_invalid_json_is_a_config_error(tmp_path):
    (tmp_path / 'broken.json').write_text('{"train": ')
    with pytest.raises(ValueError):
        ExperimentConfig.load(tmp_path / 'broken.json')


def test_with_seed_derives_component_seeds_on_a_copy():
    exp = tiny_experiment()
    seeded = exp.with_seed(3)
    assert seeded.dataset.master_seed == experiment.derive_seed(3, 'sigkit')
    assert seeded.train.seed == experiment.derive_seed(3, 'mat_trainer')
    assert exp.train.seed == 0


def test_overrides():
    exp = tiny_experiment().with_overrides({'train.metric': 'none', 'dataset.labeled_ratio': 0.2})
    assert exp.train.metric == 'none'
    assert exp.dataset.labeled_ratio == 0.2
    with pytest.raises(ValueError):
        tiny_experiment().with_overrides({'optimizer.lr': 0.1})
    with pytest.raises(ValueError):
        tiny_experiment().with_overrides({'train.tau': 2.0})


@pytest.mark.parametrize("train,label", [
    (dict(), 'MAT-CL'),
    (dict(metric='proxy_anchor'), 'MAT-PA'),
    (dict(metric='none'), 'MAT w/o SSML'),
    (dict(vat_enabled=False), 'MAT-CL w/o VAT'),
    (dict(unlabeled_enabled=False), 'MAT-CL w/o UTD'),
    (dict(schedule='simultaneous'), 'MAT-CL sim'),
    (dict(metric_unlabeled=False), 'MAT-CL (ML)'),
    (dict(metric='none', vat_enabled=False, unlabeled_enabled=False), 'CVNN'),
])
def test_method_labels(train, label):
    assert experiment.method_label(TrainConfig(**train)) == label


@pytest.mark.parametrize("ablation,key,value", [
    ('no_ssml', 'train.metric', 'none'),
    ('no_vat', 'train.vat_enabled', False),
    ('no_utd', 'train.unlabeled_enabled', False),
])
def test_grid_cell_ablation_overrides(ablation, key, value):
    cell = GridCell('c', 0.1, 'center', ablation, 'alternating', 0)
    assert cell.overrides()[key] == value


# ---------------------------------------------------------------------------
# one run
# ---------------------------------------------------------------------------

def test_run_experiment_writes_summary(tmp_path):
    summary = experiment.run_experiment(tiny_experiment(), tmp_path / 'run')
    stored = json.loads((tmp_path / 'run' / 'run.json').read_text())
    assert stored['method'] == 'MAT-CL'
    assert stored['iterations'] == 1
    assert 0.0 <= stored['test_accuracy'] <= 1.0
    assert stored['evaluation']['pseudo_label_coverage'] is not None
    assert summary['config_hash'] == stored['config_hash']
    assert (tmp_path / 'run' / 'best.ckpt').exists()


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def test_manifest_defaults_and_cells(tmp_path):
    manifest = ExperimentManifest.load(write_manifest(tmp_path, {'metric': ['center', 'proxy_anchor'],
                                                                 'seeds': [0, 1]}))
    assert manifest.axes['labeled_ratio'] == [0.5]
    assert manifest.axes['ablation'] == ['full']
    cells = manifest.cells()
    assert len(cells) == 4
    assert cells[0].cell_id == 'r0.5_center_full_alternating_s0'
    assert len({c.cell_id for c in cells}) == 4


@pytest.mark.parametrize("grid,extra", [
    ({'optimizer': ['adam']}, {}),
    ({'ablation': ['no_metric']}, {}),
    ({'seeds': []}, {}),
    ({}, {'retries': 2}),
])
def test_manifest_validation(tmp_path, grid, extra):
    with pytest.raises(ValueError):
        ExperimentManifest.load(write_manifest(tmp_path, grid, **extra))


def test_grid_runs_every_cell_once(tmp_path, monkeypatch):
    manifest = ExperimentManifest.load(write_manifest(tmp_path, {'metric': ['center', 'proxy_anchor'],
                                                                 'ablation': ['full', 'no_vat']}))
    summary = experiment.run_grid(manifest, workers=1)
    assert summary.failed == []
    assert len(summary.rows) == 4
    for cell in manifest.cells():
        assert (manifest.output_dir / cell.cell_id / 'DONE.json').exists()
    aggregate = pd.read_csv(summary.aggregate_path)
    assert len(aggregate) == 4
    table = pd.read_csv(summary.table_path, index_col=0)
    assert set(table.index) == {'MAT-CL [alternating]', 'MAT-PA [alternating]',
                                'MAT-CL w/o VAT [alternating]', 'MAT-PA w/o VAT [alternating]'}

    def unexpected(*args, **kwargs):
        raise AssertionError('finished cells must not run again')

    monkeypatch.setattr(experiment, 'run_experiment', unexpected)
    again = experiment.run_grid(manifest, workers=1)
    assert again.failed == []
    assert [r['test_accuracy'] for r in again.rows] == [r['test_accuracy'] for r in summary.rows]


def test_fixed_dataset_rejects_several_ratios(tmp_path):
    with pytest.raises(ValueError, match='labeled_ratio'):
        ExperimentManifest.load(write_manifest(tmp_path, {'labeled_ratio': [0.25, 1.0]},
                                               dataset_path=str(tmp_path / 'ds.matds')))


def test_fixed_dataset_rows_carry_the_dataset_ratio(tmp_path):
    exp = tiny_experiment()
    dataset = sigkit.normalize_min_max(sigkit.build_dataset(exp.dataset))
    sigkit.save_dataset(dataset, tmp_path / 'ds.matds')
    manifest = ExperimentManifest.load(write_manifest(tmp_path, {'labeled_ratio': [0.25]},
                                                      dataset_path=str(tmp_path / 'ds.matds')))
    summary = experiment.run_grid(manifest, workers=1)
    assert summary.failed == []
    assert summary.rows[0]['labeled_ratio'] == 0.5
    table = pd.read_csv(summary.table_path, index_col=0)
    assert [float(c) for c in table.columns] == [0.5]
    stored = json.loads((manifest.output_dir / 'r0.25_center_full_alternating_s0' / 'run.json').read_text())
    assert stored['labeled_ratio'] == 0.5


def test_failing_cell_does_not_stop_the_grid(tmp_path):
    manifest = ExperimentManifest.load(write_manifest(tmp_path, {'labeled_ratio': [0.01, 0.5]}))
    summary = experiment.run_grid(manifest, workers=1)
    assert summary.failed == ['r0.01_center_full_alternating_s0']
    failed = next(r for r in summary.rows if r['status'] == 'failed')
    assert 'StratificationError' in failed['error']
    assert not (manifest.output_dir / failed['cell'] / 'DONE.json').exists()
    assert (manifest.output_dir / 'r0.5_center_full_alternating_s0' / 'DONE.json').exists()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def test_report_joins_runs(tmp_path):
    experiment.run_experiment(tiny_experiment(iterations=2), tmp_path / 'alt')
    experiment.run_experiment(tiny_experiment(iterations=1, metric='none'), tmp_path / 'novat')
    runs = experiment.build_report([tmp_path / 'alt', tmp_path / 'novat'], tmp_path / 'report')

    curves = pd.read_csv(tmp_path / 'report' / 'loss_curves.csv')
    assert list(curves.columns) == ['t', 'alt', 'novat']
    assert curves['t'].tolist() == [1, 2]
    assert pd.isna(curves.loc[1, 'novat'])
    assert runs['method'].tolist() == ['MAT-CL', 'MAT w/o SSML']
    summary = (tmp_path / 'report' / 'summary.md').read_text()
    assert '| alt | MAT-CL |' in summary
    assert 'Test accuracy by labeled ratio' in summary
    assert (tmp_path / 'report' / 'accuracy_vs_ratio.csv').exists()


def test_report_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        experiment.build_report([tmp_path / 'missing'], tmp_path / 'out')
    (tmp_path / 'empty').mkdir()
    (tmp_path / 'empty' / 'report.jsonl').write_text('')
    with pytest.raises(ValueError):
        experiment.build_report([tmp_path / 'empty'], tmp_path / 'out')
