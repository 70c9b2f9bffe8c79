"""
Test suite for the cldis command line, run end to end on tiny configurations
"""
import os

import pytest
import torch
from PIL import Image

from cldis import __version__
from cldis.cldis_args import RunConfig
from cldis.cldis_cli import VERBS, main, usage
from cldis.cldis_data import load_dataset
from cldis.cldis_io import read_manifest, read_table


@pytest.fixture
def config_file(tiny_config_file):
    return tiny_config_file


@pytest.fixture
def run_dir(tmp_path):
    return str(tmp_path / 'run')


@pytest.fixture
def deterministic(monkeypatch):
    monkeypatch.setenv('CLDIS_DETERMINISTIC', '1')
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def trained_run(config_file, run_dir):
    for phase in ('1', '2', '3'):
        assert main(['train', '--config', config_file, '--phase', phase]) == 0
    return run_dir


class TestUsage:
    """
    Test the verb dispatch
    """
    def test_no_arguments(self, capsys):
        assert main([]) == 2
        assert 'usage: cldis' in capsys.readouterr().out

    def test_help(self, capsys):
        assert main(['--help']) == 0
        out = capsys.readouterr().out
        for verb in VERBS:
            assert verb in out

    def test_version(self, capsys):
        assert main(['--version']) == 0
        assert capsys.readouterr().out.strip() == __version__

    def test_unknown_verb(self):
        assert main(['fly']) == 2

    def test_verb_help(self):
        assert main(['train', '--help']) == 0

    def test_usage_lists_verbs(self):
        assert all(verb in usage() for verb in VERBS)


class TestConfiguration:
    """
    Test config files and flag validation
    """
    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / 'bad.txt'
        path.write_text("latent_dims=4\n")
        assert main(['train', '--config', str(path)]) == 2

    def test_unknown_flag(self, config_file):
        assert main(['train', '--config', config_file, '--latent_dims', '4']) == 2

    def test_invalid_constraint(self, config_file):
        assert main(['train', '--config', config_file, '--num_directions', '9']) == 2

    def test_flags_override_config(self, config_file, run_dir):
        assert main(['train', '--config', config_file, '--seed', '11']) == 0
        resolved = RunConfig.from_file(os.path.join(run_dir, 'config.txt'))
        assert resolved.training.seed == 11
        assert resolved.model.latent_dim == 4
        manifest = read_manifest(run_dir, 'run_manifest')
        assert manifest['seed'] == '11'
        assert 'torch_version' in manifest


class TestGenerateData:
    """
    Test dataset export from the command line
    """
    def test_generate(self, config_file, run_dir):
        assert main(['generate-data', '--config', config_file]) == 0
        dataset = load_dataset(os.path.join(run_dir, 'dataset'))
        assert len(dataset) == 2 * 2 * 4 * 4 * 2
        assert dataset.spec.image_size == (1, 16, 16)

    def test_refuses_nonempty_target(self, config_file, run_dir):
        assert main(['generate-data', '--config', config_file]) == 0
        assert main(['generate-data', '--config', config_file]) == 2
        assert main(['generate-data', '--config', config_file, '--overwrite']) == 0

    def test_train_from_exported_data(self, config_file, tmp_path):
        data_dir = str(tmp_path / 'data')
        assert main(['generate-data', '--config', config_file, '--data_out', data_dir]) == 0
        assert main(['train', '--config', config_file, '--data_dir', data_dir]) == 0


class TestTraining:
    """
    Test the three training phases and their dependencies
    """
    def test_phase2_needs_phase1(self, config_file):
        assert main(['train', '--config', config_file, '--phase', '2']) == 3

    def test_phase3_needs_phase2(self, config_file):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['train', '--config', config_file, '--phase', '3']) == 3

    def test_all_phases(self, trained_run):
        for phase in ('phase1', 'phase2', 'phase3'):
            assert os.path.isfile(os.path.join(trained_run, phase, 'manifest'))
        log = read_table(os.path.join(trained_run, 'train_log.csv'))
        assert list(log['step']) == [1, 2, 3, 4, 5, 6]
        c_dyn = read_table(os.path.join(trained_run, 'c_dyn.csv'))
        assert list(c_dyn['step']) == [4, 5, 6]
        assert (c_dyn['value'] <= 25.0).all()
        navigation = read_table(os.path.join(trained_run, 'navigation_log.csv'))
        assert list(navigation['step']) == [1, 2]
        assert read_manifest(os.path.join(trained_run, 'phase2'))['phase'] == '2'

    def test_phase1_refuses_existing_checkpoint(self, config_file):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['train', '--config', config_file, '--phase', '1']) == 2

    def test_resume_continues_steps(self, config_file, run_dir):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['train', '--config', config_file, '--phase', '1', '--phase1_steps', '5',
                     '--resume', os.path.join(run_dir, 'phase1')]) == 0
        log = read_table(os.path.join(run_dir, 'train_log.csv'))
        assert list(log['step']) == [1, 2, 3, 4, 5]
        assert read_manifest(os.path.join(run_dir, 'phase1'))['step'] == '5'

    def test_phase2_needs_complete_pretraining(self, config_file):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['train', '--config', config_file, '--phase', '2', '--phase1_steps', '10']) == 3


class TestEvaluate:
    """
    Test the evaluation report
    """
    def test_report(self, trained_run, config_file):
        assert main(['evaluate', '--config', config_file, '--threshold', '0.3']) == 0
        out_dir = os.path.join(trained_run, 'evaluation', 'phase2')
        report = read_manifest(out_dir, 'report.txt')
        assert report['threshold'] == '0.3'
        assert report['directions'] == 'learned'
        assert report['step'] == '6'
        for key in ('factor_vae', 'dci_disentanglement', 'dci_completeness', 'dci_informativeness',
                    'flow_ratio', 'flow_pairs', 'locality_0_mean', 'locality_1_max'):
            assert key in report
        assert 0.0 <= float(report['factor_vae']) <= 1.0
        curve = read_table(os.path.join(out_dir, 'flow_curve.csv'))
        assert list(curve['threshold']) == [0.25, 0.5, 0.75]
        assert len(read_table(os.path.join(out_dir, 'flow_pairs.csv'))) == 4
        assert os.path.isfile(os.path.join(out_dir, 'locality_1.png'))

    def test_directions_learned_on_phase1(self, config_file, run_dir):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['train', '--config', config_file, '--phase', '3', '--navigation_source', 'phase1']) == 0
        assert read_manifest(os.path.join(run_dir, 'phase3'))['source'] == 'phase1'
        assert main(['evaluate', '--config', config_file, '--checkpoint', 'phase1', '--metrics', 'flow']) == 0
        report = read_manifest(os.path.join(run_dir, 'evaluation', 'phase1'), 'report.txt')
        assert report['directions'] == 'learned'
        assert main(['traverse', '--config', config_file, '--grid_name', 'phase1.png']) == 0
        assert os.path.isfile(os.path.join(run_dir, 'phase1.png'))

    def test_phase1_uses_axes(self, config_file, run_dir):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['evaluate', '--config', config_file, '--checkpoint', 'phase1',
                     '--metrics', 'flow']) == 0
        report = read_manifest(os.path.join(run_dir, 'evaluation', 'phase1'), 'report.txt')
        assert report['directions'] == 'axes'
        assert 'factor_vae' not in report

    def test_oracle_encoder(self, config_file, run_dir):
        assert main(['train', '--config', config_file, '--phase', '1']) == 0
        assert main(['evaluate', '--config', config_file, '--checkpoint', 'phase1', '--encoder', 'oracle',
                     '--metrics', 'dci']) == 0
        report = read_manifest(os.path.join(run_dir, 'evaluation', 'phase1'), 'report.txt')
        assert float(report['dci_disentanglement']) >= 0.95

    def test_missing_checkpoint(self, config_file):
        assert main(['evaluate', '--config', config_file]) == 3

    def test_bad_threshold(self, config_file):
        assert main(['evaluate', '--config', config_file, '--threshold', '1.5']) == 2


class TestTraverse:
    """
    Test traversal grids
    """
    def test_grid(self, trained_run, config_file):
        assert main(['traverse', '--config', config_file, '--direction', '1', '--image_index', '3']) == 0
        with Image.open(os.path.join(trained_run, 'traversal.png')) as grid:
            assert grid.size == (16, 5 * 16)

    def test_custom_magnitudes(self, trained_run, config_file):
        assert main(['traverse', '--config', config_file, '--magnitudes', '-1', '1',
                     '--grid_name', 'two.png']) == 0
        with Image.open(os.path.join(trained_run, 'two.png')) as grid:
            assert grid.size == (16, 2 * 16)

    def test_direction_out_of_range(self, trained_run, config_file):
        assert main(['traverse', '--config', config_file, '--direction', '2']) == 1

    def test_needs_directions(self, config_file):
        assert main(['traverse', '--config', config_file]) == 3


class TestReproducibility:
    """
    Test that commands are deterministic given the configuration and seed
    """
    def test_dataset_bytes(self, config_file, tmp_path):
        for name in ('a', 'b'):
            assert main(['generate-data', '--config', config_file, '--data_out', str(tmp_path / name)]) == 0
        assert (tmp_path / 'a' / 'factors.i32').read_bytes() == (tmp_path / 'b' / 'factors.i32').read_bytes()

    def test_same_seed_same_losses(self, config_file, tmp_path):
        for name in ('first', 'second'):
            assert main(['train', '--config', config_file, '--out', str(tmp_path / name)]) == 0
        first = read_table(str(tmp_path / 'first' / 'train_log.csv'))
        second = read_table(str(tmp_path / 'second' / 'train_log.csv'))
        tolerance = float(read_manifest(str(tmp_path / 'first'), 'run_manifest')['loss_tolerance'])
        assert (first['l_diff'] - second['l_diff']).abs().max() <= tolerance
        assert (first['l_fd'] - second['l_fd']).abs().max() <= tolerance

    def test_deterministic_checkpoints_are_identical(self, config_file, tmp_path, deterministic):
        for name in ('first', 'second'):
            out = str(tmp_path / name)
            for phase in ('1', '2'):
                assert main(['train', '--config', config_file, '--out', out, '--phase', phase]) == 0
        assert read_manifest(str(tmp_path / 'first'), 'run_manifest')['deterministic'] == '1'
        first, second = tmp_path / 'first' / 'phase2', tmp_path / 'second' / 'phase2'
        names = sorted(path.name for path in first.iterdir())
        assert names == sorted(path.name for path in second.iterdir())
        for name in names:
            assert (first / name).read_bytes() == (second / name).read_bytes(), name

    def test_traverse_bytes(self, trained_run, config_file):
        for name in ('a.png', 'b.png'):
            assert main(['traverse', '--config', config_file, '--grid_name', name]) == 0
        with open(os.path.join(trained_run, 'a.png'), 'rb') as a, open(os.path.join(trained_run, 'b.png'), 'rb') as b:
            assert a.read() == b.read()


class TestSweeps:
    """
    Test the capacity and component sweeps on one seed
    """
    def test_capacity(self, config_file, run_dir):
        assert main(['sweep-capacity', '--config', config_file, '--seeds', '0',
                     '--capacity_grid', '2,5', '10,25']) == 0
        table = read_table(os.path.join(run_dir, 'capacity_sweep.csv'))
        assert len(table) == 2
        assert list(table['c_max']) == [5.0, 25.0]
        for column in ('seeds', 'factor_vae_mean', 'factor_vae_std', 'dci_mean', 'dci_std'):
            assert column in table.columns
        assert len(read_table(os.path.join(run_dir, 'capacity_sweep_runs.csv'))) == 2
        assert os.path.isfile(os.path.join(run_dir, 'seed0', 'capacity_10_25', 'phase2', 'manifest'))

    def test_bad_grid(self, config_file):
        assert main(['sweep-capacity', '--config', config_file, '--capacity_grid', '10']) == 2

    def test_ablation(self, config_file, run_dir):
        assert main(['sweep-ablation', '--config', config_file, '--seeds', '0']) == 0
        table = read_table(os.path.join(run_dir, 'ablation.csv'))
        assert list(table['variant']) == ['baseline', 'navigation', 'distillation', 'feedback', 'full']
        for column in ('factor_vae_mean', 'dci_mean', 'flow_mean', 'flow_std'):
            assert column in table.columns
        runs = read_table(os.path.join(run_dir, 'ablation_runs.csv')).set_index('variant')
        assert runs.loc['baseline', 'directions'] == 'axes'
        for variant in ('navigation', 'distillation', 'feedback', 'full'):
            assert runs.loc[variant, 'directions'] == 'learned'
        navigation_dir = os.path.join(run_dir, 'seed0', 'navigation')
        assert read_manifest(os.path.join(navigation_dir, 'phase3'))['source'] == 'phase1'
        assert not os.path.exists(os.path.join(navigation_dir, 'phase2'))
