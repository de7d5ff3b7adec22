import json

import pandas as pd
import pytest

from app import main
from services.reporting import MANIFEST_NAME, sha256_file

EXPERIMENT = """
model = "econ-s"
bits = [4]
variants = ["baseline"]
seeds = [0]
dataset_size = 16

[train]
epochs = 1
batch_size = 8
"""

RUN = 'econ-s_baseline_b4_s0'


def write_config(directory, text=EXPERIMENT):
    path = directory / 'exp.toml'
    path.write_text(text)
    return path


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    """Output directory of one tiny training run"""
    root = tmp_path_factory.mktemp('cli')
    out = root / 'out'
    assert main(['train', '--config', str(write_config(root)), '--out', str(out)]) == 0
    return out


@pytest.fixture(scope='module')
def pair(tmp_path_factory):
    """Checkpoints of seeds 0 and 1 trained on the same dataset"""
    root = tmp_path_factory.mktemp('pair')
    out = root / 'out'
    for seed in (0, 1):
        assert main(['train', '--config', str(write_config(root)), '--seed', str(seed), '--out', str(out)]) == 0
    return [str(out / f'econ-s_baseline_b4_s{seed}.llab') for seed in (0, 1)]


class TestTrain:
    """llab train"""

    def test_artifacts_and_manifest(self, trained):
        """Checkpoint, history and a manifest whose hashes match"""
        manifest = json.loads((trained / MANIFEST_NAME).read_text())
        paths = {f['path']: f['sha256'] for f in manifest['files']}
        assert set(paths) == {f'{RUN}.llab', f'{RUN}_history.csv'}
        for path, digest in paths.items():
            assert sha256_file(trained / path) == digest
        assert manifest['command'].startswith('llab train')
        assert list(pd.read_csv(trained / f'{RUN}_history.csv').columns) == ['epoch', 'train_loss', 'test_loss',
                                                                              'penalty']

    def test_rerun_is_byte_identical(self, trained, tmp_path):
        """The same config reproduces the same checkpoint bytes"""
        out = tmp_path / 'again'
        assert main(['train', '--config', str(write_config(tmp_path)), '--out', str(out)]) == 0
        assert (out / f'{RUN}.llab').read_bytes() == (trained / f'{RUN}.llab').read_bytes()


class TestMetricCommands:
    """Commands reading a checkpoint"""

    def test_hessian(self, trained, tmp_path):
        """Eigenpairs and trace land in hessian.json"""
        args = ['hessian', '--checkpoint', str(trained / f'{RUN}.llab'), '--k', '2', '--probes', '3',
                '--out', str(tmp_path)]
        assert main(args) == 0
        report = json.loads((tmp_path / 'hessian.json').read_text())
        assert report['k'] == 2 and len(report['eigenvalues']) == 2
        assert report['probes'] == 3

    def test_landscape(self, trained, tmp_path):
        """A random 1D slice writes CSV and SVG"""
        args = ['landscape', '--checkpoint', str(trained / f'{RUN}.llab'), '--directions', 'random',
                '--steps', '5', '--out', str(tmp_path)]
        assert main(args) == 0
        frame = pd.read_csv(tmp_path / 'landscape_random.csv')
        assert list(frame.columns) == ['alpha', 'beta', 'loss'] and len(frame) == 5
        assert (tmp_path / 'landscape_random.svg').exists()

    def test_corrupt(self, trained, tmp_path):
        """Gaussian noise sweep rows per level"""
        args = ['corrupt', '--checkpoint', str(trained / f'{RUN}.llab'), '--stressor', 'gaussian',
                '--levels', '0', '0.1', '--out', str(tmp_path)]
        assert main(args) == 0
        frame = pd.read_csv(tmp_path / 'corrupt.csv')
        assert frame['stressor_param'].tolist() == [0.0, 0.1]
        assert frame['n_seeds'].tolist() == [1, 1]

    def test_report_renders_csv(self, trained, tmp_path):
        """report --csv turns a history CSV into an SVG"""
        args = ['report', '--csv', str(trained / f'{RUN}_history.csv'), '--out', str(tmp_path)]
        assert main(args) == 0
        assert (tmp_path / f'{RUN}_history.svg').read_bytes().startswith(b'<?xml')

    def test_manifest_attributes_files_per_command(self, tmp_path):
        """A metric written next to its checkpoint leaves the training entries attributed to train"""
        out = tmp_path / 'run'
        assert main(['train', '--config', str(write_config(tmp_path)), '--out', str(out)]) == 0
        assert main(['hessian', '--checkpoint', str(out / f'{RUN}.llab'), '--k', '1', '--probes', '2']) == 0
        payload = json.loads((out / MANIFEST_NAME).read_text())
        by_path = {f['path']: f for f in payload['files']}
        assert by_path[f'{RUN}.llab']['command'].startswith('llab train')
        assert by_path[f'{RUN}_history.csv']['command'].startswith('llab train')
        assert by_path['hessian.json']['command'].startswith('llab hessian')
        assert payload['command'].startswith('llab hessian')

    def test_landscape_both_directions(self, trained, tmp_path):
        """--directions both writes a random and an eigen slice"""
        args = ['landscape', '--checkpoint', str(trained / f'{RUN}.llab'), '--directions', 'both',
                '--steps', '3', '--out', str(tmp_path)]
        assert main(args) == 0
        manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
        assert {f['path'] for f in manifest['files']} == {'landscape_random.csv', 'landscape_random.svg',
                                                         'landscape_eigen.csv', 'landscape_eigen.svg'}


class TestMultiCheckpointCommands:
    """Commands comparing trained instances"""

    def test_cka(self, pair, tmp_path):
        """Pairwise matrix plus an m sweep"""
        args = ['cka', '--checkpoints', *pair, '--m', '3', '--m-sweep', '2', '4', '--out', str(tmp_path)]
        assert main(args) == 0
        payload = json.loads((tmp_path / 'cka.json').read_text())
        assert payload['m'] == 3
        assert len(payload['pairwise']) == 2
        assert [entry['m'] for entry in payload['m_sweep']] == [2, 4]
        assert pd.read_csv(tmp_path / 'cka_sweep.csv')['value'].tolist() == [2, 4]

    def test_modeconn_with_linear_path(self, pair, tmp_path):
        """Bezier and straight-line reports plus max mc"""
        args = ['modeconn', '--checkpoints', *pair, '--bends', '1', '--epochs', '1', '--m', '5', '--linear',
                '--out', str(tmp_path)]
        assert main(args) == 0
        for name in ('modeconn.json', 'modeconn_linear.json', 'max_mc.json'):
            assert (tmp_path / name).exists()
        assert len(pd.read_csv(tmp_path / 'modeconn.csv')) == 5
        assert len(pd.read_csv(tmp_path / 'modeconn_linear.csv')) == 5
        linear = json.loads((tmp_path / 'modeconn_linear.json').read_text())
        assert linear['bends'] == 1

    def test_modeconn_needs_two_checkpoints(self, pair, tmp_path):
        """A single checkpoint is a configuration error"""
        assert main(['modeconn', '--checkpoints', pair[0], '--out', str(tmp_path)]) == 2

    def test_report_overlay(self, pair, tmp_path):
        """Eigen slices of both checkpoints share one CSV and SVG"""
        args = ['report', '--checkpoints', *pair, '--steps', '3', '--out', str(tmp_path)]
        assert main(args) == 0
        frame = pd.read_csv(tmp_path / 'overlay.csv')
        assert list(frame.columns) == ['series', 'alpha', 'loss']
        assert frame['series'].nunique() == 2 and len(frame) == 6
        assert (tmp_path / 'overlay.svg').exists()

    def test_report_overlay_needs_distinct_series(self, pair, tmp_path):
        """Checkpoints with the same bit width cannot be told apart by --series bits"""
        assert main(['report', '--checkpoints', *pair, '--series', 'bits', '--out', str(tmp_path)]) == 2


class TestSweep:
    """llab sweep"""

    def test_delta_grid(self, tmp_path):
        """One row per strength for each regularizer"""
        out = tmp_path / 'delta'
        args = ['sweep', '--config', str(write_config(tmp_path)), '--grid', 'delta', '--deltas', '0', '0.01',
                '--out', str(out)]
        assert main(args) == 0
        for regularizer in ('jacobian', 'orthogonal'):
            frame = pd.read_csv(out / f'delta_{regularizer}.csv')
            assert list(frame.columns) == ['delta', 'clean_loss', 'noisy_loss']
            assert frame['delta'].tolist() == [0.0, 0.01]
            assert (out / f'delta_{regularizer}.svg').exists()

    @pytest.mark.slow
    def test_default_grid(self, tmp_path):
        """Enabled metrics write their summaries and robustness curves"""
        # 48 samples leave 12 for the test split, enough for the default CKA sample count
        text = (EXPERIMENT.replace('seeds = [0]', 'seeds = [0, 1]').replace('dataset_size = 16', 'dataset_size = 48')
                + '\n[metrics]\nlandscape = false\nmodeconn = false\n')
        out = tmp_path / 'grid'
        assert main(['sweep', '--config', str(write_config(tmp_path, text)), '--out', str(out)]) == 0
        assert len(pd.read_csv(out / 'hessian_summary.csv')) == 2
        assert len(pd.read_csv(out / 'cka_summary.csv')) == 1
        for stressor in ('gaussian', 'salt-pepper', 'bitflip-random', 'bitflip-fkeras'):
            curve = pd.read_csv(out / f'robustness_{stressor}.csv')
            assert curve['n_seeds'].unique().tolist() == [2]
        assert not (out / 'modeconn_summary.csv').exists()

    @pytest.mark.slow
    def test_rerun_is_byte_identical(self, tmp_path):
        """The same seeds reproduce every robustness CSV byte for byte"""
        text = EXPERIMENT + '\n[metrics]\nlandscape = false\ncka = false\nmodeconn = false\n'
        config = write_config(tmp_path, text)
        outputs = [tmp_path / 'first', tmp_path / 'second']
        for out in outputs:
            assert main(['sweep', '--config', str(config), '--out', str(out)]) == 0
        for stressor in ('gaussian', 'salt-pepper', 'bitflip-random', 'bitflip-fkeras'):
            name = f'robustness_{stressor}.csv'
            assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


class TestExitCodes:
    """Failures map onto exit codes with a diagnostic line"""

    def test_bad_config(self, tmp_path, capsys):
        """Unknown keys exit 2"""
        config = write_config(tmp_path, 'model = "econ-s"\nlearning_rate = 3\n')
        assert main(['train', '--config', str(config), '--out', str(tmp_path / 'out')]) == 2
        err = capsys.readouterr().err
        assert 'code=2 kind=ConfigurationError' in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        """Unreadable checkpoints exit 4"""
        assert main(['hessian', '--checkpoint', str(tmp_path / 'absent.llab')]) == 4
        assert 'kind=CheckpointError' in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        """I/O failures outside checkpoints also exit 4"""
        assert main(['train', '--config', str(tmp_path / 'absent.toml')]) == 4

    def test_empty_report_csv(self, tmp_path):
        """An empty CSV is a configuration error"""
        path = tmp_path / 'empty.csv'
        path.write_text('')
        assert main(['report', '--csv', str(path)]) == 2

    def test_usage_error(self):
        """argparse failures exit 2"""
        assert main(['landscape']) == 2
        assert main([]) == 2
