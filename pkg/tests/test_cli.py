"""
Tests for the mlrep command line
================================

Every verb end to end on a narrow synthetic corpus, and the exit code of each
error family.
"""

import json

import pandas as pd
import pytest

from mlrep.cli import main
from mlrep.errors import EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE


@pytest.fixture
def run_config(tmp_path):
    """Config file over one narrow synthetic dataset plus its output directory"""
    data = tmp_path / 'data' / 'mini'
    document = {
        'datasets': [{'name': 'mini', 'dir': str(data)}],
        'train': {'batch_size': 32, 'max_epochs': 2, 'early_stop_patience': 2},
        'synthetic': [{'name': 'mini', 'dir': str(data), 'n_utterances': 120,
                       'modality_widths': {'audio': 8, 'vision': 6, 'text': 16}}],
        'ablation': {'modalities': [['text'], ['audio', 'vision', 'text']]},
    }
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(document))
    return path, data, tmp_path / 'out'


# =============================================================================
# Verbs
# =============================================================================

class TestVerbs:

    def test_count_params_reference(self, tmp_path, capsys):
        assert main(['count-params', '--out', str(tmp_path)]) == EXIT_OK
        frame = pd.read_csv(tmp_path / 'parameters.csv')
        counts = dict(zip(frame['layer'], frame['parameters']))
        assert counts['encoder_total'] == 256_202
        assert counts['encoder+lr_1_task'] == 256_453
        assert counts['encoder+lr_4_task'] == 257_206
        assert '256202' in capsys.readouterr().out

    def test_count_params_full_batchnorm(self, tmp_path, capsys):
        assert main(['count-params', '--full-batchnorm', '--out', str(tmp_path)]) == EXIT_OK
        frame = pd.read_csv(tmp_path / 'parameters.csv')
        assert dict(zip(frame['layer'], frame['parameters']))['encoder_total'] == 256_222
        assert '256,202 without it' in capsys.readouterr().out

    def test_gradcheck_passes(self, tmp_path):
        assert main(['gradcheck', '--trials', '2', '--out', str(tmp_path)]) == EXIT_OK
        frame = pd.read_csv(tmp_path / 'gradcheck.csv')
        assert frame['passed'].all()
        assert len(frame) == 9

    def test_full_pipeline(self, run_config):
        config, data, out = run_config
        common = ['--config', str(config), '--out', str(out)]

        assert main(['synth'] + common) == EXIT_OK
        assert (data / 'train.mlrd').is_file()

        assert main(['train-cae'] + common) == EXIT_OK
        for name in ('cae.mlrw', 'encoder.mlrw', 'history.csv', 'run.json'):
            assert (out / name).is_file()
        assert json.loads((out / 'run.json').read_text())['train_count'] == 84

        assert main(['embed', '--weights', str(out / 'encoder.mlrw'),
                     '--dataset', str(data / 'train.mlrd'), str(data / 'test.mlrd')] + common) == EXIT_OK
        embeddings = out / 'embeddings' / 'mini'
        assert (embeddings / 'test.mlrd').is_file()

        assert main(['train-clf', '--train', str(embeddings / 'train.mlrd'),
                     '--test', str(embeddings / 'test.mlrd'), '--append-to', str(out / 'cae.mlrw')]
                    + common) == EXIT_OK
        metrics = pd.read_csv(out / 'metrics.csv')
        assert list(metrics['task']) == ['sentiment']
        assert 0.0 <= metrics['acc2'][0] <= 1.0

        assert main(['eval', '--classifier', str(out / 'classifier.mlrw'),
                     '--embeddings', str(embeddings / 'test.mlrd')] + common) == EXIT_OK
        evaluated = pd.read_csv(out / 'eval_metrics.csv')
        assert evaluated['acc2'][0] == pytest.approx(metrics['acc2'][0])

        # the appended classifier leaves the autoencoder loadable
        assert main(['count-params', '--weights', str(out / 'cae.mlrw')] + common) == EXIT_OK

    def test_ablate(self, run_config):
        config, _, out = run_config
        common = ['--config', str(config), '--out', str(out)]
        assert main(['synth'] + common) == EXIT_OK
        assert main(['ablate'] + common) == EXIT_OK
        frame = pd.read_csv(out / 'ablation.csv')
        assert list(frame['combination']) == ['text', 'audio+vision+text']
        assert list(frame.columns) == ['kind', 'combination', 'train_count', 'best_val_mse', 'acc2', 'f1']

    def test_synth_without_config(self, tmp_path):
        assert main(['synth', '--name', 'quick', '--n', '40', '--schema', 'emotions', '--out', str(tmp_path)]) == EXIT_OK
        manifest = (tmp_path / 'data' / 'quick' / 'train.mlrd').read_text()
        assert 'labels: happy,sad,angry,neutral' in manifest


# =============================================================================
# Exit codes
# =============================================================================

class TestExitCodes:

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps({'epochs': 3}))
        assert main(['count-params', '--config', str(path), '--out', str(tmp_path)]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(['count-params', '--config', str(tmp_path / 'none.json')]) == EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        path = tmp_path / 'run.json'
        path.write_text(json.dumps({'datasets': [{'name': 'ghost', 'dir': str(tmp_path / 'ghost')}]}))
        assert main(['train-cae', '--config', str(path), '--out', str(tmp_path / 'out')]) == EXIT_DATA

    def test_corrupted_gradient(self, tmp_path):
        assert main(['gradcheck', '--trials', '2', '--corrupt', 'conv2d=0.1', '--out', str(tmp_path)]) == EXIT_NUMERIC

    def test_malformed_corrupt_flag(self, tmp_path):
        assert main(['gradcheck', '--trials', '1', '--corrupt', 'conv2d', '--out', str(tmp_path)]) == EXIT_CONFIG
        assert main(['gradcheck', '--trials', '1', '--corrupt', 'dropout=0.1', '--out', str(tmp_path)]) == EXIT_CONFIG

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / 'file.txt'
        blocker.write_text('x')
        assert main(['count-params', '--out', str(blocker / 'out')]) == EXIT_IO

    def test_incompatible_embedding_input(self, run_config, tmp_path):
        config, data, out = run_config
        common = ['--config', str(config), '--out', str(out)]
        assert main(['synth'] + common) == EXIT_OK
        assert main(['train-cae'] + common) == EXIT_OK
        assert main(['synth', '--name', 'wide', '--n', '20', '--out', str(tmp_path / 'wide')]) == EXIT_OK
        wide = tmp_path / 'wide' / 'data' / 'wide' / 'test.mlrd'
        assert main(['embed', '--weights', str(out / 'encoder.mlrw'), '--dataset', str(wide)] + common) == EXIT_DATA

    def test_missing_verb_is_a_usage_error(self):
        assert main([]) == EXIT_USAGE

    def test_bad_flag_value_is_a_usage_error(self, tmp_path):
        assert main(['count-params', '--seed', 'abc', '--out', str(tmp_path)]) == EXIT_USAGE
        assert main(['ablate', '--no-such-flag']) == EXIT_USAGE

    def test_help_exits_cleanly(self):
        assert main(['--help']) == EXIT_OK

    def test_unknown_log_level_is_a_configuration_error(self, tmp_path):
        assert main(['count-params', '--log-level', 'LOUD', '--out', str(tmp_path)]) == EXIT_CONFIG
        assert not (tmp_path / 'parameters.csv').exists()
