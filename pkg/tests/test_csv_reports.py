"""
Tests for csv_reports
=====================
"""

import pandas as pd
import pytest

from mlrep.cae_model import CAEArchitecture, count_parameters
from mlrep.csv_reports import CsvReporter
from mlrep.errors import ReportFormatError, StorageError
from mlrep.gradcheck import LayerCheck


@pytest.fixture
def reporter():
    return CsvReporter()


class TestFrames:

    def test_parameter_frame_summary_rows(self, reporter):
        frame = reporter.parameter_frame(count_parameters(CAEArchitecture.reference()))
        counts = dict(zip(frame['layer'], frame['parameters']))
        assert counts['encoder_total'] == 256_202
        assert counts['decoder_total'] == 256_193
        assert counts['total'] == 256_202 + 256_193
        assert counts['encoder.0.conv'] > 0
        assert list(frame['layer'])[-2:] == ['encoder+lr_1_task', 'encoder+lr_4_task']

    def test_gradcheck_frame(self, reporter):
        checks = [LayerCheck('gelu', 20, 1e-9, 3, 1e-4), LayerCheck('conv2d', 20, 0.2, 7, 1e-4)]
        frame = reporter.gradcheck_frame(checks)
        assert list(frame['passed']) == [True, False]
        assert reporter.validate_frame('gradcheck', frame) == (True, [])


class TestValidateFrame:

    def test_unknown_table(self, reporter):
        ok, errors = reporter.validate_frame('weather', pd.DataFrame())
        assert not ok
        assert 'Unknown table' in errors[0]

    def test_wrong_columns(self, reporter):
        ok, errors = reporter.validate_frame('history', pd.DataFrame(columns=['epoch', 'loss']))
        assert not ok
        assert len(errors) == 1

    def test_scores_outside_unit_interval(self, reporter):
        frame = pd.DataFrame([{'task': 'sentiment', 'acc2': 1.2, 'f1': 0.5,
                               'tp': 1, 'fp': 0, 'fn': 0, 'tn': 1, 'n': 2}])
        ok, errors = reporter.validate_frame('metrics', frame)
        assert not ok
        assert "'acc2'" in errors[0]

    def test_negative_mse(self, reporter):
        frame = pd.DataFrame([{'epoch': 0, 'train_mse': 0.1, 'val_mse': -0.1, 'lr': 0.002}])
        ok, errors = reporter.validate_frame('history', frame)
        assert not ok
        assert errors == ["Negative 'val_mse' values"]


class TestWrite:

    def test_write_keeps_the_column_order(self, reporter, tmp_path):
        frame = pd.DataFrame([{'epoch': 0, 'train_mse': 0.25, 'val_mse': 0.5, 'lr': 0.002}])
        path = reporter.write(frame, tmp_path / 'nested' / 'history.csv', 'history')
        assert path.read_text().splitlines()[0] == 'epoch,train_mse,val_mse,lr'
        assert pd.read_csv(path)['val_mse'][0] == pytest.approx(0.5)

    def test_invalid_frame_is_not_written(self, reporter, tmp_path):
        frame = pd.DataFrame([{'task': 'sentiment', 'acc2': 1.2, 'f1': 0.5,
                               'tp': 1, 'fp': 0, 'fn': 0, 'tn': 1, 'n': 2}])
        with pytest.raises(ReportFormatError, match="acc2"):
            reporter.write(frame, tmp_path / 'metrics.csv', 'metrics')
        assert not (tmp_path / 'metrics.csv').exists()

    def test_frame_of_another_table_is_rejected(self, reporter, tmp_path):
        frame = reporter.parameter_frame(count_parameters(CAEArchitecture.reference()))
        with pytest.raises(ReportFormatError, match="Columns"):
            reporter.write(frame, tmp_path / 'history.csv', 'history')

    def test_write_under_a_file_raises(self, reporter, tmp_path):
        blocker = tmp_path / 'file'
        blocker.write_text('x')
        frame = pd.DataFrame([{'layer': 'total', 'parameters': 1}])
        with pytest.raises(StorageError):
            reporter.write(frame, blocker / 'out.csv', 'parameters')
