"""
CSV Reports
===========

Turns run results (training history, metrics, ablation rows, parameter
breakdowns, gradient checks) into pandas frames and comma-separated files
with a header row.
"""

import logging
from pathlib import Path
from typing import Any, List, Sequence, Tuple, Union

import pandas as pd

from mlrep.errors import ReportFormatError, StorageError

logger = logging.getLogger(__name__)


class CsvReporter:
    """
    Convert pipeline results to tables

    Every table has a fixed column order so reruns diff cleanly.
    """

    def __init__(self, float_format: str = '%.6f'):
        self.float_format = float_format
        self.columns = {
            'history': ['epoch', 'train_mse', 'val_mse', 'lr'],
            'metrics': ['task', 'acc2', 'f1', 'tp', 'fp', 'fn', 'tn', 'n'],
            'ablation': ['kind', 'combination', 'train_count', 'best_val_mse', 'acc2', 'f1'],
            'ablation_tasks': ['kind', 'combination', 'task', 'acc2', 'f1', 'tp', 'fp', 'fn', 'tn', 'n'],
            'parameters': ['layer', 'parameters'],
            'gradcheck': ['layer', 'trials', 'max_rel_error', 'worst_seed', 'passed'],
        }

    def history_frame(self, history: Sequence[Any]) -> pd.DataFrame:
        """Per-epoch EpochRecord rows; epoch 0 is the initialized model"""
        rows = [{'epoch': r.epoch, 'train_mse': r.train_mse, 'val_mse': r.val_mse, 'lr': r.lr} for r in history]
        return pd.DataFrame(rows, columns=self.columns['history'])

    def metrics_frame(self, report: Any) -> pd.DataFrame:
        return pd.DataFrame(report.rows(), columns=self.columns['metrics'])

    def ablation_frame(self, report: Any) -> pd.DataFrame:
        rows = [vars(row) for row in report.rows]
        return pd.DataFrame(rows, columns=self.columns['ablation'])

    def ablation_task_frame(self, report: Any) -> pd.DataFrame:
        return pd.DataFrame(report.task_rows, columns=self.columns['ablation_tasks'])

    def parameter_frame(self, breakdown: Any, head_tasks: Sequence[int] = (1, 4)) -> pd.DataFrame:
        """
        Per-layer counts followed by summary rows

        Summary rows: encoder total, decoder total, total, and encoder plus
        logistic-regression heads for each entry of head_tasks.
        """
        rows: List[Tuple[str, int]] = list(breakdown.layer_rows())
        rows.append(('encoder_total', breakdown.encoder_total))
        rows.append(('decoder_total', breakdown.decoder_total))
        rows.append(('total', breakdown.total))
        for tasks in head_tasks:
            rows.append((f"encoder+lr_{tasks}_task", breakdown.with_heads(tasks)))
        return pd.DataFrame(rows, columns=self.columns['parameters'])

    def gradcheck_frame(self, report: Sequence[Any]) -> pd.DataFrame:
        rows = [{'layer': c.layer, 'trials': c.trials, 'max_rel_error': c.max_error,
                 'worst_seed': c.worst_seed, 'passed': c.passed} for c in report]
        return pd.DataFrame(rows, columns=self.columns['gradcheck'])

    def validate_frame(self, kind: str, frame: pd.DataFrame) -> Tuple[bool, List[str]]:
        """
        Check a frame against its table definition

        Returns:
            (is_valid, list_of_errors)
        """
        errors = []
        expected = self.columns.get(kind)
        if expected is None:
            return False, [f"Unknown table '{kind}'"]
        if list(frame.columns) != expected:
            errors.append(f"Columns {list(frame.columns)} differ from {expected}")
        for column in ('acc2', 'f1'):
            if column in frame and not frame[column].between(0.0, 1.0).all():
                errors.append(f"'{column}' values outside [0, 1]")
        for column in ('train_mse', 'val_mse', 'best_val_mse'):
            if column in frame and (frame[column] < 0).any():
                errors.append(f"Negative '{column}' values")
        return len(errors) == 0, errors

    def write(self, frame: pd.DataFrame, path: Union[str, Path], kind: str) -> Path:
        """Validate frame as table kind, then write it"""
        ok, errors = self.validate_frame(kind, frame)
        if not ok:
            raise ReportFormatError(f"Refusing to write {path}: " + "; ".join(errors))
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            frame.to_csv(path, index=False, float_format=self.float_format)
        except OSError as e:
            raise StorageError(f"Cannot write report {path}: {e}") from e
        logger.info(f"✓ Wrote {len(frame)} rows to {path}")
        return path
