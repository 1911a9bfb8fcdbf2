"""
mlrep Python Package
====================

Unsupervised multimodal language representations: word-aligned audio, vision
and text sequences become normalized 2-D matrices, a convolutional
autoencoder compresses them into 250-d codes, and logistic regression
classifies sentiment or emotions from the frozen codes.

Main modules:
- tensor_engine: layers, losses, optimizer and scheduler with explicit backward passes
- gradcheck: finite-difference verification of every backward pass
- data_pipeline: alignment, matrix assembly, datasets and normalization
- dataset_io / binary_format: MLRD dataset files and MLRW weight containers
- synthetic: planted-signal stand-in corpora
- cae_model: the autoencoder (build, train, encode, save, load, count)
- downstream: logistic regression and metrics
- experiments / cli: run configurations, protocols and the `mlrep` command
- csv_reports: CSV tables of results
- demo_helpers: console output helpers

Usage:
    # Library
    from mlrep import build_cae, train_cae, encode, synth_generate

    # Command line
    mlrep synth --name demo --n 2000 --out runs/demo
"""

__version__ = "1.0.0"

from mlrep.config import (
    EMOTION_TASKS,
    INTERACTIVE_MODE,
    MODALITY_ORDER,
    MODALITY_WIDTHS,
    OUTPUT_ROOT,
    SEQUENCE_LENGTH,
)
from mlrep.errors import (
    ConfigError,
    DataError,
    MlrepError,
    NumericError,
    StorageError,
    UsageError,
)
from mlrep.data_pipeline import (
    MultimodalDataset,
    NormalizationStats,
    RawModalityTrack,
    WordIntervals,
    apply_scalers,
    assemble_multimodal,
    build_utterance_matrix,
    fit_scalers,
    fix_length,
    word_align,
)
from mlrep.dataset_io import load_dataset, save_dataset
from mlrep.synthetic import SynthConfig, shuffle_labels, synth_generate
from mlrep.cae_model import (
    CAEArchitecture,
    CAEModel,
    TrainConfig,
    build_cae,
    compute_shape_chain,
    count_parameters,
    decode,
    encode,
    load_weights,
    save_weights,
    train_cae,
)
from mlrep.downstream import (
    LabelRule,
    LogRegConfig,
    LogRegModel,
    binary_accuracy,
    evaluate,
    predict,
    train_logreg,
    train_one_vs_all,
    weighted_f1,
)
from mlrep.experiments import RunConfig, load_run_config
from mlrep.csv_reports import CsvReporter

__all__ = [
    # Version
    '__version__',

    # Configuration
    'EMOTION_TASKS',
    'INTERACTIVE_MODE',
    'MODALITY_ORDER',
    'MODALITY_WIDTHS',
    'OUTPUT_ROOT',
    'SEQUENCE_LENGTH',

    # Errors
    'ConfigError',
    'DataError',
    'MlrepError',
    'NumericError',
    'StorageError',
    'UsageError',

    # Data
    'MultimodalDataset',
    'NormalizationStats',
    'RawModalityTrack',
    'WordIntervals',
    'apply_scalers',
    'assemble_multimodal',
    'build_utterance_matrix',
    'fit_scalers',
    'fix_length',
    'word_align',
    'load_dataset',
    'save_dataset',
    'SynthConfig',
    'shuffle_labels',
    'synth_generate',

    # Autoencoder
    'CAEArchitecture',
    'CAEModel',
    'TrainConfig',
    'build_cae',
    'compute_shape_chain',
    'count_parameters',
    'decode',
    'encode',
    'load_weights',
    'save_weights',
    'train_cae',

    # Downstream
    'LabelRule',
    'LogRegConfig',
    'LogRegModel',
    'binary_accuracy',
    'evaluate',
    'predict',
    'train_logreg',
    'train_one_vs_all',
    'weighted_f1',

    # Runs and reports
    'RunConfig',
    'load_run_config',
    'CsvReporter',
]
