"""
Experiment Protocols
====================

Run configuration documents and the protocol steps every CLI verb is built
from: load splits, pretrain the autoencoder, embed, train and score the
classifier, and the modality / dataset-combination ablations.

A run configuration is a JSON object:

    {
      "datasets": [{"name": "mosei", "dir": "data/mosei"},
                   {"name": "iemocap", "train": "...", "val": "...", "test": "..."}],
      "modalities": ["audio", "vision", "text"],
      "train": {"batch_size": 128, "max_epochs": 200, "lr": 0.002},
      "logreg": {"l2": 1.0, "max_iter": 1000, "tol": 1e-6},
      "label_rule": {"nonnegative_positive": false, "exclude_neutral": false},
      "full_batchnorm": false,
      "seed": 0,
      "precision": 32,
      "output_dir": "runs/mosei",
      "limit": null,
      "eval_dataset": "mosei",
      "ablation": {"modalities": [["audio"], ["text"]], "datasets": [["mosei"], ["mosei", "iemocap"]]},
      "synthetic": [{"name": "synth-a", "dir": "data/synth-a", "n_utterances": 2000}]
    }

Every section is optional; unknown keys are rejected.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mlrep.cae_model import CAEArchitecture, CAEModel, EpochRecord, TrainConfig, build_cae, encode, train_cae
from mlrep.config import MODALITY_ORDER, OUTPUT_ROOT
from mlrep.data_pipeline import MultimodalDataset, apply_scalers, fit_scalers
from mlrep.dataset_io import load_dataset, save_dataset
from mlrep.downstream import (
    LabelRule,
    LogRegConfig,
    LogRegModel,
    MetricsReport,
    binary_labels,
    evaluate,
    evaluation_mask,
    train_one_vs_all,
)
from mlrep.errors import (
    ConfigError,
    DataError,
    IncompatibleModelError,
    SingleClassError,
    StorageError,
    UsageError,
)
from mlrep.synthetic import SynthConfig, synth_generate

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')


# ==============================================================================
# RUN CONFIGURATION
# ==============================================================================

def _build(cls, data: Any, where: str, exclude: Sequence[str] = ()):
    """Instantiate a dataclass from a JSON object, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigError(f"'{where}' must be a JSON object")
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in '{where}': {unknown}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"'{where}': {e}") from e


def _check_modalities(names: Sequence[str], where: str) -> Tuple[str, ...]:
    if isinstance(names, str) or not names:
        raise ConfigError(f"'{where}' must be a non-empty list of modality names")
    illegal = [name for name in names if name not in MODALITY_ORDER]
    if illegal:
        raise ConfigError(f"'{where}': illegal modality names {illegal}; choose from {list(MODALITY_ORDER)}")
    return tuple(name for name in MODALITY_ORDER if name in names)


@dataclass(frozen=True)
class DatasetRef:
    """Manifests of one dataset's splits; `dir` expands to <dir>/{train,val,test}.mlrd"""
    name: str
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    dir: Optional[str] = None

    def path(self, split: str) -> Path:
        explicit = getattr(self, split)
        if explicit:
            return Path(explicit)
        if self.dir:
            return Path(self.dir) / f"{split}.mlrd"
        raise ConfigError(f"Dataset '{self.name}' has no path for split '{split}'")


@dataclass(frozen=True)
class AblationPlan:
    modalities: Tuple[Tuple[str, ...], ...] = ()
    datasets: Tuple[Tuple[str, ...], ...] = ()

    @property
    def is_empty(self) -> bool:
        return not self.modalities and not self.datasets


@dataclass(frozen=True)
class SyntheticEntry:
    config: SynthConfig
    dir: Path


@dataclass(frozen=True)
class RunConfig:
    datasets: Tuple[DatasetRef, ...] = ()
    modalities: Tuple[str, ...] = MODALITY_ORDER
    train: TrainConfig = TrainConfig()
    logreg: LogRegConfig = LogRegConfig()
    label_rule: LabelRule = LabelRule()
    full_batchnorm: bool = False
    seed: int = 0
    precision: int = 32
    output_dir: str = OUTPUT_ROOT
    limit: Optional[int] = None
    eval_dataset: Optional[str] = None
    ablation: AblationPlan = AblationPlan()
    synthetic: Tuple[SyntheticEntry, ...] = ()

    def __post_init__(self):
        names = [ref.name for ref in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate dataset names {names}")
        if self.eval_dataset is not None and self.eval_dataset not in names:
            raise ConfigError(f"eval_dataset '{self.eval_dataset}' is not among {names}")
        for combination in self.ablation.datasets:
            unknown = [name for name in combination if name not in names]
            if unknown or not combination:
                raise ConfigError(f"Ablation dataset combination {list(combination)} must name datasets from {names}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.limit is not None and self.limit < 1:
            raise ConfigError(f"limit must be positive, got {self.limit}")

    @property
    def dataset_names(self) -> List[str]:
        return [ref.name for ref in self.datasets]

    @property
    def evaluation_dataset(self) -> str:
        if not self.datasets:
            raise ConfigError("No datasets configured")
        return self.eval_dataset or self.datasets[0].name

    @property
    def train_config(self) -> TrainConfig:
        """Training hyperparameters with the run's seed and precision"""
        return replace(self.train, seed=self.seed, precision=self.precision)

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)

    def dataset(self, name: str) -> DatasetRef:
        for ref in self.datasets:
            if ref.name == name:
                return ref
        raise ConfigError(f"Unknown dataset '{name}'")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'RunConfig':
        if not isinstance(data, dict):
            raise ConfigError("Run configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown keys in run configuration: {unknown}")

        values: Dict[str, Any] = {key: data[key] for key in
                                  ('full_batchnorm', 'seed', 'precision', 'output_dir', 'limit', 'eval_dataset')
                                  if key in data}
        if 'datasets' in data:
            values['datasets'] = tuple(_build(DatasetRef, item, f"datasets[{i}]")
                                       for i, item in enumerate(data['datasets']))
        if 'modalities' in data:
            values['modalities'] = _check_modalities(data['modalities'], 'modalities')
        if 'train' in data:
            values['train'] = _build(TrainConfig, data['train'], 'train', exclude=('seed', 'precision'))
        if 'logreg' in data:
            values['logreg'] = _build(LogRegConfig, data['logreg'], 'logreg')
        if 'label_rule' in data:
            values['label_rule'] = _build(LabelRule, data['label_rule'], 'label_rule')
        if 'ablation' in data:
            plan = data['ablation']
            if not isinstance(plan, dict) or set(plan) - {'modalities', 'datasets'}:
                raise ConfigError("'ablation' accepts only 'modalities' and 'datasets' lists")
            values['ablation'] = AblationPlan(
                modalities=tuple(_check_modalities(combo, 'ablation.modalities')
                                 for combo in plan.get('modalities', [])),
                datasets=tuple(tuple(combo) for combo in plan.get('datasets', [])),
            )
        if 'synthetic' in data:
            entries = []
            for index, item in enumerate(data['synthetic']):
                item = dict(item)
                directory = item.pop('dir', None)
                if 'signal_modalities' in item:
                    item['signal_modalities'] = _check_modalities(item['signal_modalities'],
                                                                  f"synthetic[{index}].signal_modalities")
                synth = _build(SynthConfig, item, f"synthetic[{index}]")
                entries.append(SyntheticEntry(synth, Path(directory or Path(OUTPUT_ROOT) / 'data' / synth.name)))
            values['synthetic'] = tuple(entries)
        return cls(**values)

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None,
                       limit: Optional[int] = None, precision: Optional[int] = None) -> 'RunConfig':
        """Command-line flags take precedence over document values"""
        updates = {key: value for key, value in
                   (('seed', seed), ('output_dir', output_dir), ('limit', limit), ('precision', precision))
                   if value is not None}
        return replace(self, **updates) if updates else self

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready record of the effective run settings"""
        record = asdict(self)
        record['synthetic'] = [dict(asdict(entry.config), dir=str(entry.dir)) for entry in self.synthetic]
        return record


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError as e:
        raise ConfigError(f"Run configuration not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    config = RunConfig.from_dict(data)
    logger.info(f"Loaded run configuration {path} ({len(config.datasets)} dataset(s))")
    return config


def write_run_record(config: RunConfig, directory: Path, **extra) -> Path:
    """Store the effective settings (including training precision) next to the outputs"""
    path = directory / 'run.json'
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dict(config.to_dict(), **extra), indent=2, default=str) + '\n', encoding='utf-8')
    except OSError as e:
        raise StorageError(f"Cannot write run record {path}: {e}") from e
    return path


# ==============================================================================
# DATA
# ==============================================================================

def generate_synthetic(config: RunConfig) -> Dict[str, List[Path]]:
    """Write every configured synthetic dataset as MLRD splits"""
    if not config.synthetic:
        raise ConfigError("No synthetic datasets configured")
    written = {}
    for entry in config.synthetic:
        splits = synth_generate(entry.config)
        written[entry.config.name] = [save_dataset(split, entry.dir / f"{split.split}.mlrd") for split in splits]
    return written


def load_splits(config: RunConfig, names: Optional[Sequence[str]] = None,
                splits: Sequence[str] = SPLITS) -> Dict[str, Dict[str, MultimodalDataset]]:
    """Load (and cap to config.limit) the requested splits of the named datasets"""
    names = list(names or config.dataset_names)
    if not names:
        raise ConfigError("No datasets configured")
    loaded = {}
    for name in names:
        ref = config.dataset(name)
        loaded[name] = {split: load_dataset(ref.path(split)).limit(config.limit) for split in splits}
    return loaded


def _pool(loaded: Mapping[str, Mapping[str, MultimodalDataset]], names: Sequence[str], split: str,
          modalities: Sequence[str]) -> MultimodalDataset:
    return MultimodalDataset.concatenate([loaded[name][split] for name in names]).select_modalities(modalities)


# ==============================================================================
# PROTOCOL STEPS
# ==============================================================================

@dataclass
class PretrainResult:
    model: CAEModel
    history: List[EpochRecord]
    train_count: int
    val_count: int

    @property
    def best_val_mse(self) -> float:
        return min(record.val_mse for record in self.history)


def pretrain(config: RunConfig, loaded: Mapping[str, Mapping[str, MultimodalDataset]],
             dataset_names: Optional[Sequence[str]] = None,
             modalities: Optional[Sequence[str]] = None) -> PretrainResult:
    """
    Fit scalers on the pooled train splits and train the autoencoder

    The pooled validation splits drive scheduling and early stopping. Test
    splits are never touched.
    """
    names = list(dataset_names or config.dataset_names)
    modalities = tuple(modalities or config.modalities)
    train = _pool(loaded, names, 'train', modalities)
    val = _pool(loaded, names, 'val', modalities)
    logger.info(f"Pretraining on {'+'.join(names)} [{'+'.join(modalities)}]: "
                f"{len(train)} train / {len(val)} val utterances, width {train.width}")

    scaler = fit_scalers(train)
    train_config = config.train_config
    model = build_cae(
        (train.timesteps, train.width),
        CAEArchitecture.reference(full_batchnorm=config.full_batchnorm),
        seed=config.seed,
        init_std=train_config.init_std,
        dtype=train_config.dtype,
        momentum=train_config.batchnorm_momentum,
        blocks=train.blocks,
    )
    model.scaler = scaler
    model, history = train_cae(model, apply_scalers(train.X, scaler), apply_scalers(val.X, scaler), train_config)
    return PretrainResult(model, history, len(train), len(val))


def embed_dataset(model: CAEModel, dataset: MultimodalDataset) -> MultimodalDataset:
    """
    Apply the model's scalers and encoder to a split

    Returns:
        Dataset with N = 1 and a single 'code' block of width K, carrying the
        source labels and ids
    """
    if model.scaler is None:
        raise UsageError("Model carries no normalization statistics; it cannot embed raw datasets")
    expected = tuple(model.blocks)
    if expected and tuple(dataset.blocks) != expected:
        available = dict(dataset.blocks)
        if any(available.get(name) != width for name, width in expected):
            raise IncompatibleModelError(
                f"dataset/model incompatible: dataset '{dataset.source}' has blocks {list(dataset.blocks)}, "
                f"model expects {list(expected)}"
            )
        dataset = dataset.select_modalities([name for name, _ in expected])
    if (dataset.timesteps, dataset.width) != tuple(model.input_dims):
        raise IncompatibleModelError(
            f"dataset/model incompatible: dataset matrices are {dataset.timesteps}x{dataset.width}, "
            f"model expects {model.input_dims[0]}x{model.input_dims[1]}"
        )

    codes = encode(model, apply_scalers(dataset.X, model.scaler))
    logger.info(f"✓ Embedded {len(dataset)} utterances of '{dataset.source}/{dataset.split}' into {codes.shape[1]}-d codes")
    return MultimodalDataset(
        X=codes[:, None, :],
        labels=dict(dataset.labels),
        ids=list(dataset.ids),
        blocks=(('code', codes.shape[1]),),
        split=dataset.split,
        source=dataset.source,
        label_schema=dataset.label_schema,
    )


def _task_targets(embeddings: MultimodalDataset, rule: LabelRule) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    if embeddings.timesteps != 1:
        raise DataError(f"Expected an embedding file (N = 1), got {embeddings.timesteps} timesteps")
    if not embeddings.labels:
        raise DataError(f"'{embeddings.source}/{embeddings.split}' carries no labels")
    mask = evaluation_mask(embeddings.labels, rule)
    targets = binary_labels(embeddings.labels, rule)
    return embeddings.X[mask, 0, :], {task: values[mask] for task, values in targets.items()}


def train_classifier(embeddings: MultimodalDataset, config: LogRegConfig = LogRegConfig(),
                     rule: LabelRule = LabelRule()) -> LogRegModel:
    """One logistic regression per label column; fails only if no task can be trained"""
    X, targets = _task_targets(embeddings, rule)
    model = train_one_vs_all(X, targets, config)
    if not model.tasks:
        task, message = next(iter(model.failures.items()))
        raise SingleClassError(task, message)
    return model


def evaluate_classifier(model: LogRegModel, embeddings: MultimodalDataset,
                        rule: LabelRule = LabelRule()) -> MetricsReport:
    if embeddings.width != model.embedding_dim:
        raise IncompatibleModelError(
            f"Classifier expects {model.embedding_dim}-d embeddings, '{embeddings.source}' has {embeddings.width}"
        )
    X, targets = _task_targets(embeddings, rule)
    return evaluate(model, X, targets)


def train_eval_classifier(train_embeddings: MultimodalDataset, test_embeddings: MultimodalDataset,
                          config: LogRegConfig = LogRegConfig(),
                          rule: LabelRule = LabelRule()) -> Tuple[LogRegModel, MetricsReport]:
    if train_embeddings.width != test_embeddings.width:
        raise IncompatibleModelError(
            f"Train embeddings are {train_embeddings.width}-d, test embeddings {test_embeddings.width}-d"
        )
    model = train_classifier(train_embeddings, config, rule)
    return model, evaluate_classifier(model, test_embeddings, rule)


@dataclass
class ProtocolResult:
    pretrain: PretrainResult
    classifier: LogRegModel
    report: MetricsReport


def run_protocol(config: RunConfig, loaded: Mapping[str, Mapping[str, MultimodalDataset]],
                 dataset_names: Optional[Sequence[str]] = None,
                 modalities: Optional[Sequence[str]] = None) -> ProtocolResult:
    """Pretrain, freeze, embed the evaluation dataset, train and score the classifier"""
    result = pretrain(config, loaded, dataset_names, modalities)
    evaluation = loaded[config.evaluation_dataset]
    classifier, report = train_eval_classifier(
        embed_dataset(result.model, evaluation['train']),
        embed_dataset(result.model, evaluation['test']),
        config.logreg,
        config.label_rule,
    )
    return ProtocolResult(result, classifier, report)


# ==============================================================================
# ABLATION
# ==============================================================================

@dataclass(frozen=True)
class AblationRow:
    kind: str
    combination: str
    train_count: int
    best_val_mse: float
    acc2: float
    f1: float


@dataclass
class AblationReport:
    rows: List[AblationRow] = field(default_factory=list)
    task_rows: List[Dict[str, Any]] = field(default_factory=list)


def run_ablation(config: RunConfig) -> AblationReport:
    """
    One full protocol run per requested modality subset and dataset combination

    Rows report the best validation MSE and, for multi-task schemas, the mean
    Acc2 / F1 over tasks; per-task metrics go to task_rows.
    """
    if config.ablation.is_empty:
        raise ConfigError("Ablation needs at least one modality subset or dataset combination")
    needed = {config.evaluation_dataset}
    needed.update(config.dataset_names if config.ablation.modalities else ())
    for combination in config.ablation.datasets:
        needed.update(combination)
    loaded = load_splits(config, [name for name in config.dataset_names if name in needed])

    plan = ([('modalities', None, combo) for combo in config.ablation.modalities]
            + [('datasets', combo, None) for combo in config.ablation.datasets])
    report = AblationReport()
    for kind, names, modalities in plan:
        label = '+'.join(modalities if kind == 'modalities' else names)
        logger.info(f"Ablation row: {kind} = {label}")
        result = run_protocol(config, loaded, names, modalities)
        report.rows.append(AblationRow(
            kind=kind,
            combination=label,
            train_count=result.pretrain.train_count,
            best_val_mse=result.pretrain.best_val_mse,
            acc2=result.report.mean_accuracy,
            f1=result.report.mean_f1,
        ))
        report.task_rows.extend(dict(row, kind=kind, combination=label) for row in result.report.rows())
        logger.info(f"✓ {label}: best val MSE {report.rows[-1].best_val_mse:.6f}, "
                    f"Acc2 {report.rows[-1].acc2:.4f}, F1 {report.rows[-1].f1:.4f}")
    return report
