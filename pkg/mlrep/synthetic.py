"""
Synthetic Multimodal Corpora
============================

Desk-scale stand-ins for aligned sentiment/emotion corpora with a planted,
recoverable class signal.

Each class owns a latent prototype in an 8-d space; prototypes sit at pairwise
distance 2. An utterance draws latent = prototype + noise_std * N(0, I), then
every signal-carrying modality block is latent @ P_block modulated by a smooth
per-utterance temporal envelope, plus feature noise. Blocks that carry no
signal are driven by a class-independent latent of the same scale. With two
classes the Bayes accuracy is Phi(1 / noise_std).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from mlrep.config import (
    LABEL_SCHEMAS,
    MODALITY_ORDER,
    MODALITY_WIDTHS,
    SEQUENCE_LENGTH,
    SYNTH_LATENT_DIM,
    SYNTH_SPLIT_FRACTIONS,
)
from mlrep.data_pipeline import MultimodalDataset
from mlrep.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_utterances: int = 1000
    class_count: int = 2
    noise_std: float = 0.78
    modality_widths: Dict[str, int] = field(default_factory=lambda: dict(MODALITY_WIDTHS))
    seed: int = 0
    name: str = 'synth'
    timesteps: int = SEQUENCE_LENGTH
    label_schema: str = 'sentiment'
    signal_modalities: Tuple[str, ...] = MODALITY_ORDER
    prototype_seed: Optional[int] = None
    feature_noise_ratio: float = 0.25

    def __post_init__(self):
        if self.label_schema not in LABEL_SCHEMAS:
            raise ConfigError(f"Unknown label schema '{self.label_schema}'")
        expected_classes = 2 if self.label_schema == 'sentiment' else len(LABEL_SCHEMAS['emotions'])
        if self.class_count != expected_classes:
            raise ConfigError(f"Schema '{self.label_schema}' needs class_count={expected_classes}, got {self.class_count}")
        if self.n_utterances < self.class_count:
            raise ConfigError(f"n_utterances ({self.n_utterances}) must be >= class_count ({self.class_count})")
        if self.noise_std < 0 or self.feature_noise_ratio < 0:
            raise ConfigError("Noise levels must be non-negative")
        unknown = (set(self.modality_widths) | set(self.signal_modalities)) - set(MODALITY_ORDER)
        if unknown:
            raise ConfigError(f"Unknown modality names: {sorted(unknown)}")
        if any(width < 1 for width in self.modality_widths.values()):
            raise ConfigError(f"Modality widths must be positive: {self.modality_widths}")

    @property
    def blocks(self) -> Tuple[Tuple[str, int], ...]:
        return tuple((name, self.modality_widths[name]) for name in MODALITY_ORDER if name in self.modality_widths)


def _class_prototypes(class_count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Prototypes at pairwise distance 2"""
    if class_count == 2:
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        return np.stack([-direction, direction])
    basis, _ = np.linalg.qr(rng.normal(size=(dim, class_count)))
    return math.sqrt(2.0) * basis.T


def _stratified_splits(classes: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, ...]:
    train_fraction, val_fraction, _ = SYNTH_SPLIT_FRACTIONS
    splits = ([], [], [])
    for label in np.unique(classes):
        members = rng.permutation(np.flatnonzero(classes == label))
        n_train = int(round(train_fraction * len(members)))
        n_val = int(round(val_fraction * len(members)))
        splits[0].extend(members[:n_train])
        splits[1].extend(members[n_train:n_train + n_val])
        splits[2].extend(members[n_train + n_val:])
    return tuple(np.sort(np.asarray(split, dtype=int)) for split in splits)


def synth_generate(config: SynthConfig) -> Tuple[MultimodalDataset, MultimodalDataset, MultimodalDataset]:
    """
    Generate train/val/test splits (70/15/15, stratified by class)

    Deterministic in (seed, prototype_seed). With noise_std = 0, utterances of
    one class differ only in their temporal phase.
    """
    world = np.random.default_rng(config.seed if config.prototype_seed is None else config.prototype_seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    n, steps, dim = config.n_utterances, config.timesteps, SYNTH_LATENT_DIM

    prototypes = _class_prototypes(config.class_count, dim, world)
    projections = {name: world.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, width)) for name, width in config.blocks}
    nuisance_center = world.normal(size=dim) / math.sqrt(dim)

    classes = rng.permutation(np.arange(n) % config.class_count)
    signal = prototypes[classes] + config.noise_std * rng.normal(size=(n, dim))
    nuisance = nuisance_center + config.noise_std * rng.normal(size=(n, dim))

    phase = rng.uniform(0.0, 2.0 * math.pi, size=n)
    envelope = 1.0 + 0.5 * np.sin(2.0 * math.pi * np.arange(steps)[None, :] / steps + phase[:, None])
    feature_noise = config.noise_std * config.feature_noise_ratio

    blocks = []
    for name, width in config.blocks:
        latent = signal if name in config.signal_modalities else nuisance
        block = envelope[:, :, None] * (latent @ projections[name])[:, None, :]
        if feature_noise > 0:
            block = block + feature_noise * rng.normal(size=(n, steps, width))
        blocks.append(block)
    X = np.concatenate(blocks, axis=2).astype(np.float32)

    if config.label_schema == 'sentiment':
        magnitude = rng.uniform(0.1, 3.0, size=n)
        labels = {'sentiment': np.where(classes == 1, magnitude, -magnitude)}
    else:
        labels = {task: (classes == index).astype(np.float32)
                  for index, task in enumerate(LABEL_SCHEMAS['emotions'])}

    ids = [f"{config.name}-{index:05d}" for index in range(n)]
    datasets = []
    for split_name, members in zip(('train', 'val', 'test'), _stratified_splits(classes, rng)):
        datasets.append(MultimodalDataset(
            X=X[members],
            labels={key: values[members] for key, values in labels.items()},
            ids=[ids[index] for index in members],
            blocks=config.blocks,
            split=split_name,
            source=config.name,
            label_schema=config.label_schema,
        ))
    logger.info(
        f"✓ Generated '{config.name}': {len(datasets[0])}/{len(datasets[1])}/{len(datasets[2])} "
        f"utterances, width {X.shape[2]}, noise {config.noise_std}"
    )
    return tuple(datasets)


def shuffle_labels(dataset: MultimodalDataset, seed: int) -> MultimodalDataset:
    """Label-permutation control: one permutation applied to every label column"""
    order = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.with_labels({name: values[order] for name, values in dataset.labels.items()})
