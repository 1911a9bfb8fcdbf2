"""
Multimodal Data Pipeline
========================

Turns word-aligned modality sequences into the N x (Ma + Mv + Mt) matrix X
and maps X to X_n with standard scaling followed by min-max scaling.

Main pieces:
- word_align: duration-weighted expectation of frame features per word
- assemble_multimodal / fix_length: build the fixed-size matrix
- fit_scalers / apply_scalers: training-split normalization
- MultimodalDataset: one split held as a (count, N, M) array plus labels
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mlrep.config import MODALITY_ORDER, SEQUENCE_LENGTH
from mlrep.errors import AlignmentError, ConfigError, DataError, ShapeError
from mlrep.tensor_engine import Tensor

logger = logging.getLogger(__name__)

Blocks = Tuple[Tuple[str, int], ...]


class EmptyTrackWarning(UserWarning):
    """A modality track had no frames; its aligned rows are all zero"""


# ==============================================================================
# RAW SEQUENCES
# ==============================================================================

@dataclass(frozen=True)
class RawModalityTrack:
    """
    Frame-level features of one modality

    starts/ends are in seconds; features is [frames, width].
    """
    starts: np.ndarray
    ends: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError(f"Track features must be 2-D [frames, width], got {self.features.shape}")
        frames = self.features.shape[0]
        if self.starts.shape != (frames,) or self.ends.shape != (frames,):
            raise ShapeError(f"Track has {frames} feature rows but {self.starts.shape} / {self.ends.shape} timestamps")
        if frames and (np.any(self.ends < self.starts) or np.any(self.starts[1:] < self.ends[:-1])):
            raise AlignmentError("Track frames must be time-ordered and non-overlapping")

    @classmethod
    def from_frames(cls, frames: Sequence[Tuple[float, float, Sequence[float]]], width: int) -> 'RawModalityTrack':
        """Build from (start, end, features) tuples; width is needed for empty tracks"""
        if not frames:
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, width)))
        starts, ends, values = zip(*frames)
        return cls(np.asarray(starts, dtype=float), np.asarray(ends, dtype=float),
                   np.asarray(values, dtype=float).reshape(len(frames), width))

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def is_empty(self) -> bool:
        return self.features.shape[0] == 0


@dataclass(frozen=True)
class WordIntervals:
    starts: np.ndarray
    ends: np.ndarray

    def __post_init__(self):
        if self.starts.shape != self.ends.shape or self.starts.ndim != 1:
            raise ShapeError(f"Word starts {self.starts.shape} and ends {self.ends.shape} differ")
        if np.any(self.starts >= self.ends):
            raise AlignmentError("Every word interval needs start < end")
        if np.any(np.diff(self.starts) < 0):
            raise AlignmentError("Word intervals must have non-decreasing starts")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[float, float]]) -> 'WordIntervals':
        array = np.asarray(pairs, dtype=float).reshape(-1, 2)
        return cls(array[:, 0].copy(), array[:, 1].copy())

    def __len__(self) -> int:
        return self.starts.shape[0]


def word_align(track: RawModalityTrack, words: WordIntervals) -> Tensor:
    """
    Expected feature vector of each word interval

    Row i is the mean of the frames overlapping word i, weighted by overlap
    duration. A word with no overlapping frame gets a zero row; an empty track
    yields an all-zero matrix and an EmptyTrackWarning.

    Returns:
        Tensor [num_words, track.width]
    """
    if len(words) == 0:
        raise AlignmentError("word_align needs at least one word interval")
    if track.is_empty:
        logger.warning("Empty modality track: aligned rows set to zero")
        warnings.warn("empty modality track aligned to zeros", EmptyTrackWarning, stacklevel=2)
        return np.zeros((len(words), track.width))

    overlap = (
        np.minimum(words.ends[:, None], track.ends[None, :])
        - np.maximum(words.starts[:, None], track.starts[None, :])
    )
    overlap = np.clip(overlap, 0.0, None)
    total = overlap.sum(axis=1, keepdims=True)
    weighted = overlap @ track.features
    return np.divide(weighted, total, out=np.zeros_like(weighted), where=total > 0)


# ==============================================================================
# MATRIX ASSEMBLY
# ==============================================================================

def assemble_multimodal(audio: Optional[Tensor] = None, vision: Optional[Tensor] = None,
                        text: Optional[Tensor] = None) -> Tensor:
    """
    Concatenate aligned blocks column-wise in audio, vision, text order

    Omitted modalities are skipped, which is how single- and two-modality
    ablations build their matrices.
    """
    blocks = [(name, block) for name, block in zip(MODALITY_ORDER, (audio, vision, text)) if block is not None]
    if not blocks:
        raise ShapeError("assemble_multimodal needs at least one modality block")
    rows = {name: np.asarray(block).shape[0] for name, block in blocks}
    if len(set(rows.values())) != 1:
        detail = ", ".join(f"{name}={count}" for name, count in rows.items())
        raise AlignmentError(f"Modalities disagree on word count: {detail}")
    return np.concatenate([np.asarray(block, dtype=float).reshape(rows[name], -1) for name, block in blocks], axis=1)


def fix_length(X: Tensor, n: int = SEQUENCE_LENGTH) -> Tensor:
    """Keep the last n rows, or prepend zero rows up to n"""
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"fix_length needs a [num_words >= 1, M] matrix, got {X.shape}")
    words = X.shape[0]
    if words >= n:
        return X[words - n:].copy()
    padding = np.zeros((n - words, X.shape[1]), dtype=X.dtype)
    return np.concatenate([padding, X], axis=0)


def build_utterance_matrix(tracks: Mapping[str, RawModalityTrack], words: WordIntervals,
                           n: int = SEQUENCE_LENGTH) -> Tensor:
    """word_align every track, assemble, then fix the length to n"""
    unknown = set(tracks) - set(MODALITY_ORDER)
    if unknown:
        raise ConfigError(f"Unknown modality names: {sorted(unknown)}")
    aligned = {name: word_align(track, words) for name, track in tracks.items()}
    return fix_length(assemble_multimodal(**aligned), n)


# ==============================================================================
# RECORDS AND DATASETS
# ==============================================================================

@dataclass(frozen=True)
class UtteranceRecord:
    X: Tensor
    blocks: Blocks
    labels: Dict[str, float]
    id: str
    source_dataset: str

    @property
    def modality_block_widths(self) -> Dict[str, int]:
        return dict(self.blocks)


@dataclass
class MultimodalDataset:
    """
    One split of utterances

    X is float32 [count, N, M]; labels maps each label column to a [count]
    vector; blocks lists (modality, width) in column order.
    """
    X: np.ndarray
    labels: Dict[str, np.ndarray]
    ids: List[str]
    blocks: Blocks
    split: str = 'train'
    source: str = ''
    label_schema: str = 'sentiment'

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.blocks = tuple((str(name), int(width)) for name, width in self.blocks)
        if self.X.ndim != 3:
            raise ShapeError(f"Dataset matrix must be [count, N, M], got {self.X.shape}")
        if sum(width for _, width in self.blocks) != self.X.shape[2]:
            raise ShapeError(f"Block widths {self.blocks} do not sum to matrix width {self.X.shape[2]}")
        if len(self.ids) != len(self):
            raise ShapeError(f"{len(self.ids)} ids for {len(self)} utterances")
        self.labels = {name: np.asarray(values, dtype=np.float32) for name, values in self.labels.items()}
        for name, values in self.labels.items():
            if values.shape != (len(self),):
                raise ShapeError(f"Label column '{name}' has shape {values.shape}, expected ({len(self)},)")

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, index: int) -> UtteranceRecord:
        return UtteranceRecord(
            X=self.X[index],
            blocks=self.blocks,
            labels={name: float(values[index]) for name, values in self.labels.items()},
            id=self.ids[index],
            source_dataset=self.source,
        )

    def records(self) -> Iterator[UtteranceRecord]:
        for index in range(len(self)):
            yield self[index]

    @property
    def timesteps(self) -> int:
        return self.X.shape[1]

    @property
    def width(self) -> int:
        return self.X.shape[2]

    def block_slices(self) -> Dict[str, slice]:
        slices, offset = {}, 0
        for name, width in self.blocks:
            slices[name] = slice(offset, offset + width)
            offset += width
        return slices

    def select_modalities(self, names: Sequence[str]) -> 'MultimodalDataset':
        """Keep only the named blocks, in the dataset's own column order"""
        slices = self.block_slices()
        unknown = [name for name in names if name not in slices]
        if unknown or not names:
            raise ConfigError(f"Illegal modality selection {list(names)}; dataset has {list(slices)}")
        kept = [(name, width) for name, width in self.blocks if name in names]
        X = np.concatenate([self.X[:, :, slices[name]] for name, _ in kept], axis=2)
        return replace(self, X=X, blocks=tuple(kept))

    def limit(self, count: Optional[int]) -> 'MultimodalDataset':
        if count is None or count >= len(self):
            return self
        return replace(self, X=self.X[:count], ids=self.ids[:count],
                       labels={name: values[:count] for name, values in self.labels.items()})

    def with_labels(self, labels: Dict[str, np.ndarray]) -> 'MultimodalDataset':
        return replace(self, labels=labels)

    @classmethod
    def from_records(cls, records: Sequence[UtteranceRecord], split: str = 'train',
                     label_schema: str = 'sentiment') -> 'MultimodalDataset':
        if not records:
            raise DataError("Cannot build a dataset from zero records without a block layout")
        names = list(records[0].labels)
        return cls(
            X=np.stack([record.X for record in records]),
            labels={name: np.array([record.labels[name] for record in records]) for name in names},
            ids=[record.id for record in records],
            blocks=records[0].blocks,
            split=split,
            source=records[0].source_dataset,
            label_schema=label_schema,
        )

    @classmethod
    def concatenate(cls, datasets: Sequence['MultimodalDataset']) -> 'MultimodalDataset':
        """Pool splits from several datasets; block layouts must agree"""
        if not datasets:
            raise DataError("Nothing to concatenate")
        first = datasets[0]
        for other in datasets[1:]:
            if other.blocks != first.blocks or other.timesteps != first.timesteps:
                raise ShapeError(
                    f"Cannot pool '{first.source}' {first.blocks} with '{other.source}' {other.blocks}"
                )
        label_names = [name for name in first.labels if all(name in d.labels for d in datasets)]
        return cls(
            X=np.concatenate([d.X for d in datasets], axis=0),
            labels={name: np.concatenate([d.labels[name] for d in datasets]) for name in label_names},
            ids=[uid for d in datasets for uid in d.ids],
            blocks=first.blocks,
            split=first.split,
            source='+'.join(d.source for d in datasets),
            label_schema=first.label_schema if all(d.label_schema == first.label_schema for d in datasets) else 'mixed',
        )


# ==============================================================================
# NORMALIZATION
# ==============================================================================

@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature standardization and post-standardization min/max"""
    mean: np.ndarray
    std: np.ndarray
    minimum: np.ndarray
    maximum: np.ndarray
    degenerate: np.ndarray
    fitted_on: str = 'train'

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    def to_tensors(self) -> Dict[str, np.ndarray]:
        return {
            'scaler/mean': self.mean,
            'scaler/std': self.std,
            'scaler/min': self.minimum,
            'scaler/max': self.maximum,
            'scaler/degenerate': self.degenerate.astype(np.float32),
        }

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], fitted_on: str = 'train') -> 'NormalizationStats':
        return cls(
            mean=np.asarray(tensors['scaler/mean'], dtype=np.float64),
            std=np.asarray(tensors['scaler/std'], dtype=np.float64),
            minimum=np.asarray(tensors['scaler/min'], dtype=np.float64),
            maximum=np.asarray(tensors['scaler/max'], dtype=np.float64),
            degenerate=np.asarray(tensors['scaler/degenerate']) > 0.5,
            fitted_on=fitted_on,
        )


def _stack_matrices(data: Union[MultimodalDataset, Sequence[UtteranceRecord]]) -> np.ndarray:
    if isinstance(data, MultimodalDataset):
        return data.X.astype(np.float64)
    if not data:
        return np.zeros((0, 0, 0))
    return np.stack([np.asarray(record.X, dtype=np.float64) for record in data])


def _standardize(X: np.ndarray, mean: np.ndarray, std: np.ndarray, degenerate: np.ndarray) -> np.ndarray:
    z = (X - mean) / std
    z[..., degenerate] = 0.0
    return z


def fit_scalers(train: Union[MultimodalDataset, Sequence[UtteranceRecord]]) -> NormalizationStats:
    """
    Fit per-feature scaling on a training split

    Statistics run over every (utterance, timestep) row. Standard deviation is
    the population value; features with zero spread get std 1 and are flagged
    degenerate.
    """
    matrices = _stack_matrices(train)
    if matrices.shape[0] == 0:
        raise DataError("fit_scalers needs a non-empty training split")
    rows = matrices.reshape(-1, matrices.shape[-1])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(degenerate):
        logger.warning(f"{int(degenerate.sum())} degenerate feature(s) with zero variance in the training split")
    std = np.where(degenerate, 1.0, std)

    z = _standardize(rows, mean, std, degenerate)
    fitted_on = train.split if isinstance(train, MultimodalDataset) else 'train'
    return NormalizationStats(mean=mean, std=std, minimum=z.min(axis=0), maximum=z.max(axis=0),
                              degenerate=degenerate, fitted_on=fitted_on)


def apply_scalers(X: Tensor, stats: NormalizationStats) -> Tensor:
    """
    X -> X_n: standardize, min-max scale, clip to [0, 1]

    Degenerate or zero-range features map to 0.5. Works on any array whose
    last axis is the feature axis.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != stats.width:
        raise ShapeError(f"Matrix width {X.shape[-1]} does not match scaler width {stats.width}")
    z = _standardize(X, stats.mean, stats.std, stats.degenerate)
    span = stats.maximum - stats.minimum
    flat = stats.degenerate | (span <= 0)
    scaled = np.clip((z - stats.minimum) / np.where(flat, 1.0, span), 0.0, 1.0)
    scaled[..., flat] = 0.5
    return scaled
