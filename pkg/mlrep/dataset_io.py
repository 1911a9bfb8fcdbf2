"""
MLRD v1 Dataset Files
=====================

A split is stored as a UTF-8 text manifest plus a binary blob next to it.

Manifest (one ``key: value`` per line):

    format: MLRD
    version: 1
    split: train
    source: mosei
    count: 1000
    timesteps: 20
    blocks: audio:74,vision:35,text:300
    width: 409
    label_schema: sentiment
    labels: sentiment
    blob: train.bin
    checksum: fnv1a64:<16 hex digits>

Blob (little-endian):

    features  float32 [count][timesteps][width]
    labels    float32 [count][len(labels)]
    ids       count x (uint32 byte length + UTF-8 bytes)

The checksum is FNV-1a 64 over the whole blob.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from mlrep.binary_format import fnv1a_64, format_checksum
from mlrep.data_pipeline import MultimodalDataset
from mlrep.errors import (
    ChecksumError,
    DatasetFormatError,
    DatasetNotFoundError,
    StorageError,
    TruncatedDataError,
    WidthMismatchError,
)

logger = logging.getLogger(__name__)

FORMAT_NAME = 'MLRD'
FORMAT_VERSION = 1

REQUIRED_KEYS = (
    'format', 'version', 'split', 'source', 'count', 'timesteps', 'blocks',
    'width', 'label_schema', 'labels', 'blob', 'checksum',
)


def _parse_manifest(text: str, path: Path) -> Dict[str, str]:
    manifest = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if ':' not in line:
            raise DatasetFormatError(f"{path}:{line_number}: expected 'key: value', got '{line}'")
        key, value = line.split(':', 1)
        manifest[key.strip()] = value.strip()
    missing = [key for key in REQUIRED_KEYS if key not in manifest]
    if missing:
        raise DatasetFormatError(f"{path}: manifest missing keys {missing}")
    if manifest['format'] != FORMAT_NAME or manifest['version'] != str(FORMAT_VERSION):
        raise DatasetFormatError(
            f"{path}: unsupported format {manifest['format']} v{manifest['version']}"
        )
    return manifest


def _parse_blocks(value: str) -> List[tuple]:
    blocks = []
    for item in value.split(','):
        name, width = item.split(':')
        blocks.append((name.strip(), int(width)))
    return blocks


def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_suffix('.bin')


def save_dataset(dataset: MultimodalDataset, manifest_path: Union[str, Path]) -> Path:
    """Write a split as manifest + blob; returns the manifest path"""
    manifest_path = Path(manifest_path)
    blob_path = _blob_path(manifest_path)
    label_names = list(dataset.labels)

    features = np.ascontiguousarray(dataset.X, dtype='<f4').tobytes()
    if label_names:
        labels = np.stack([dataset.labels[name] for name in label_names], axis=1)
    else:
        labels = np.zeros((len(dataset), 0))
    label_bytes = np.ascontiguousarray(labels, dtype='<f4').tobytes()
    id_bytes = b''.join(struct.pack('<I', len(uid.encode('utf-8'))) + uid.encode('utf-8') for uid in dataset.ids)
    blob = features + label_bytes + id_bytes

    lines = [
        f"format: {FORMAT_NAME}",
        f"version: {FORMAT_VERSION}",
        f"split: {dataset.split}",
        f"source: {dataset.source}",
        f"count: {len(dataset)}",
        f"timesteps: {dataset.timesteps}",
        f"blocks: {','.join(f'{name}:{width}' for name, width in dataset.blocks)}",
        f"width: {dataset.width}",
        f"label_schema: {dataset.label_schema}",
        f"labels: {','.join(label_names)}",
        f"blob: {blob_path.name}",
        f"checksum: {format_checksum(fnv1a_64(blob))}",
    ]
    try:
        manifest_path.parent.mkdir(parents=True, exist_ok=True)
        blob_path.write_bytes(blob)
        manifest_path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    except OSError as e:
        raise StorageError(f"Cannot write dataset {manifest_path}: {e}") from e

    logger.info(f"✓ Saved {len(dataset)} utterances ({dataset.split}) to {manifest_path}")
    return manifest_path


def load_dataset(manifest_path: Union[str, Path]) -> MultimodalDataset:
    """
    Load and verify one MLRD split

    Raises:
        DatasetNotFoundError: manifest or blob missing
        DatasetFormatError: malformed manifest or trailing bytes
        WidthMismatchError: block widths do not sum to the declared width
        TruncatedDataError: blob shorter than the manifest requires
        ChecksumError: blob checksum differs from the manifest
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetNotFoundError(f"Dataset manifest not found: {manifest_path}")
    manifest = _parse_manifest(manifest_path.read_text(encoding='utf-8'), manifest_path)

    try:
        count = int(manifest['count'])
        timesteps = int(manifest['timesteps'])
        width = int(manifest['width'])
        blocks = _parse_blocks(manifest['blocks'])
    except ValueError as e:
        raise DatasetFormatError(f"{manifest_path}: bad numeric field ({e})") from e
    label_names = [name for name in manifest['labels'].split(',') if name]

    if sum(w for _, w in blocks) != width:
        raise WidthMismatchError(
            f"{manifest_path}: block widths {blocks} sum to {sum(w for _, w in blocks)}, manifest says {width}"
        )

    blob_path = manifest_path.parent / manifest['blob']
    if not blob_path.is_file():
        raise DatasetNotFoundError(f"Dataset blob not found: {blob_path}")
    blob = blob_path.read_bytes()

    feature_size = 4 * count * timesteps * width
    label_size = 4 * count * len(label_names)
    if len(blob) < feature_size + label_size + 4 * count:
        raise TruncatedDataError(
            f"{blob_path}: {len(blob)} bytes, need at least {feature_size + label_size + 4 * count}"
        )
    if format_checksum(fnv1a_64(blob)) != manifest['checksum']:
        raise ChecksumError(f"{blob_path}: checksum does not match manifest ({manifest['checksum']})")

    X = np.frombuffer(blob, dtype='<f4', count=count * timesteps * width).reshape(count, timesteps, width)
    labels = np.frombuffer(blob, dtype='<f4', count=count * len(label_names), offset=feature_size)
    labels = labels.reshape(count, len(label_names))

    ids, offset = [], feature_size + label_size
    for _ in range(count):
        if offset + 4 > len(blob):
            raise TruncatedDataError(f"{blob_path}: id section ends early")
        (length,) = struct.unpack_from('<I', blob, offset)
        offset += 4
        if offset + length > len(blob):
            raise TruncatedDataError(f"{blob_path}: id section ends early")
        ids.append(blob[offset:offset + length].decode('utf-8'))
        offset += length
    if offset != len(blob):
        raise DatasetFormatError(f"{blob_path}: {len(blob) - offset} unexpected trailing bytes")

    dataset = MultimodalDataset(
        X=X.astype(np.float32),
        labels={name: labels[:, column].copy() for column, name in enumerate(label_names)},
        ids=ids,
        blocks=tuple(blocks),
        split=manifest['split'],
        source=manifest['source'],
        label_schema=manifest['label_schema'],
    )
    logger.info(f"Loaded {len(dataset)} utterances from {manifest_path} ({manifest['source']}/{manifest['split']})")
    return dataset
