"""
Binary Containers
=================

64-bit FNV-1a checksums and the MLRW v1 named-tensor container.

MLRW v1 layout (all integers little-endian):

    magic        4 bytes   b"MLRW"
    version      uint32    1
    count        uint32    number of tensors
    count x tensor:
        name_len uint32, name (UTF-8, name_len bytes)
        rank     uint32, dims (rank x uint32)
        payload  float32 x prod(dims)
    checksum     uint64    FNV-1a 64 of every preceding byte
"""

import logging
import struct
from functools import lru_cache
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from mlrep.errors import (
    ChecksumError,
    StorageError,
    TensorCountError,
    TruncatedDataError,
    WeightsFormatError,
)

logger = logging.getLogger(__name__)

MAGIC = b'MLRW'
VERSION = 1

FNV_OFFSET_BASIS = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
_MASK_64 = 0xFFFFFFFFFFFFFFFF
CHUNK_BYTES = 1 << 20


@lru_cache(maxsize=4)
def _prime_powers(count: int) -> np.ndarray:
    """FNV_PRIME ** 1 .. FNV_PRIME ** count modulo 2^64"""
    return np.cumprod(np.full(count, FNV_PRIME, dtype=np.uint64), dtype=np.uint64)


def _low_byte_states(data: np.ndarray, start: int) -> np.ndarray:
    """
    Low byte of the running hash before each byte of data

    Bit k of (x * FNV_PRIME) mod 256 is bit k of x flipped by a carry that
    depends on bits below k only, so each bit of the chain is a prefix XOR
    once the lower bits are known.
    """
    low_prime = FNV_PRIME & 0xFF
    states = np.zeros(len(data), dtype=np.uint8)
    for bit in range(8):
        below = ((states ^ data) & ((1 << bit) - 1)).astype(np.uint16)
        carry = (((below * low_prime) >> bit) & 1).astype(np.uint8)
        flips = ((data >> bit) & 1) ^ carry
        column = np.empty(len(data), dtype=np.uint8)
        column[0] = (start >> bit) & 1
        column[1:] = column[0] ^ np.bitwise_xor.accumulate(flips[:-1])
        states |= column << bit
    return states


def fnv1a_64(data: bytes, state: int = FNV_OFFSET_BASIS) -> int:
    """
    FNV-1a 64-bit hash; pass the previous result as state to hash in chunks

    (h ^ b) only touches the low byte of h, so one step is h -> (h + d) * P
    with d = (low ^ b) - low. Over a chunk of n bytes that unrolls to
    h * P^n + sum(d_i * P^(n - i)) mod 2^64, evaluated with numpy once the
    low-byte chain is known.
    """
    h = state
    view = np.frombuffer(data, dtype=np.uint8)
    for offset in range(0, len(view), CHUNK_BYTES):
        chunk = view[offset:offset + CHUNK_BYTES]
        lows = _low_byte_states(chunk, h & 0xFF)
        deltas = (lows ^ chunk).astype(np.int64) - lows.astype(np.int64)
        powers = _prime_powers(CHUNK_BYTES)[:len(chunk)][::-1]
        mixed = int(np.sum(deltas.view(np.uint64) * powers, dtype=np.uint64))
        h = (h * int(powers[0]) + mixed) & _MASK_64
    return h


def format_checksum(value: int) -> str:
    return f"fnv1a64:{value:016x}"


# ==============================================================================
# MLRW CONTAINER
# ==============================================================================

def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named tensors (as float32) into MLRW v1 bytes"""
    parts = [MAGIC, struct.pack('<II', VERSION, len(tensors))]
    for name, tensor in tensors.items():
        encoded = name.encode('utf-8')
        array = np.ascontiguousarray(tensor, dtype='<f4')
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape))
        parts.append(array.tobytes())
    body = b''.join(parts)
    return body + struct.pack('<Q', fnv1a_64(body))


def decode_tensors(data: bytes) -> Dict[str, np.ndarray]:
    """
    Parse MLRW v1 bytes

    Raises:
        WeightsFormatError: bad magic or unsupported version
        TruncatedDataError: data ends inside a header or payload
        TensorCountError: declared tensor count disagrees with the content
        ChecksumError: trailing checksum does not match
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise WeightsFormatError(f"Not an MLRW container (magic {data[:4]!r})")
    if len(data) < 12 + 8:
        raise TruncatedDataError(f"MLRW container too short ({len(data)} bytes)")
    version, count = struct.unpack_from('<II', data, 4)
    if version != VERSION:
        raise WeightsFormatError(f"Unsupported MLRW version {version} (expected {VERSION})")

    body = data[:-8]
    (stored,) = struct.unpack('<Q', data[-8:])
    offset = 12
    tensors: Dict[str, np.ndarray] = {}

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(body):
            raise TruncatedDataError(f"MLRW container ends inside tensor {len(tensors) + 1} of {count}")
        chunk = body[offset:offset + size]
        offset += size
        return chunk

    for _ in range(count):
        if offset == len(body):
            raise TensorCountError(f"Header declares {count} tensors but the container holds {len(tensors)}")
        (name_len,) = struct.unpack('<I', take(4))
        try:
            name = take(name_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise WeightsFormatError(f"Tensor {len(tensors) + 1} of {count} has a name that is not UTF-8") from e
        (rank,) = struct.unpack('<I', take(4))
        dims = struct.unpack(f'<{rank}I', take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(take(4 * size), dtype='<f4')
        tensors[name] = payload.reshape(dims).astype(np.float32)

    if offset != len(body):
        raise TensorCountError(
            f"Header declares {count} tensors but {len(body) - offset} bytes follow the last one"
        )
    if fnv1a_64(body) != stored:
        raise ChecksumError(f"MLRW checksum mismatch: stored {stored:016x}")
    return tensors


def write_container(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    data = encode_tensors(tensors)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise StorageError(f"Cannot write {path}: {e}") from e
    logger.info(f"✓ Wrote {len(tensors)} tensors to {path} ({len(data):,} bytes)")
    return path


def read_container(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Cannot read {path}: {e}") from e
    return decode_tensors(data)


def append_tensors(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> Path:
    """Add (or replace) named tensors in an existing container"""
    merged = read_container(path)
    merged.update(tensors)
    return write_container(path, merged)
