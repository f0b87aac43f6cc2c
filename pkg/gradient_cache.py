"""
GSIM gradient cache files
One f32 record per (example, checkpoint) with a CRC32 trailer, memory-mapped on read
"""

import hashlib
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from errors import CacheIntegrityError, CacheMissError, IncompatibleGradientError
from seqmodel import CheckpointSnapshot, GradientVector, Layout

log = structlog.get_logger()

MAGIC = b'GSIM'
VERSION = 1
PREFIX = struct.Struct('<4sII')


def snapshot_fingerprint(snapshots: Sequence[CheckpointSnapshot]) -> str:
    """Hash of the model config and every snapshot's parameters"""
    digest = hashlib.sha256()
    if snapshots:
        config = snapshots[0].params.config.to_dict()
        digest.update(json.dumps(config, sort_keys=True).encode('utf-8'))
    for snapshot in snapshots:
        digest.update(struct.pack('<I', snapshot.epoch))
        digest.update(snapshot.params.values.astype('<f4').tobytes())
    return digest.hexdigest()


def component_slices(layout: Layout, components: Sequence[str]) -> List[slice]:
    """Merged, ordered slices covering the named components (aliases counted once)"""
    spans = sorted({(layout.component_slice(c).start, layout.component_slice(c).stop) for c in components})
    merged: List[List[int]] = []
    for start, stop in spans:
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], stop)
        else:
            merged.append([start, stop])
    return [slice(a, b) for a, b in merged]


def _record_length(slices: Sequence[slice]) -> int:
    return sum(s.stop - s.start for s in slices)


def write_cache(
    path: Union[str, Path],
    layout: Layout,
    fingerprint: str,
    epochs: Sequence[int],
    components: Sequence[str],
    example_ids: Sequence[int],
    records: Iterable[Tuple[int, List[np.ndarray]]],
):
    """
    Stream records to a GSIM file

    Args:
        path: Destination (written via a temp file and renamed)
        layout: Layout of the full gradient vectors
        fingerprint: snapshot_fingerprint of the checkpoints
        epochs: Checkpoint epochs, one record per epoch per example
        components: Components stored in each record
        example_ids: Sorted example ids, matching the order of records
        records: (example_id, [vector per epoch]) with full-length vectors
    """
    slices = component_slices(layout, components)
    length = _record_length(slices)
    record_bytes = 4 * length + 4
    stride = record_bytes * len(epochs)
    header = {
        'config_hash': fingerprint,
        'epochs': list(epochs),
        'layout': layout.to_dict(),
        'components': list(components),
        'record_length': length,
        'index': [[int(ex), i * stride] for i, ex in enumerate(example_ids)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    header_bytes += b' ' * (-(PREFIX.size + len(header_bytes)) % 4)

    tmp = Path(str(path) + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(PREFIX.pack(MAGIC, VERSION, len(header_bytes)))
        f.write(header_bytes)
        written = 0
        for (example_id, vectors), expected in zip(records, example_ids):
            if example_id != expected:
                raise ValueError(f"Record for example {example_id} out of order (expected {expected})")
            for vector in vectors:
                payload = np.concatenate([vector[s] for s in slices]).astype('<f4').tobytes()
                f.write(payload)
                f.write(struct.pack('<I', zlib.crc32(payload)))
            written += 1
        if written != len(example_ids):
            raise ValueError(f"Expected {len(example_ids)} records, got {written}")
    os.replace(tmp, path)


class GradientCache:
    """Read-only view of a GSIM file"""

    def __init__(self, path: Union[str, Path], verify: bool = True):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, 'rb') as f:
            prefix = f.read(PREFIX.size)
            if len(prefix) < PREFIX.size:
                raise CacheIntegrityError(len(prefix), "Truncated cache prefix")
            magic, version, header_len = PREFIX.unpack(prefix)
            if magic != MAGIC:
                raise CacheIntegrityError(0, f"Bad magic {magic!r}")
            if version != VERSION:
                raise CacheIntegrityError(4, f"Unsupported cache version {version}")
            raw = f.read(header_len)
        try:
            self.header = json.loads(raw.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CacheIntegrityError(PREFIX.size, f"Unreadable header: {e}")

        self.layout = Layout.from_dict(self.header['layout'])
        self.epochs: List[int] = list(self.header['epochs'])
        self.components: List[str] = list(self.header['components'])
        self.fingerprint: str = self.header['config_hash']
        self.slices = component_slices(self.layout, self.components)
        self.record_length = int(self.header['record_length'])
        self.index: Dict[int, int] = {int(ex): int(off) for ex, off in self.header['index']}
        self.payload_start = PREFIX.size + header_len
        self._full = self.slices == [slice(0, self.layout.size)]
        self._vectors: Dict[Tuple[int, int], GradientVector] = {}

        rows = len(self.index) * len(self.epochs)
        expected = self.payload_start + rows * (4 * self.record_length + 4)
        if size != expected:
            raise CacheIntegrityError(min(size, expected), f"Cache size {size} does not match header ({expected})")
        if rows:
            self._table = np.memmap(self.path, dtype='<f4', mode='r', offset=self.payload_start,
                                    shape=(rows, self.record_length + 1))
        else:
            self._table = np.zeros((0, self.record_length + 1), dtype='<f4')
        if verify:
            self.verify()

    def verify(self):
        record_bytes = 4 * self.record_length + 4
        for row in range(self._table.shape[0]):
            payload = self._table[row, :self.record_length].tobytes()
            stored = int(self._table[row, self.record_length:].view('<u4')[0])
            if zlib.crc32(payload) != stored:
                raise CacheIntegrityError(self.payload_start + row * record_bytes,
                                          f"CRC mismatch in record {row}")

    @property
    def example_ids(self) -> List[int]:
        return sorted(self.index)

    def __len__(self) -> int:
        return len(self.index)

    def __contains__(self, key: Tuple[int, int]) -> bool:
        example_id, epoch = key
        return example_id in self.index and epoch in self.epochs

    def missing(self, pairs: Iterable[Tuple[int, int]]) -> List[Tuple[int, int]]:
        return [pair for pair in pairs if pair not in self]

    def require_slices(self, slices: Sequence[slice], name: str):
        """Raise unless every index in `slices` was stored; unstored components read back as zeros"""
        for s in slices:
            if not any(c.start <= s.start and s.stop <= c.stop for c in self.slices):
                raise IncompatibleGradientError(
                    f"Selector '{name}' needs components outside the cached set {self.components}")

    def _row(self, example_id: int, epoch: int) -> int:
        record_bytes = 4 * self.record_length + 4
        return self.index[example_id] // record_bytes + self.epochs.index(epoch)

    def get(self, example_id: int, epoch: int) -> GradientVector:
        key = (example_id, epoch)
        if key in self._vectors:
            return self._vectors[key]
        if key not in self:
            raise CacheMissError([key])
        record = self._table[self._row(example_id, epoch), :self.record_length]
        if self._full:
            values = np.asarray(record)
        else:
            values = np.zeros(self.layout.size, dtype=np.float32)
            offset = 0
            for s in self.slices:
                values[s] = record[offset:offset + s.stop - s.start]
                offset += s.stop - s.start
        # kept so restricted norms are computed once per vector
        vector = GradientVector(self.layout, values, example_id=example_id, epoch=epoch)
        self._vectors[key] = vector
        return vector

    def vectors(self, example_id: int, epochs: Optional[Sequence[int]] = None) -> List[GradientVector]:
        return [self.get(example_id, ep) for ep in (epochs or self.epochs)]


def open_cache(path: Union[str, Path], verify: bool = True) -> Optional[GradientCache]:
    """Open an existing cache; None if the file is absent"""
    if not Path(path).exists():
        return None
    return GradientCache(path, verify=verify)
