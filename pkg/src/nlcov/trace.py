"""Bit-exact activation trace files (.nlct).

Layout is little-endian throughout and input-major: all layers of one
input are stored contiguously so a single pass can update every layer
accumulator.  Values are stored as 32-bit floats (accumulation happens in
64-bit).  See FORMATS.md for the byte-level reference.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .criteria import ActivationBatch, LayerMeta
from .errors import FormatError

MAGIC = b"NLCT"
VERSION = 1
DEFAULT_BATCH_SIZE = 256

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class TraceHeader:
    layers: list[LayerMeta]
    input_count: int
    has_labels: bool
    class_count: int

    @property
    def total_neurons(self) -> int:
        return sum(m.neurons for m in self.layers)

    @property
    def record_bytes(self) -> int:
        return 4 * self.total_neurons + (4 if self.has_labels else 0)


def _header_bytes(header: TraceHeader) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    buf.write(_U32.pack(len(header.layers)))
    for meta in header.layers:
        name = meta.name.encode("utf-8")
        buf.write(_U32.pack(len(name)))
        buf.write(name)
        buf.write(_U32.pack(meta.neurons))
    buf.write(_U64.pack(header.input_count))
    buf.write(bytes([1 if header.has_labels else 0]))
    buf.write(_U32.pack(header.class_count))
    return buf.getvalue()


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"truncated trace: wanted {n} bytes for {what} at offset "
            f"{fh.tell() - len(data)}, got {len(data)}"
        )
    return data


def read_header(fh) -> TraceHeader:
    magic = _read_exact(fh, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = _U32.unpack(_read_exact(fh, 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported trace version {version}, expected {VERSION}")
    (layer_count,) = _U32.unpack(_read_exact(fh, 4, "layer count"))
    layers = []
    for i in range(layer_count):
        (name_len,) = _U32.unpack(_read_exact(fh, 4, f"layer {i} name length"))
        name = _read_exact(fh, name_len, f"layer {i} name").decode("utf-8")
        (neurons,) = _U32.unpack(_read_exact(fh, 4, f"layer {i} width"))
        layers.append(LayerMeta(name=name, neurons=neurons))
    (input_count,) = _U64.unpack(_read_exact(fh, 8, "input count"))
    has_labels = _read_exact(fh, 1, "label flag")[0]
    if has_labels not in (0, 1):
        raise FormatError(f"label flag must be 0 or 1, got {has_labels}")
    (class_count,) = _U32.unpack(_read_exact(fh, 4, "class count"))
    header = TraceHeader(
        layers=layers,
        input_count=input_count,
        has_labels=bool(has_labels),
        class_count=class_count,
    )
    if header.total_neurons == 0 and layer_count > 0:
        raise FormatError("trace declares zero total neurons")
    if header.has_labels and header.class_count == 0:
        raise FormatError("labeled trace must declare class_count > 0")
    return header


class TraceWriter:
    """Streams records to a trace file; the input count is patched on close."""

    def __init__(
        self,
        path,
        layers: Sequence[LayerMeta],
        labeled: bool = False,
        class_count: int = 0,
    ):
        if labeled and class_count < 1:
            raise ValueError("labeled trace needs class_count >= 1")
        self.header = TraceHeader(
            layers=list(layers),
            input_count=0,
            has_labels=labeled,
            class_count=class_count if labeled else 0,
        )
        self._count_offset = len(_header_bytes(self.header)) - 8 - 1 - 4
        self._fh = open(path, "wb")
        self._fh.write(_header_bytes(self.header))
        self._written = 0

    def append(self, activations: Sequence[np.ndarray], label: Optional[int] = None):
        if len(activations) != len(self.header.layers):
            raise ValueError("record layer count does not match header")
        parts = []
        for meta, vec in zip(self.header.layers, activations):
            vec = np.asarray(vec, dtype="<f4").ravel()
            if vec.shape[0] != meta.neurons:
                raise ValueError(
                    f"record layer {meta.name!r} has {vec.shape[0]} values, "
                    f"expected {meta.neurons}"
                )
            parts.append(vec.tobytes())
        if self.header.has_labels:
            if label is None:
                raise ValueError("labeled trace record needs a label")
            if not 0 <= int(label) < self.header.class_count:
                raise ValueError(
                    f"label {label} out of range [0, {self.header.class_count})"
                )
            parts.append(_U32.pack(int(label)))
        elif label is not None:
            raise ValueError("unlabeled trace cannot take labels")
        self._fh.write(b"".join(parts))
        self._written += 1

    def append_batch(self, batch: ActivationBatch) -> None:
        for i in range(batch.n):
            label = None if batch.labels is None else int(batch.labels[i])
            self.append([mat[i] for mat in batch.layers], label=label)

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(self._count_offset)
        self._fh.write(_U64.pack(self._written))
        self._fh.close()
        self.header.input_count = self._written

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_trace(
    path,
    layers: Sequence[LayerMeta],
    layer_matrices: Sequence[np.ndarray],
    labels: Optional[np.ndarray] = None,
    class_count: int = 0,
) -> None:
    """Write a whole in-memory batch as one trace file."""
    batch = ActivationBatch(layers=list(layer_matrices), labels=labels)
    with TraceWriter(
        path, layers, labeled=labels is not None, class_count=class_count
    ) as writer:
        writer.append_batch(batch)


def _batches_from_file(path, header: TraceHeader, batch_size: int):
    total = header.total_neurons
    offsets = np.cumsum([m.neurons for m in header.layers])[:-1]
    fields = [("acts", "<f4", (total,))]
    if header.has_labels:
        fields.append(("label", "<u4"))
    rec_dtype = np.dtype(fields)
    assert rec_dtype.itemsize == header.record_bytes
    with open(path, "rb") as fh:
        header_len = len(_header_bytes(header))
        fh.seek(header_len)
        remaining = header.input_count
        while remaining > 0:
            take = min(batch_size, remaining)
            raw = fh.read(take * header.record_bytes)
            if len(raw) != take * header.record_bytes:
                done = header.input_count - remaining + len(raw) // header.record_bytes
                raise FormatError(
                    f"truncated trace: input {done} is incomplete at byte offset "
                    f"{header_len + (header.input_count - remaining) * header.record_bytes + len(raw)}"
                )
            records = np.frombuffer(raw, dtype=rec_dtype)
            acts = records["acts"].astype(np.float32)
            layers = np.split(acts, offsets, axis=1) if len(header.layers) > 1 else [acts]
            labels = records["label"].astype(np.int64) if header.has_labels else None
            yield ActivationBatch(layers=list(layers), labels=labels)
            remaining -= take


def read_trace(path, batch_size: int = DEFAULT_BATCH_SIZE):
    """Open a trace, returning its header and a streaming batch iterator.

    Batches carry at most `batch_size` inputs; memory use is bounded by
    batch_size times the record size regardless of file length.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    with open(path, "rb") as fh:
        header = read_header(fh)
    return header, _batches_from_file(path, header, batch_size)


def read_trace_full(path) -> tuple[TraceHeader, ActivationBatch]:
    """Read a whole (small) trace into a single batch."""
    header, batches = read_trace(path, batch_size=max(1, header_input_count(path)))
    chunks = list(batches)
    if not chunks:
        raise FormatError("trace holds no inputs")
    layers = [
        np.concatenate([b.layers[i] for b in chunks], axis=0)
        for i in range(len(header.layers))
    ]
    labels = None
    if header.has_labels:
        labels = np.concatenate([b.labels for b in chunks])
    return header, ActivationBatch(layers=layers, labels=labels)


def header_input_count(path) -> int:
    with open(path, "rb") as fh:
        return read_header(fh).input_count


def iterate_twice(path, batch_size: int = DEFAULT_BATCH_SIZE):
    """Fresh iterator factory for criteria that need two passes (fit + warm)."""

    def factory() -> Iterator[ActivationBatch]:
        _, batches = read_trace(path, batch_size=batch_size)
        return batches

    return factory
