"""Criterion state files (.nlcs).

Common prefix: magic "NLCS", version u32, criterion tag u8, then a
variant-specific payload.  Everything is little-endian; matrices are
stored as float64 with covariance matrices packed to their lower
triangle.  Layer identity is positional (neuron counts only); names are
taken from whichever trace or model the state is attached to.
"""

from __future__ import annotations

import io
import struct
from typing import Optional, Sequence

import numpy as np

from .accum import CovAccumulator, packed_size
from .criteria import (
    BoundaryCoverage,
    ClusterCoverage,
    CovarianceCoverage,
    Criterion,
    KSectionCoverage,
    LayerMeta,
    NeuronCoverage,
    RangeTable,
    RescaledNeuronCoverage,
    TopKCoverage,
    TopKPatternCoverage,
    UpperBoundaryCoverage,
)
from .errors import ConfigError, FormatError

MAGIC = b"NLCS"
VERSION = 1

_TAGS = {
    "nlc": 1,
    "nc": 2,
    "ncs": 3,
    "kmnc": 4,
    "nbc": 5,
    "snac": 6,
    "tknc": 7,
    "tknp": 8,
    "cc": 9,
}
_KEYS = {v: k for k, v in _TAGS.items()}

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, v):
        self.buf.write(_U32.pack(int(v)))

    def u64(self, v):
        self.buf.write(_U64.pack(int(v)))

    def f64(self, v):
        self.buf.write(_F64.pack(float(v)))

    def f64_array(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def u64_array(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<u8").tobytes())

    def bool_bytes(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())

    def packed_bits(self, arr):
        self.buf.write(np.packbits(arr.reshape(-1)).tobytes())


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def _take(self, n, what):
        data = self.fh.read(n)
        if len(data) != n:
            raise FormatError(f"truncated state file while reading {what}")
        return data

    def u32(self, what="u32"):
        return _U32.unpack(self._take(4, what))[0]

    def u64(self, what="u64"):
        return _U64.unpack(self._take(8, what))[0]

    def f64(self, what="f64"):
        return _F64.unpack(self._take(8, what))[0]

    def f64_array(self, count, what="f64 array"):
        return np.frombuffer(self._take(8 * count, what), dtype="<f8").copy()

    def u64_array(self, count, what="u64 array"):
        return np.frombuffer(self._take(8 * count, what), dtype="<u8").copy()

    def bool_array(self, count, what="flags"):
        return np.frombuffer(self._take(count, what), dtype=np.uint8).astype(bool)

    def unpacked_bits(self, count, what="bitset"):
        nbytes = (count + 7) // 8
        raw = np.frombuffer(self._take(nbytes, what), dtype=np.uint8)
        return np.unpackbits(raw, count=count).astype(bool)


def _write_accumulator(w: _Writer, acc: CovAccumulator) -> None:
    w.u64(acc.count)
    w.f64_array(acc.mean)
    w.f64_array(acc._tril)


def _read_accumulator(r: _Reader, neurons: int) -> CovAccumulator:
    acc = CovAccumulator(neurons)
    acc.count = r.u64("accumulator count")
    acc.mean = r.f64_array(neurons, "mean")
    acc._tril = r.f64_array(packed_size(neurons), "covariance triangle")
    return acc


def _write_layer_widths(w: _Writer, layers: Sequence[LayerMeta]) -> None:
    w.u32(len(layers))
    for meta in layers:
        w.u32(meta.neurons)


def _read_layer_widths(r: _Reader) -> list[int]:
    return [r.u32("layer width") for _ in range(r.u32("layer count"))]


def _write_ranges(w: _Writer, table: Optional[RangeTable], layers) -> None:
    if table is None:
        raise ConfigError("cannot save a range-based criterion before fitting ranges")
    for meta, lo, hi in zip(layers, table.lows, table.highs):
        w.f64_array(lo)
        w.f64_array(hi)


def _read_ranges(r: _Reader, widths: list[int]) -> RangeTable:
    lows, highs = [], []
    for m in widths:
        lows.append(r.f64_array(m, "range lows"))
        highs.append(r.f64_array(m, "range highs"))
    return RangeTable(lows=lows, highs=highs)


def save_state(path, criterion: Criterion) -> None:
    """Serialize a criterion's full live state to a .nlcs file."""
    w = _Writer()
    w.buf.write(MAGIC)
    w.u32(VERSION)
    w.buf.write(bytes([_TAGS[criterion.key]]))
    key = criterion.key
    if key == "nlc":
        w.u32(criterion.class_count)
        w.u32(len(criterion.layers))
        for li, meta in enumerate(criterion.layers):
            w.u32(meta.neurons)
            for acc in criterion.accums[li]:
                _write_accumulator(w, acc)
    elif key in ("nc", "ncs"):
        w.f64(criterion.threshold)
        _write_layer_widths(w, criterion.layers)
        for flags in criterion.flags:
            w.bool_bytes(flags)
    elif key == "kmnc":
        if criterion.ranges is None:
            raise ConfigError("cannot save kmnc state before fitting ranges")
        w.u32(criterion.k)
        _write_layer_widths(w, criterion.layers)
        _write_ranges(w, criterion.ranges, criterion.layers)
        for seg in criterion.segments:
            w.packed_bits(seg)
    elif key == "nbc":
        _write_layer_widths(w, criterion.layers)
        _write_ranges(w, criterion.ranges, criterion.layers)
        for lo_f, hi_f in zip(criterion.low_flags, criterion.high_flags):
            w.bool_bytes(lo_f)
            w.bool_bytes(hi_f)
    elif key == "snac":
        _write_layer_widths(w, criterion.layers)
        _write_ranges(w, criterion.ranges, criterion.layers)
        for flags in criterion.flags:
            w.bool_bytes(flags)
    elif key == "tknc":
        w.u32(criterion.k)
        _write_layer_widths(w, criterion.layers)
        for flags in criterion.flags:
            w.bool_bytes(flags)
    elif key == "tknp":
        w.u32(criterion.k)
        _write_layer_widths(w, criterion.layers)
        hashes = np.array(sorted(criterion.patterns), dtype="<u8")
        w.u64(len(hashes))
        w.u64_array(hashes)
    elif key == "cc":
        w.f64(criterion.threshold)
        _write_layer_widths(w, criterion.layers)
        w.u32(len(criterion.monitored))
        for li in criterion.monitored:
            w.u32(li)
        for li in criterion.monitored:
            centers = criterion.centers[li]
            w.u32(len(centers))
            for c in centers:
                w.f64_array(c)
    else:  # pragma: no cover
        raise ConfigError(f"cannot serialize criterion {key!r}")
    with open(path, "wb") as fh:
        fh.write(w.buf.getvalue())


def _metas_for(widths: list[int], layers: Optional[Sequence[LayerMeta]]):
    if layers is None:
        return [LayerMeta(f"layer{i}", m) for i, m in enumerate(widths)]
    if len(layers) != len(widths):
        raise FormatError(
            f"state has {len(widths)} layers but the trace/model has {len(layers)}"
        )
    for meta, m in zip(layers, widths):
        if meta.neurons != m:
            raise FormatError(
                f"state layer {meta.name!r} width {m} does not match {meta.neurons}"
            )
    return list(layers)


def load_state(path, layers: Optional[Sequence[LayerMeta]] = None) -> Criterion:
    """Rebuild a criterion from a .nlcs file.

    When `layers` is given (from a trace header or runner handshake) the
    widths are validated against the state and the names adopted.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = r._take(4, "magic")
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = r.u32("version")
        if version != VERSION:
            raise FormatError(f"unsupported state version {version}")
        tag = r._take(1, "criterion tag")[0]
        if tag not in _KEYS:
            raise FormatError(f"unknown criterion tag {tag}")
        key = _KEYS[tag]

        if key == "nlc":
            class_count = r.u32("class count")
            layer_count = r.u32("layer count")
            slots = class_count if class_count > 0 else 1
            widths = []
            accums = []
            for _ in range(layer_count):
                m = r.u32("layer width")
                widths.append(m)
                accums.append([_read_accumulator(r, m) for _ in range(slots)])
            metas = _metas_for(widths, layers)
            crit = CovarianceCoverage(
                metas,
                class_conditional=class_count > 0,
                class_count=class_count,
            )
            crit.accums = accums
            return crit
        if key in ("nc", "ncs"):
            threshold = r.f64("threshold")
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            cls = NeuronCoverage if key == "nc" else RescaledNeuronCoverage
            crit = cls(metas, threshold=threshold)
            crit.flags = [r.bool_array(m) for m in widths]
            return crit
        if key == "kmnc":
            k = r.u32("k")
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            crit = KSectionCoverage(metas, k=k)
            crit.set_ranges(_read_ranges(r, widths))
            crit.segments = [r.unpacked_bits(m * k).reshape(m, k) for m in widths]
            return crit
        if key == "nbc":
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            crit = BoundaryCoverage(metas)
            crit.set_ranges(_read_ranges(r, widths))
            crit.low_flags = []
            crit.high_flags = []
            for m in widths:
                crit.low_flags.append(r.bool_array(m))
                crit.high_flags.append(r.bool_array(m))
            return crit
        if key == "snac":
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            crit = UpperBoundaryCoverage(metas)
            crit.set_ranges(_read_ranges(r, widths))
            crit.flags = [r.bool_array(m) for m in widths]
            return crit
        if key == "tknc":
            k = r.u32("k")
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            crit = TopKCoverage(metas, k=k)
            crit.flags = [r.bool_array(m) for m in widths]
            return crit
        if key == "tknp":
            k = r.u32("k")
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            crit = TopKPatternCoverage(metas, k=k)
            count = r.u64("pattern count")
            crit.patterns = set(int(h) for h in r.u64_array(count))
            return crit
        if key == "cc":
            threshold = r.f64("threshold")
            widths = _read_layer_widths(r)
            metas = _metas_for(widths, layers)
            monitored = [r.u32("monitored index") for _ in range(r.u32("monitored count"))]
            crit = ClusterCoverage(metas, threshold=threshold, monitored=monitored)
            for li in monitored:
                n_centers = r.u32("center count")
                crit.centers[li] = [
                    r.f64_array(widths[li], "center") for _ in range(n_centers)
                ]
            return crit
    raise FormatError("unreachable")  # pragma: no cover


def peek_state(path) -> dict:
    """Header summary of a .nlcs file for `inspect`."""
    crit = load_state(path)
    info = {
        "criterion": crit.key,
        "layers": [{"name": m.name, "neurons": m.neurons} for m in crit.layers],
        "value": crit.value(),
    }
    if isinstance(crit, CovarianceCoverage):
        info["class_count"] = crit.class_count
        info["inputs_absorbed"] = int(
            sum(acc.count for acc in crit.accums[0])
        ) if crit.accums else 0
    for attr in ("threshold", "k"):
        if hasattr(crit, attr):
            info[attr] = getattr(crit, attr)
    return info
