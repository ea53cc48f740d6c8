"""Write captured activations as .nlct trace files.

The byte layout is the engine's activation-trace wire format (magic
"NLCT", version 1, little-endian, input-major float32 records); this is
an independent implementation of that format, documented in the engine's
FORMATS.md.
"""

from __future__ import annotations

import io
import struct
from typing import Iterable

import torch

from .hooks import ActivationCapture, ExporterError, HookPlan

MAGIC = b"NLCT"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def _header_bytes(names, widths, input_count, class_count) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(VERSION))
    buf.write(_U32.pack(len(names)))
    for name, width in zip(names, widths):
        encoded = name.encode("utf-8")
        buf.write(_U32.pack(len(encoded)))
        buf.write(encoded)
        buf.write(_U32.pack(width))
    buf.write(_U64.pack(input_count))
    buf.write(bytes([1 if class_count > 0 else 0]))
    buf.write(_U32.pack(class_count))
    return buf.getvalue()


def export_trace(
    model: torch.nn.Module,
    dataset: Iterable,
    plan: HookPlan,
    out_path,
    class_count: int = 0,
) -> int:
    """Run every dataset item through the model, recording one trace
    record per item (layer order = plan order).  Dataset items are
    either input tensors or (input, label) pairs; labels are written
    when `class_count` > 0.  Returns the number of inputs written.
    """
    model.eval()
    written = 0
    fh = None
    try:
        with ActivationCapture(model, plan) as capture:
            for item in dataset:
                if isinstance(item, (tuple, list)):
                    tensor, label = item[0], int(item[1])
                else:
                    tensor, label = item, None
                if class_count > 0 and label is None:
                    raise ExporterError(
                        "class_count set but the dataset item has no label"
                    )
                _, vectors = capture.run(tensor)
                if fh is None:
                    fh = open(out_path, "wb")
                    fh.write(
                        _header_bytes(
                            capture.layer_names(), capture.widths, 0, class_count
                        )
                    )
                for vec in vectors:
                    fh.write(vec.astype("<f4").tobytes())
                if class_count > 0:
                    if not 0 <= label < class_count:
                        raise ExporterError(
                            f"label {label} out of range [0, {class_count})"
                        )
                    fh.write(_U32.pack(label))
                written += 1
            if fh is None:
                raise ExporterError("dataset is empty: nothing to export")
            # patch the input count, which sits right before the label
            # flag byte and the class-count u32 at the header's tail
            header_len = len(
                _header_bytes(capture.layer_names(), capture.widths, 0, class_count)
            )
            fh.seek(header_len - 8 - 1 - 4)
            fh.write(_U64.pack(written))
    finally:
        if fh is not None:
            fh.close()
    return written
