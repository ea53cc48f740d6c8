"""Serve a PyTorch model over the engine's framed runner protocol.

Handshake: one JSON line {"layers": [...], "input": [H, W, C],
"classes": c}.  Frames: u32 little-endian payload length, u8 tag
(1 = request, 2 = response); a request payload is the H*W*C image as
float32, a response payload is a u32 predicted label followed by the
hooked layers' activations as float32 in plan order.  Images arrive
channel-last and are transposed to channel-first for the model.

Usage:
    python -m nlcov_exporter.serve --builder pkg.module:function \
        --hooks "conv:spatial-mean,fc" --input 8x8x1 --classes 3 \
        [--weights state.pt]
"""

from __future__ import annotations

import argparse
import importlib
import json
import struct
import sys

import numpy as np
import torch

from .hooks import ActivationCapture, ExporterError, HookPlan

_U32 = struct.Struct("<I")

TAG_REQUEST = 1
TAG_RESPONSE = 2


class ProtocolError(RuntimeError):
    pass


def _read_exact(stream, n):
    buf = stream.read(n)
    if buf is None or len(buf) == 0:
        return None
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError(f"peer closed mid-frame ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def serve_runner(
    model: torch.nn.Module,
    plan: HookPlan,
    input_shape,
    classes: int,
    stdin=None,
    stdout=None,
) -> int:
    """Answer framed requests until the peer closes stdin (returns 0).
    Protocol violations raise ProtocolError."""
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    h, w, c = (int(v) for v in input_shape)
    pixels = h * w * c
    model.eval()
    with ActivationCapture(model, plan) as capture:
        # probe once so the handshake carries the reduced layer widths
        probe = torch.zeros((c, h, w), dtype=torch.float32)
        capture.run(probe)
        handshake = {
            "layers": [
                {"name": name, "neurons": width}
                for name, width in zip(capture.layer_names(), capture.widths)
            ],
            "input": [h, w, c],
            "classes": classes,
        }
        stdout.write(json.dumps(handshake).encode() + b"\n")
        stdout.flush()
        while True:
            head = _read_exact(stdin, 4)
            if head is None:
                return 0
            (length,) = _U32.unpack(head)
            tag_buf = _read_exact(stdin, 1)
            if tag_buf is None:
                raise ProtocolError("peer closed between length and tag")
            if tag_buf[0] != TAG_REQUEST:
                raise ProtocolError(
                    f"expected request tag {TAG_REQUEST}, got {tag_buf[0]}"
                )
            if length != 4 * pixels:
                raise ProtocolError(
                    f"request payload {length} bytes, expected {4 * pixels}"
                )
            payload = _read_exact(stdin, length)
            if payload is None:
                raise ProtocolError("peer closed before the request payload")
            image = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
            tensor = torch.from_numpy(image.transpose(2, 0, 1).copy())
            prediction, vectors = capture.run(tensor)
            acts = np.concatenate([v.astype("<f4") for v in vectors])
            body = _U32.pack(prediction) + acts.tobytes()
            stdout.write(_U32.pack(len(body)) + bytes([TAG_RESPONSE]) + body)
            stdout.flush()


def _load_builder(spec: str):
    if ":" not in spec:
        raise ExporterError("builder must be module.path:function")
    module_name, func_name = spec.rsplit(":", 1)
    module = importlib.import_module(module_name)
    try:
        return getattr(module, func_name)
    except AttributeError as exc:
        raise ExporterError(f"builder {spec!r} not found: {exc}") from exc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nlcov-exporter-serve",
                                     description=__doc__)
    parser.add_argument("--builder", required=True,
                        help="model factory, e.g. nlcov_exporter.toy:tiny_conv")
    parser.add_argument("--hooks", required=True,
                        help="hook plan, e.g. conv:spatial-mean,fc")
    parser.add_argument("--input", required=True, help="image shape HxWxC")
    parser.add_argument("--classes", type=int, required=True)
    parser.add_argument("--weights", help="optional state_dict .pt file")
    args = parser.parse_args(argv)
    try:
        model = _load_builder(args.builder)()
        if args.weights:
            model.load_state_dict(torch.load(args.weights, weights_only=True))
        plan = HookPlan.parse(args.hooks)
        shape = tuple(int(v) for v in args.input.lower().split("x"))
        return serve_runner(model, plan, shape, args.classes)
    except ProtocolError as exc:
        print(f"error[protocol]: {exc}", file=sys.stderr)
        return 4
    except ExporterError as exc:
        print(f"error[exporter]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
