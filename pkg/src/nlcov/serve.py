"""Serve a built-in MLP over the framed runner protocol (stdin/stdout).

Usage: python -m nlcov.serve MODEL.json [--shape HxWxC]

Gives the engine a loopback peer for protocol tests and lets the CLI's
--runner flag target a JSON model in another process.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys

import numpy as np

from .runner import TAG_REQUEST, TAG_RESPONSE, MlpModel, forward, load_mlp

_U32 = struct.Struct("<I")


def _read_exact(stream, n: int):
    buf = stream.read(n)
    if buf is None or len(buf) == 0:
        return None  # clean EOF: peer is done
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise IOError(f"peer closed mid-frame ({len(buf)}/{n} bytes)")
        buf += chunk
    return buf


def serve_mlp(model: MlpModel, shape=None, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    if shape is None:
        shape = (1, 1, model.input_dim)
    h, w, c = shape
    if h * w * c != model.input_dim:
        raise ValueError(f"shape {shape} does not flatten to {model.input_dim}")
    handshake = {
        "layers": [{"name": m.name, "neurons": m.neurons} for m in model.layer_metas()],
        "input": [h, w, c],
        "classes": model.class_count,
    }
    stdout.write(json.dumps(handshake).encode() + b"\n")
    stdout.flush()
    pixels = model.input_dim
    while True:
        head = _read_exact(stdin, 4)
        if head is None:
            return 0
        (length,) = _U32.unpack(head)
        tag_buf = _read_exact(stdin, 1)
        if tag_buf is None:
            raise IOError("peer closed between length and tag")
        tag = tag_buf[0]
        if tag != TAG_REQUEST:
            raise IOError(f"protocol violation: expected request tag, got {tag}")
        if length != 4 * pixels:
            raise IOError(
                f"protocol violation: request payload {length} bytes, "
                f"expected {4 * pixels}"
            )
        payload = _read_exact(stdin, length)
        if payload is None:
            raise IOError("peer closed before request payload")
        image = np.frombuffer(payload, dtype="<f4")
        result = forward(model, image)
        acts = np.concatenate([a.astype("<f4") for a in result.activations])
        body = _U32.pack(result.prediction) + acts.tobytes()
        stdout.write(_U32.pack(len(body)) + bytes([TAG_RESPONSE]) + body)
        stdout.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="nlcov-serve", description=__doc__)
    parser.add_argument("model", help="MLP model JSON file")
    parser.add_argument("--shape", help="image shape HxWxC (default 1x1xINPUT_DIM)")
    args = parser.parse_args(argv)
    model = load_mlp(args.model)
    shape = None
    if args.shape:
        shape = tuple(int(v) for v in args.shape.lower().split("x"))
    try:
        return serve_mlp(model, shape=shape)
    except IOError as exc:
        print(f"error[runner]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
