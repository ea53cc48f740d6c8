"""Model execution for the coverage engine.

Two paths produce activations and predictions: a built-in multilayer
perceptron (JSON weights, affine-then-nonlinearity chain) for
self-contained use, and an external child process speaking a framed
binary protocol, so any framework can serve a model.

Protocol: the child writes one JSON handshake line
`{"layers": [{"name": .., "neurons": ..}, ..], "input": [H, W, C],
"classes": c}`, then answers framed messages.  Frame = u32 LE payload
length, u8 tag (1 = request, 2 = response), payload.  A request payload
is the H*W*C image as little-endian float32; a response payload is a u32
predicted label followed by all layer activations, concatenated in
handshake order, as little-endian float32.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import struct
import subprocess
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .criteria import LayerMeta
from .errors import FormatError, RunnerError

NONLINEARITIES = ("relu", "tanh", "sigmoid", "none")

_U32 = struct.Struct("<I")

TAG_REQUEST = 1
TAG_RESPONSE = 2


@dataclass
class MlpLayer:
    name: str
    weights: np.ndarray  # (m_out, m_in), row-major
    bias: np.ndarray  # (m_out,)
    activation: str


@dataclass
class MlpModel:
    input_dim: int
    layers: list[MlpLayer]

    @property
    def class_count(self) -> int:
        return self.layers[-1].weights.shape[0]

    def layer_metas(self) -> list[LayerMeta]:
        return [LayerMeta(l.name, l.weights.shape[0]) for l in self.layers]


@dataclass
class RunResult:
    prediction: int
    activations: list[np.ndarray]


def _apply(act: str, z: np.ndarray) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def validate_mlp(model: MlpModel) -> None:
    if not model.layers:
        raise FormatError("model has no layers")
    prev_dim = model.input_dim
    prev_name = "input"
    for layer in model.layers:
        m_out, m_in = layer.weights.shape
        if layer.bias.shape != (m_out,):
            raise FormatError(f"layer {layer.name!r} bias length != output width")
        if m_in != prev_dim:
            raise FormatError(
                f"dimension chain broken between {prev_name!r} (width {prev_dim}) "
                f"and {layer.name!r} (expects {m_in} inputs)"
            )
        if layer.activation not in NONLINEARITIES:
            raise FormatError(
                f"layer {layer.name!r} has unknown nonlinearity "
                f"{layer.activation!r}; expected one of {NONLINEARITIES}"
            )
        prev_dim, prev_name = m_out, layer.name


def load_mlp(path) -> MlpModel:
    """Load and validate an MLP from its JSON file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"model file is not valid JSON: {exc}") from exc
    try:
        layers = [
            MlpLayer(
                name=spec.get("name", f"dense{i}"),
                weights=np.asarray(spec["weights"], dtype=np.float64),
                bias=np.asarray(spec["bias"], dtype=np.float64),
                activation=spec.get("activation", "none"),
            )
            for i, spec in enumerate(doc["layers"])
        ]
        model = MlpModel(input_dim=int(doc["input_dim"]), layers=layers)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model file: {exc}") from exc
    for layer in model.layers:
        if layer.weights.ndim != 2:
            raise FormatError(f"layer {layer.name!r} weights must be a matrix")
    validate_mlp(model)
    return model


def save_mlp(path, model: MlpModel) -> None:
    doc = {
        "input_dim": model.input_dim,
        "layers": [
            {
                "name": l.name,
                "weights": l.weights.tolist(),
                "bias": l.bias.tolist(),
                "activation": l.activation,
            }
            for l in model.layers
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def forward(model: MlpModel, x) -> RunResult:
    """Affine-then-nonlinearity chain; activations are post-nonlinearity."""
    vec = np.asarray(x, dtype=np.float64).ravel()
    if vec.shape[0] != model.input_dim:
        raise ValueError(
            f"input length {vec.shape[0]} != model input dim {model.input_dim}"
        )
    activations = []
    for layer in model.layers:
        vec = _apply(layer.activation, layer.weights @ vec + layer.bias)
        activations.append(vec)
    return RunResult(prediction=int(np.argmax(vec)), activations=activations)


def forward_batch(model: MlpModel, batch) -> tuple[np.ndarray, list[np.ndarray]]:
    """Vectorized forward over an n-by-input_dim batch."""
    mat = np.asarray(batch, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != model.input_dim:
        raise ValueError(f"batch must be n x {model.input_dim}")
    activations = []
    for layer in model.layers:
        mat = _apply(layer.activation, mat @ layer.weights.T + layer.bias)
        activations.append(mat)
    return np.argmax(mat, axis=1), activations


class Runner:
    """Common surface of the in-process and subprocess model runners."""

    layers: list[LayerMeta]
    input_shape: tuple[int, int, int]
    classes: int

    def run(self, image: np.ndarray) -> RunResult:
        raise NotImplementedError

    def close(self) -> None:
        pass


class MlpRunner(Runner):
    def __init__(self, model: MlpModel, input_shape: Optional[Sequence[int]] = None):
        self.model = model
        if input_shape is None:
            input_shape = (1, 1, model.input_dim)
        h, w, c = (int(v) for v in input_shape)
        if h * w * c != model.input_dim:
            raise ValueError(
                f"input shape {(h, w, c)} does not flatten to {model.input_dim}"
            )
        self.input_shape = (h, w, c)
        self.layers = model.layer_metas()
        self.classes = model.class_count

    def run(self, image) -> RunResult:
        return forward(self.model, np.asarray(image).ravel())


def _frame(tag: int, payload: bytes) -> bytes:
    return _U32.pack(len(payload)) + bytes([tag]) + payload


class ExternalRunner(Runner):
    """One child process; strictly serialized request/response exchanges."""

    def __init__(self, command, timeout: float = 30.0):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        try:
            self.proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        except OSError as exc:
            raise RunnerError(f"cannot spawn runner {argv!r}: {exc}") from exc
        handshake = self._read_line()
        try:
            doc = json.loads(handshake)
            self.layers = [
                LayerMeta(spec["name"], int(spec["neurons"])) for spec in doc["layers"]
            ]
            h, w, c = (int(v) for v in doc["input"])
            self.input_shape = (h, w, c)
            self.classes = int(doc["classes"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            self.close()
            raise RunnerError(f"bad handshake from runner: {exc}") from exc
        self._pixels = h * w * c
        self._total_neurons = sum(m.neurons for m in self.layers)
        self._splits = np.cumsum([m.neurons for m in self.layers])[:-1]

    def _fail(self, msg: str) -> RunnerError:
        code = self.proc.poll()
        suffix = f" (child exited with code {code})" if code is not None else ""
        return RunnerError(msg + suffix)

    def _read_exact(self, n: int, what: str) -> bytes:
        fd = self.proc.stdout.fileno()
        deadline = time.monotonic() + self.timeout
        chunks = []
        remaining = n
        while remaining > 0:
            wait = deadline - time.monotonic()
            if wait <= 0:
                raise self._fail(f"timeout after {self.timeout}s while reading {what}")
            ready, _, _ = select.select([fd], [], [], wait)
            if not ready:
                continue
            chunk = os.read(fd, remaining)
            if not chunk:
                raise self._fail(
                    f"child closed its output stream while sending {what} "
                    f"({n - remaining}/{n} bytes received)"
                )
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def _read_line(self) -> bytes:
        fd = self.proc.stdout.fileno()
        deadline = time.monotonic() + self.timeout
        buf = bytearray()
        while True:
            wait = deadline - time.monotonic()
            if wait <= 0:
                raise self._fail("timeout waiting for handshake")
            ready, _, _ = select.select([fd], [], [], wait)
            if not ready:
                continue
            chunk = os.read(fd, 4096)
            if not chunk:
                raise self._fail("child exited before sending a handshake")
            buf.extend(chunk)
            if b"\n" in buf:
                line, _, rest = bytes(buf).partition(b"\n")
                if rest:
                    raise self._fail("unexpected data after handshake line")
                return line

    def run(self, image) -> RunResult:
        img = np.ascontiguousarray(image, dtype="<f4").ravel()
        if img.shape[0] != self._pixels:
            raise ValueError(
                f"image has {img.shape[0]} values, runner expects {self._pixels}"
            )
        try:
            self.proc.stdin.write(_frame(TAG_REQUEST, img.tobytes()))
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise self._fail(f"cannot send request: {exc}") from exc
        (length,) = _U32.unpack(self._read_exact(4, "response length"))
        tag = self._read_exact(1, "response tag")[0]
        if tag != TAG_RESPONSE:
            raise self._fail(f"protocol violation: expected tag {TAG_RESPONSE}, got {tag}")
        expected = 4 + 4 * self._total_neurons
        if length != expected:
            raise self._fail(
                f"protocol violation: response payload {length} bytes, expected {expected}"
            )
        payload = self._read_exact(length, "response payload")
        (label,) = _U32.unpack(payload[:4])
        acts = np.frombuffer(payload[4:], dtype="<f4")
        parts = np.split(acts, self._splits) if len(self.layers) > 1 else [acts]
        return RunResult(prediction=int(label), activations=[p.copy() for p in parts])

    def close(self) -> None:
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
            except OSError:
                pass
            try:
                self.proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_external(command, timeout: float = 30.0) -> ExternalRunner:
    return ExternalRunner(command, timeout=timeout)
