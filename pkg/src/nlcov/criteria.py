"""Coverage criteria over activation traces.

Covariance-based layer coverage plus the eight classic neuron-level
baselines (nc, ncs, kmnc, nbc, snac, tknc, tknp, cc).  Every criterion is
an incrementally updatable state exposing a scalar `value()`; all of them
support snapshot/restore so a fuzzing loop can roll back tentative
updates.

Percentages are reported in [0, 100]; tknp and cc report counts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .accum import CovAccumulator, batch_stats
from .errors import ConfigError

CRITERION_KEYS = ("nlc", "nc", "ncs", "kmnc", "nbc", "snac", "tknc", "tknp", "cc")


@dataclass(frozen=True)
class LayerMeta:
    name: str
    neurons: int

    def __post_init__(self):
        if self.neurons < 1:
            raise ValueError(f"layer {self.name!r} must have >= 1 neurons")


@dataclass
class ActivationBatch:
    """Per-layer neuron outputs for a batch of inputs, plus optional labels."""

    layers: list[np.ndarray]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.layers = [np.asarray(mat) for mat in self.layers]
        if not self.layers:
            raise ValueError("batch needs at least one layer")
        n = self.layers[0].shape[0]
        for mat in self.layers:
            if mat.ndim != 2 or mat.shape[0] != n:
                raise ValueError("all layer matrices must share the same row count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (n,):
                raise ValueError("labels must have one entry per input")

    @property
    def n(self) -> int:
        return self.layers[0].shape[0]


def single_input_batch(activations: Sequence[np.ndarray], label=None) -> ActivationBatch:
    layers = [np.asarray(a, dtype=np.float64).reshape(1, -1) for a in activations]
    labels = None if label is None else np.array([label])
    return ActivationBatch(layers=layers, labels=labels)


@dataclass
class RangeTable:
    """Per-neuron [low, high] output ranges observed on training data."""

    lows: list[np.ndarray]
    highs: list[np.ndarray]


def fit_ranges(batches: Iterable[ActivationBatch]) -> RangeTable:
    """Exact per-neuron min/max over a stream of activation batches."""
    lows: list[np.ndarray] | None = None
    highs: list[np.ndarray] | None = None
    for batch in batches:
        if lows is None:
            lows = [mat.min(axis=0).astype(np.float64) for mat in batch.layers]
            highs = [mat.max(axis=0).astype(np.float64) for mat in batch.layers]
        else:
            for i, mat in enumerate(batch.layers):
                np.minimum(lows[i], mat.min(axis=0), out=lows[i])
                np.maximum(highs[i], mat.max(axis=0), out=highs[i])
    if lows is None:
        raise ValueError("empty trace: cannot fit ranges")
    return RangeTable(lows=lows, highs=highs)


# ---------------------------------------------------------------------------
# snapshot plumbing: criterion state is a nested structure of arrays, sets,
# lists, scalars and accumulators; copied and compared generically
# ---------------------------------------------------------------------------


def _copy_state(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, CovAccumulator):
        return obj.copy()
    if isinstance(obj, list):
        return [_copy_state(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_copy_state(v) for v in obj)
    if isinstance(obj, set):
        return set(obj)
    return obj


def _state_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, np.ndarray):
        return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
    if isinstance(a, CovAccumulator):
        return a.same_state(b)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_state_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, set):
        return a == b
    return a == b


class Criterion:
    """Base contract: update with batches, read a scalar value, roll back."""

    key = "?"
    needs_ranges = False

    def __init__(self, layers: Sequence[LayerMeta]):
        if not layers:
            raise ConfigError("criterion needs at least one layer")
        names = [m.name for m in layers]
        if len(set(names)) != len(names):
            raise ConfigError("layer names must be unique")
        self.layers = list(layers)

    @property
    def total_neurons(self) -> int:
        return sum(m.neurons for m in self.layers)

    def _check_shapes(self, batch: ActivationBatch) -> None:
        if len(batch.layers) != len(self.layers):
            raise ValueError(
                f"shape mismatch: criterion configured for {len(self.layers)} "
                f"layers, batch has {len(batch.layers)}"
            )
        for meta, mat in zip(self.layers, batch.layers):
            if mat.shape[1] != meta.neurons:
                raise ValueError(
                    f"shape mismatch on layer {meta.name!r}: expected "
                    f"{meta.neurons} neurons, got {mat.shape[1]}"
                )

    def update(self, batch: ActivationBatch) -> None:
        raise NotImplementedError

    def value(self) -> float:
        raise NotImplementedError

    def per_layer(self) -> Optional[dict[str, float]]:
        return None

    def set_ranges(self, table: RangeTable) -> None:
        raise ConfigError(f"criterion {self.key!r} takes no fitted ranges")

    def _state(self):
        raise NotImplementedError

    def _set_state(self, state) -> None:
        raise NotImplementedError

    def snapshot(self):
        return _copy_state(self._state())

    def restore(self, snap) -> None:
        self._set_state(_copy_state(snap))

    def state_equal(self, snap) -> bool:
        return _state_equal(self._state(), snap)


class CovarianceCoverage(Criterion):
    """Per-layer neuron-output covariance, scored by normalized entrywise L1.

    The layer score is l1(cov) / m^2 and the total is the sum over layers;
    in class-conditional mode each layer keeps one accumulator per class
    and the total additionally sums over classes.  This is the one
    criterion whose value may decrease under update.
    """

    key = "nlc"

    def __init__(
        self,
        layers: Sequence[LayerMeta],
        class_conditional: bool = False,
        class_count: int = 0,
    ):
        super().__init__(layers)
        if class_conditional and class_count < 1:
            raise ConfigError("class-conditional coverage needs class_count >= 1")
        self.class_conditional = class_conditional
        self.class_count = class_count if class_conditional else 0
        slots = self.class_count if class_conditional else 1
        self.accums = [
            [CovAccumulator(m.neurons) for _ in range(slots)] for m in self.layers
        ]

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        if not self.class_conditional:
            for li, mat in enumerate(batch.layers):
                self.accums[li][0].absorb(batch_stats(mat))
            return
        if batch.labels is None:
            raise ValueError("class-conditional update needs labeled batches")
        labels = batch.labels.astype(np.int64)
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValueError(
                f"label out of range [0, {self.class_count}): "
                f"{int(labels.min())}..{int(labels.max())}"
            )
        for c in np.unique(labels):
            rows = labels == c
            for li, mat in enumerate(batch.layers):
                self.accums[li][int(c)].absorb(batch_stats(mat[rows]))

    def _layer_value(self, li: int) -> float:
        m = self.layers[li].neurons
        return sum(acc.l1() for acc in self.accums[li]) / (m * m)

    def value(self) -> float:
        return sum(self._layer_value(li) for li in range(len(self.layers)))

    def per_layer(self) -> dict[str, float]:
        return {m.name: self._layer_value(li) for li, m in enumerate(self.layers)}

    def _state(self):
        return self.accums

    def _set_state(self, state) -> None:
        self.accums = state


class _FlagCriterion(Criterion):
    """Shared machinery for criteria whose state is one flag set per layer."""

    def __init__(self, layers: Sequence[LayerMeta]):
        super().__init__(layers)
        self.flags = [np.zeros(m.neurons, dtype=bool) for m in self.layers]

    def _flag_fraction(self) -> float:
        hit = sum(int(f.sum()) for f in self.flags)
        return 100.0 * hit / self.total_neurons

    def per_layer(self) -> dict[str, float]:
        return {
            m.name: 100.0 * float(f.sum()) / m.neurons
            for m, f in zip(self.layers, self.flags)
        }

    def _state(self):
        return self.flags

    def _set_state(self, state) -> None:
        self.flags = state


class NeuronCoverage(_FlagCriterion):
    """Neuron flagged once any input drives its output strictly above T."""

    key = "nc"

    def __init__(self, layers, threshold: float = 0.0):
        super().__init__(layers)
        self.threshold = float(threshold)

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        for flags, mat in zip(self.flags, batch.layers):
            flags |= (mat > self.threshold).any(axis=0)

    def value(self) -> float:
        return self._flag_fraction()


class RescaledNeuronCoverage(_FlagCriterion):
    """Neuron coverage on per-input, per-layer min-max rescaled outputs.

    A constant layer row rescales to all zeros and never activates.
    """

    key = "ncs"

    def __init__(self, layers, threshold: float = 0.5):
        super().__init__(layers)
        self.threshold = float(threshold)

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        for flags, mat in zip(self.flags, batch.layers):
            mat = np.asarray(mat, dtype=np.float64)
            lo = mat.min(axis=1, keepdims=True)
            span = mat.max(axis=1, keepdims=True) - lo
            scaled = np.zeros_like(mat)
            np.divide(mat - lo, span, out=scaled, where=span > 0)
            flags |= (scaled > self.threshold).any(axis=0)

    def value(self) -> float:
        return self._flag_fraction()


class _RangedCriterion(Criterion):
    needs_ranges = True

    def __init__(self, layers):
        super().__init__(layers)
        self.ranges: Optional[RangeTable] = None

    def set_ranges(self, table: RangeTable) -> None:
        if len(table.lows) != len(self.layers):
            raise ConfigError("range table layer count does not match criterion")
        for meta, lo, hi in zip(self.layers, table.lows, table.highs):
            if lo.shape != (meta.neurons,) or hi.shape != (meta.neurons,):
                raise ConfigError(f"range table shape mismatch on {meta.name!r}")
            if np.any(lo > hi):
                raise ConfigError("range table has low > high")
        self.ranges = table
        self._on_ranges()

    def _on_ranges(self) -> None:
        pass

    def _require_ranges(self) -> RangeTable:
        if self.ranges is None:
            raise ValueError(f"criterion {self.key!r} updated before ranges were fit")
        return self.ranges


class KSectionCoverage(_RangedCriterion):
    """Each neuron's fitted range is split into K segments; coverage counts
    segments hit.  x == high lands in the last segment, out-of-range
    outputs mark nothing."""

    key = "kmnc"

    def __init__(self, layers, k: int = 10):
        super().__init__(layers)
        if k < 1:
            raise ConfigError("kmnc needs k >= 1")
        self.k = int(k)
        self.segments: list[np.ndarray] = []

    def _on_ranges(self) -> None:
        if not self.segments:
            self.segments = [
                np.zeros((m.neurons, self.k), dtype=bool) for m in self.layers
            ]

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        table = self._require_ranges()
        for li, mat in enumerate(batch.layers):
            mat = np.asarray(mat, dtype=np.float64)
            lo, hi = table.lows[li], table.highs[li]
            span = hi - lo
            in_range = (mat >= lo) & (mat <= hi)
            idx = np.zeros_like(mat, dtype=np.int64)
            np.floor_divide(self.k * (mat - lo), span, out=idx, casting="unsafe",
                            where=span > 0)
            idx = np.clip(idx, 0, self.k - 1)
            # degenerate range (high == low): the single in-range value
            # counts as the last segment, consistent with x == high
            idx[:, span == 0] = self.k - 1
            rows, cols = np.nonzero(in_range)
            self.segments[li][cols, idx[rows, cols]] = True

    def value(self) -> float:
        covered = sum(int(s.sum()) for s in self.segments)
        return 100.0 * covered / (self.total_neurons * self.k)

    def per_layer(self) -> dict[str, float]:
        return {
            m.name: 100.0 * float(s.sum()) / (m.neurons * self.k)
            for m, s in zip(self.layers, self.segments)
        }

    def _state(self):
        return self.segments

    def _set_state(self, state) -> None:
        self.segments = state


class BoundaryCoverage(_RangedCriterion):
    """Corner flags for outputs strictly outside the fitted range."""

    key = "nbc"

    def __init__(self, layers):
        super().__init__(layers)
        self.low_flags = [np.zeros(m.neurons, dtype=bool) for m in self.layers]
        self.high_flags = [np.zeros(m.neurons, dtype=bool) for m in self.layers]

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        table = self._require_ranges()
        for li, mat in enumerate(batch.layers):
            self.low_flags[li] |= (mat < table.lows[li]).any(axis=0)
            self.high_flags[li] |= (mat > table.highs[li]).any(axis=0)

    def value(self) -> float:
        hit = sum(int(f.sum()) for f in self.low_flags)
        hit += sum(int(f.sum()) for f in self.high_flags)
        return 100.0 * hit / (2 * self.total_neurons)

    def per_layer(self) -> dict[str, float]:
        return {
            m.name: 100.0 * (float(lo.sum()) + float(hi.sum())) / (2 * m.neurons)
            for m, lo, hi in zip(self.layers, self.low_flags, self.high_flags)
        }

    def _state(self):
        return (self.low_flags, self.high_flags)

    def _set_state(self, state) -> None:
        self.low_flags, self.high_flags = state


class UpperBoundaryCoverage(_RangedCriterion):
    """Flags only outputs strictly above the fitted upper bound."""

    key = "snac"

    def __init__(self, layers):
        super().__init__(layers)
        self.flags = [np.zeros(m.neurons, dtype=bool) for m in self.layers]

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        table = self._require_ranges()
        for li, mat in enumerate(batch.layers):
            self.flags[li] |= (mat > table.highs[li]).any(axis=0)

    def value(self) -> float:
        return 100.0 * sum(int(f.sum()) for f in self.flags) / self.total_neurons

    def per_layer(self) -> dict[str, float]:
        return {
            m.name: 100.0 * float(f.sum()) / m.neurons
            for m, f in zip(self.layers, self.flags)
        }

    def _state(self):
        return self.flags

    def _set_state(self, state) -> None:
        self.flags = state


def _topk_columns(mat: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest entries, ties to the lowest index."""
    # stable argsort on the negated values keeps the lowest column first
    # among equal outputs
    return np.argsort(-mat, axis=1, kind="stable")[:, :k]


class TopKCoverage(_FlagCriterion):
    """Neuron flagged once it ranks among the top K outputs of its layer."""

    key = "tknc"

    def __init__(self, layers, k: int = 1):
        super().__init__(layers)
        if k < 1:
            raise ConfigError("tknc needs k >= 1")
        for meta in layers:
            if k > meta.neurons:
                raise ConfigError(
                    f"tknc k={k} exceeds layer {meta.name!r} width {meta.neurons}"
                )
        self.k = int(k)

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        for flags, mat in zip(self.flags, batch.layers):
            idx = _topk_columns(np.asarray(mat, dtype=np.float64), self.k)
            flags[np.unique(idx)] = True

    def value(self) -> float:
        return self._flag_fraction()


class TopKPatternCoverage(Criterion):
    """Counts distinct activation patterns: per input, the concatenation over
    layers of the sorted top-K neuron-index sets, stored as 64-bit hashes."""

    key = "tknp"

    def __init__(self, layers, k: int = 1):
        super().__init__(layers)
        if k < 1:
            raise ConfigError("tknp needs k >= 1")
        for meta in layers:
            if k > meta.neurons:
                raise ConfigError(
                    f"tknp k={k} exceeds layer {meta.name!r} width {meta.neurons}"
                )
        self.k = int(k)
        self.patterns: set[int] = set()

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        per_layer = [
            np.sort(_topk_columns(np.asarray(mat, dtype=np.float64), self.k), axis=1)
            for mat in batch.layers
        ]
        joined = np.concatenate(per_layer, axis=1).astype("<u4")
        for row in joined:
            digest = hashlib.blake2b(row.tobytes(), digest_size=8).digest()
            self.patterns.add(int.from_bytes(digest, "little"))

    def value(self) -> float:
        return float(len(self.patterns))

    def _state(self):
        return self.patterns

    def _set_state(self, state) -> None:
        self.patterns = state


class ClusterCoverage(Criterion):
    """Counts clusters of layer-output vectors on the monitored layers.

    An input joins the first existing cluster whose founding center lies
    within Euclidean distance T, else it founds a new cluster.  Centers
    are never re-fit, keeping the update order-stable.
    """

    key = "cc"

    def __init__(self, layers, threshold: float, monitored: Sequence[int] | None = None):
        super().__init__(layers)
        if threshold <= 0:
            raise ConfigError("cc needs a threshold > 0")
        self.threshold = float(threshold)
        if monitored is None:
            monitored = [len(self.layers) - 1]
        monitored = list(monitored)
        for li in monitored:
            if not 0 <= li < len(self.layers):
                raise ConfigError(f"monitored layer index {li} out of range")
        if not monitored:
            raise ConfigError("cc needs at least one monitored layer")
        self.monitored = monitored
        self.centers: dict[int, list[np.ndarray]] = {li: [] for li in monitored}

    def update(self, batch: ActivationBatch) -> None:
        self._check_shapes(batch)
        for li in self.monitored:
            mat = np.asarray(batch.layers[li], dtype=np.float64)
            centers = self.centers[li]
            for row in mat:
                if centers:
                    stacked = np.stack(centers)
                    dists = np.linalg.norm(stacked - row, axis=1)
                    if dists.min() <= self.threshold:
                        continue
                centers.append(row.copy())

    def value(self) -> float:
        return float(sum(len(c) for c in self.centers.values()))

    def per_layer(self) -> dict[str, float]:
        return {
            self.layers[li].name: float(len(c)) for li, c in self.centers.items()
        }

    def _state(self):
        return [self.centers[li] for li in self.monitored]

    def _set_state(self, state) -> None:
        self.centers = {li: lst for li, lst in zip(self.monitored, state)}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CriterionConfig:
    """Parsed key=value criterion configuration."""

    criterion: str = "nlc"
    t: Optional[float] = None
    k: Optional[int] = None
    cc_t: Optional[float] = None
    layers: Optional[list[str]] = None
    class_conditional: bool = False
    class_count: int = 0

    def describe(self) -> str:
        parts = [f"criterion={self.criterion}"]
        if self.t is not None:
            parts.append(f"t={self.t}")
        if self.k is not None:
            parts.append(f"k={self.k}")
        if self.cc_t is not None:
            parts.append(f"cc_t={self.cc_t}")
        if self.layers:
            parts.append("layers=" + ",".join(self.layers))
        if self.class_conditional:
            parts.append("class_conditional=true")
        return " ".join(parts)


def parse_kv_pairs(text: str) -> dict[str, str]:
    """Parse whitespace/comma/newline separated key=value pairs."""
    pairs: dict[str, str] = {}
    for chunk in text.replace("\n", " ").split():
        chunk = chunk.strip().rstrip(";")
        if not chunk or chunk.startswith("#"):
            continue
        if "=" not in chunk:
            raise ConfigError(f"expected key=value, got {chunk!r}")
        key, val = chunk.split("=", 1)
        pairs[key.strip()] = val.strip()
    return pairs


def _parse_bool(val: str) -> bool:
    if val.lower() in ("true", "1", "yes"):
        return True
    if val.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {val!r}")


def criterion_config_from_pairs(pairs: dict[str, str]) -> CriterionConfig:
    cfg = CriterionConfig()
    for key, val in pairs.items():
        if key == "criterion":
            if val not in CRITERION_KEYS:
                raise ConfigError(f"unknown criterion {val!r}")
            cfg.criterion = val
        elif key == "t":
            cfg.t = float(val)
        elif key == "k":
            cfg.k = int(val)
        elif key == "cc_t":
            cfg.cc_t = float(val)
        elif key == "layers":
            cfg.layers = [v for v in val.split(",") if v]
        elif key == "class_conditional":
            cfg.class_conditional = _parse_bool(val)
        elif key == "class_count":
            cfg.class_count = int(val)
        else:
            raise ConfigError(f"unknown criterion option {key!r}")
    return cfg


def make_criterion(cfg: CriterionConfig, layers: Sequence[LayerMeta]) -> Criterion:
    """Instantiate the configured criterion over the given layer list."""
    if cfg.criterion == "nlc":
        return CovarianceCoverage(
            layers,
            class_conditional=cfg.class_conditional,
            class_count=cfg.class_count,
        )
    if cfg.criterion == "nc":
        return NeuronCoverage(layers, threshold=0.0 if cfg.t is None else cfg.t)
    if cfg.criterion == "ncs":
        return RescaledNeuronCoverage(layers, threshold=0.5 if cfg.t is None else cfg.t)
    if cfg.criterion == "kmnc":
        return KSectionCoverage(layers, k=10 if cfg.k is None else cfg.k)
    if cfg.criterion == "nbc":
        return BoundaryCoverage(layers)
    if cfg.criterion == "snac":
        return UpperBoundaryCoverage(layers)
    if cfg.criterion == "tknc":
        return TopKCoverage(layers, k=1 if cfg.k is None else cfg.k)
    if cfg.criterion == "tknp":
        return TopKPatternCoverage(layers, k=1 if cfg.k is None else cfg.k)
    if cfg.criterion == "cc":
        if cfg.cc_t is None:
            raise ConfigError("cc requires cc_t=<distance threshold>")
        monitored = None
        if cfg.layers:
            by_name = {m.name: i for i, m in enumerate(layers)}
            missing = [n for n in cfg.layers if n not in by_name]
            if missing:
                raise ConfigError(f"monitored layers not in model: {missing}")
            monitored = [by_name[n] for n in cfg.layers]
        return ClusterCoverage(layers, threshold=cfg.cc_t, monitored=monitored)
    raise ConfigError(f"unknown criterion {cfg.criterion!r}")
