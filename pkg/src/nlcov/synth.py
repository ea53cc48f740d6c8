"""Deterministic generators for desk-scale experiments.

Synthetic Gaussian class blobs stand in for image datasets: zero
downloads, seconds-scale training, and the diversity-ranking property
under study concerns distributional spread, not image content.  All
generators are pure functions of their RNG, so experiments are
reproducible from a single seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .runner import MlpLayer, MlpModel, forward_batch

VARIANTS = ("base", "times1", "times10")


@dataclass(frozen=True)
class DatasetScheme:
    """Diversity scheme: `base` passes inputs through; `times1` and
    `times10` re-emit noised copies of `sample_count` picked sources,
    at 1x and 10x the base cardinality."""

    variant: str = "base"
    noise_bound: float = 0.1
    sample_count: int = 100

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown scheme variant {self.variant!r}")
        if self.noise_bound < 0:
            raise ConfigError("noise_bound must be >= 0")
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")


def make_variant(base, scheme: DatasetScheme, rng: np.random.Generator) -> np.ndarray:
    """Emit the scheme's inputs from a base set (values stay in [0, 1])."""
    base = np.asarray(base, dtype=np.float64)
    if scheme.variant == "base":
        return base.copy()
    if len(base) < scheme.sample_count:
        raise ConfigError(
            f"base set has {len(base)} inputs, scheme needs {scheme.sample_count}"
        )
    count = len(base) if scheme.variant == "times1" else 10 * len(base)
    sources = rng.choice(len(base), size=scheme.sample_count, replace=False)
    out = np.empty((count,) + base.shape[1:], dtype=np.float64)
    for i in range(count):
        src = base[sources[i % scheme.sample_count]]
        noise = rng.uniform(-scheme.noise_bound, scheme.noise_bound, size=src.shape)
        out[i] = np.clip(src + noise, 0.0, 1.0)
    return out


def smoothing_matrix(side: int, self_weight: float = 0.7) -> np.ndarray:
    """Neighbor-averaging operator on a side-by-side pixel grid.

    Rows sum to one, so class patterns pass through while i.i.d. pixel
    noise is damped, the way a visual model's local averaging damps
    white noise.
    """
    if side < 1:
        raise ConfigError("side must be >= 1")
    if not 0 < self_weight <= 1:
        raise ConfigError("self_weight must be in (0, 1]")
    dim = side * side
    mat = np.zeros((dim, dim))
    for r in range(side):
        for c in range(side):
            i = r * side + c
            neigh = [
                rr * side + cc
                for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
                if 0 <= rr < side and 0 <= cc < side
            ]
            mat[i, i] = self_weight
            for j in neigh:
                mat[i, j] = (1.0 - self_weight) / len(neigh)
    return mat


def make_smoothed_classifier(
    classes: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    hidden: int = 96,
    epochs: int = 3000,
    lr: float = 1.0,
    target_accuracy: float = 1.0,
    smoothing_self_weight: float = 0.7,
) -> tuple[MlpModel, np.ndarray, np.ndarray]:
    """Toy classifier with a fixed smoothing front-end layer.

    The first layer averages grid neighbors (dim must be a square); the
    trained layers sit behind it.  Returns the model plus its training
    inputs/labels for warm-start use.
    """
    side = int(round(dim ** 0.5))
    if side * side != dim:
        raise ConfigError(f"dim must be a perfect square for smoothing, got {dim}")
    rng = np.random.default_rng(seed)
    points, labels = make_gaussian_classifier_data(
        classes, per_class, dim, separation, rng
    )
    smooth = smoothing_matrix(side, smoothing_self_weight)
    inner = train_toy_mlp(
        (points @ smooth.T, labels),
        epochs=epochs,
        lr=lr,
        hidden=hidden,
        seed=seed,
        target_accuracy=target_accuracy,
    )
    model = MlpModel(
        input_dim=dim,
        layers=[MlpLayer("smooth", smooth, np.zeros(dim), "none"), *inner.layers],
    )
    return model, points, labels


def make_gaussian_classifier_data(
    classes: int,
    per_class: int,
    dim: int,
    separation: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class blobs inside the unit box.

    Class means sit on scaled one-hot corners so all pairwise mean
    distances are equal; `separation` is that distance in units of the
    blob's per-axis standard deviation.
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if classes > dim:
        raise ConfigError(f"classes ({classes}) cannot exceed dim ({dim})")
    if separation <= 0:
        raise ConfigError("separation must be > 0")
    means = np.full((classes, dim), 0.2)
    for c in range(classes):
        means[c, c] = 0.8
    pair_dist = 0.6 * np.sqrt(2.0)
    sigma = pair_dist / separation
    labels = np.repeat(np.arange(classes), per_class)
    points = means[labels] + sigma * rng.normal(size=(labels.shape[0], dim))
    return np.clip(points, 0.0, 1.0), labels


def train_toy_mlp(
    data: tuple[np.ndarray, np.ndarray],
    epochs: int = 400,
    lr: float = 0.5,
    hidden: int = 32,
    seed: int = 0,
    target_accuracy: float = 0.95,
    input_dim: int | None = None,
    output_activation: str = "none",
) -> MlpModel:
    """Plain full-batch gradient descent on softmax cross-entropy.

    Stops once train accuracy reaches `target_accuracy`; failing to get
    there within `epochs` is an error asking for more separation/epochs.
    A tanh output keeps the score layer bounded, which tames outlier
    leverage in downstream covariance analyses.
    """
    points, labels = data
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, dim = points.shape
    if input_dim is not None and input_dim != dim:
        raise ConfigError(
            f"configured input dim {input_dim} does not match data dim {dim}"
        )
    if output_activation not in ("none", "tanh"):
        raise ConfigError("output_activation must be 'none' or 'tanh'")
    squash = output_activation == "tanh"
    classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    w1 = rng.normal(scale=1.0 / np.sqrt(dim), size=(hidden, dim))
    b1 = np.zeros(hidden)
    w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=(classes, hidden))
    b2 = np.zeros(classes)
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0

    for _ in range(epochs):
        h = np.tanh(points @ w1.T + b1)
        pre = h @ w2.T + b2
        scores = np.tanh(pre) if squash else pre
        shifted = scores - scores.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        if (np.argmax(scores, axis=1) == labels).mean() >= target_accuracy:
            break
        delta2 = (probs - onehot) / n
        if squash:
            delta2 = delta2 * (1.0 - scores * scores)
        grad_w2 = delta2.T @ h
        grad_b2 = delta2.sum(axis=0)
        delta1 = (delta2 @ w2) * (1.0 - h * h)
        grad_w1 = delta1.T @ points
        grad_b1 = delta1.sum(axis=0)
        w2 -= lr * grad_w2
        b2 -= lr * grad_b2
        w1 -= lr * grad_w1
        b1 -= lr * grad_b1

    model = MlpModel(
        input_dim=dim,
        layers=[
            MlpLayer("hidden", w1, b1, "tanh"),
            MlpLayer("logits", w2, b2, output_activation),
        ],
    )
    preds, _ = forward_batch(model, points)
    accuracy = float((preds == labels).mean())
    if accuracy < target_accuracy:
        raise ConfigError(
            f"training stalled at {accuracy:.1%} (< {target_accuracy:.0%}); "
            f"raise separation or epochs"
        )
    return model
