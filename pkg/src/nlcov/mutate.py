"""Image mutation operators and the mutant validity predicate.

Images are (H, W, C) arrays of reals in [0, 1]; every operator preserves
the shape and clamps its output back into [0, 1].  Operators carry their
parameter sampling range; `sample` draws parameters from the supplied
generator and `apply_params` is a pure function of (image, params), which
keeps mutation chains reproducible and lets the fuzz loop pre-sample
candidates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError


def clamp01(image: np.ndarray) -> np.ndarray:
    return np.clip(image, 0.0, 1.0)


def as_image(values, shape=None) -> np.ndarray:
    img = np.asarray(values, dtype=np.float64)
    if shape is not None:
        img = img.reshape(shape)
    if img.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got shape {img.shape}")
    return img


@dataclass(frozen=True)
class ValidityParams:
    """Mutant acceptance bounds: alpha caps the changed-pixel fraction,
    beta caps the largest per-pixel change (normalized units)."""

    alpha: float = 0.2
    beta: float = 0.4

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")


CHANGED_EPS = 1e-6


def is_valid(original: np.ndarray, mutated: np.ndarray, params: ValidityParams) -> bool:
    """A mutant is valid if few pixels changed or all changes are small.

    A pixel counts as changed when any of its channels moved by more
    than a small epsilon.
    """
    original = np.asarray(original, dtype=np.float64)
    mutated = np.asarray(mutated, dtype=np.float64)
    if original.shape != mutated.shape:
        raise ValueError(
            f"image shapes differ: {original.shape} vs {mutated.shape}"
        )
    diff = np.abs(original - mutated)
    changed = (diff > CHANGED_EPS).any(axis=2).sum()
    pixels = original.shape[0] * original.shape[1]
    return changed < params.alpha * pixels or diff.max() < params.beta


class MutationOp:
    name = "?"

    def sample(self, rng: np.random.Generator):
        raise NotImplementedError

    def apply_params(self, image: np.ndarray, params) -> np.ndarray:
        raise NotImplementedError

    def apply(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.apply_params(image, self.sample(rng))

    def describe(self, params) -> str:
        return f"{self.name}({params})"


@dataclass
class Contrast(MutationOp):
    factor_range: tuple[float, float] = (0.7, 1.3)
    name = "contrast"

    def sample(self, rng):
        return float(rng.uniform(*self.factor_range))

    def apply_params(self, image, factor):
        mean = image.mean(axis=(0, 1), keepdims=True)
        return clamp01(mean + factor * (image - mean))

    def describe(self, factor):
        return f"contrast(factor={factor:.4f})"


@dataclass
class Brightness(MutationOp):
    delta_range: tuple[float, float] = (-0.15, 0.15)
    name = "brightness"

    def sample(self, rng):
        return float(rng.uniform(*self.delta_range))

    def apply_params(self, image, delta):
        return clamp01(image + delta)

    def describe(self, delta):
        return f"brightness(delta={delta:+.4f})"


@dataclass
class Translate(MutationOp):
    max_fraction: tuple[float, float] = (0.1, 0.1)
    name = "translate"

    def sample(self, rng):
        return (float(rng.uniform(-self.max_fraction[0], self.max_fraction[0])),
                float(rng.uniform(-self.max_fraction[1], self.max_fraction[1])))

    def apply_params(self, image, params):
        frac_h, frac_w = params
        h, w, _ = image.shape
        dh = int(round(frac_h * h))
        dw = int(round(frac_w * w))
        out = np.zeros_like(image)
        src_h = slice(max(0, -dh), min(h, h - dh))
        src_w = slice(max(0, -dw), min(w, w - dw))
        dst_h = slice(max(0, dh), min(h, h + dh))
        dst_w = slice(max(0, dw), min(w, w + dw))
        out[dst_h, dst_w] = image[src_h, src_w]
        return out

    def describe(self, params):
        return f"translate(dh={params[0]:+.3f}, dw={params[1]:+.3f})"


def _affine_channels(image: np.ndarray, matrix: np.ndarray, offset: np.ndarray):
    """Bilinear warp: output pixel o samples the input at matrix @ o + offset.

    Samples outside the frame contribute zero with true bilinear weights,
    so an identity transform perturbed by float noise stays the identity.
    """
    h, w, _ = image.shape
    grid_h, grid_w = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_h = matrix[0, 0] * grid_h + matrix[0, 1] * grid_w + offset[0]
    src_w = matrix[1, 0] * grid_h + matrix[1, 1] * grid_w + offset[1]
    base_h = np.floor(src_h).astype(np.int64)
    base_w = np.floor(src_w).astype(np.int64)
    frac_h = (src_h - base_h)[:, :, None]
    frac_w = (src_w - base_w)[:, :, None]
    out = np.zeros_like(image)
    for dh, wh in ((0, 1.0 - frac_h), (1, frac_h)):
        for dw, ww in ((0, 1.0 - frac_w), (1, frac_w)):
            hh = base_h + dh
            wwi = base_w + dw
            inside = (hh >= 0) & (hh < h) & (wwi >= 0) & (wwi < w)
            vals = image[np.clip(hh, 0, h - 1), np.clip(wwi, 0, w - 1)]
            out += np.where(inside[:, :, None], wh * ww * vals, 0.0)
    return out


def _center(image: np.ndarray) -> np.ndarray:
    h, w, _ = image.shape
    return np.array([(h - 1) / 2.0, (w - 1) / 2.0])


@dataclass
class Scale(MutationOp):
    factor_range: tuple[float, float] = (0.8, 1.2)
    name = "scale"

    def sample(self, rng):
        return float(rng.uniform(*self.factor_range))

    def apply_params(self, image, factor):
        center = _center(image)
        matrix = np.diag([1.0 / factor, 1.0 / factor])
        offset = center - matrix @ center
        return clamp01(_affine_channels(image, matrix, offset))

    def describe(self, factor):
        return f"scale(factor={factor:.4f})"


@dataclass
class Rotate(MutationOp):
    max_degrees: float = 15.0
    name = "rotate"

    def sample(self, rng):
        return float(rng.uniform(-self.max_degrees, self.max_degrees))

    def apply_params(self, image, degrees):
        theta = math.radians(degrees)
        # output pixel o samples the input at R(-theta) (o - c) + c
        matrix = np.array(
            [[math.cos(theta), math.sin(theta)],
             [-math.sin(theta), math.cos(theta)]]
        )
        center = _center(image)
        offset = center - matrix @ center
        return clamp01(_affine_channels(image, matrix, offset))

    def describe(self, degrees):
        return f"rotate(degrees={degrees:+.3f})"


@dataclass
class Blur(MutationOp):
    sigma_range: tuple[float, float] = (0.5, 2.0)
    name = "blur"

    def sample(self, rng):
        return float(rng.uniform(*self.sigma_range))

    def apply_params(self, image, sigma):
        radius = math.ceil(3.0 * sigma)  # kernel size 2*ceil(3*sigma) + 1
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
        kernel /= kernel.sum()
        out = ndimage.convolve1d(image, kernel, axis=0, mode="nearest")
        out = ndimage.convolve1d(out, kernel, axis=1, mode="nearest")
        return clamp01(out)

    def describe(self, sigma):
        return f"blur(sigma={sigma:.4f})"


OP_CLASSES = {
    cls.name: cls for cls in (Contrast, Brightness, Translate, Scale, Rotate, Blur)
}


def default_ops() -> list[MutationOp]:
    return [Contrast(), Brightness(), Translate(), Scale(), Rotate(), Blur()]


def _build_op(spec: str) -> MutationOp:
    """One operator spec: a bare name for the default range, or
    name:lo:hi (name:max for rotate, name:fh:fw for translate)."""
    parts = [p.strip() for p in spec.split(":")]
    name, params = parts[0], parts[1:]
    if name not in OP_CLASSES:
        raise ConfigError(
            f"unknown mutation operator {name!r}; known: {sorted(OP_CLASSES)}"
        )
    if not params:
        return OP_CLASSES[name]()
    try:
        values = [float(v) for v in params]
    except ValueError as exc:
        raise ConfigError(f"bad operator range in {spec!r}: {exc}") from exc
    if name == "rotate":
        if len(values) != 1:
            raise ConfigError("rotate takes one value: max degrees")
        return Rotate(max_degrees=values[0])
    if len(values) != 2:
        raise ConfigError(f"{name} takes two values, got {len(values)}")
    if name == "translate":
        return Translate(max_fraction=(values[0], values[1]))
    lo, hi = values
    if hi < lo:
        raise ConfigError(f"empty range in {spec!r}")
    if name == "contrast":
        return Contrast(factor_range=(lo, hi))
    if name == "brightness":
        return Brightness(delta_range=(lo, hi))
    if name == "scale":
        return Scale(factor_range=(lo, hi))
    return Blur(sigma_range=(lo, hi))


def build_ops(specs: Sequence[str]) -> list[MutationOp]:
    ops = [_build_op(spec) for spec in specs if spec.strip()]
    if not ops:
        raise ConfigError("operator set is empty")
    return ops
