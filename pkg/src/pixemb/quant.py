"""Uniform activation quantizer and sign/scale weight binarizer with STE rules."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import DTYPE, Tensor, as_tensor, custom_op


class QuantizationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuantConfig:
    activation_bits: int = 2
    weight_bits: int = 1
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not 1 <= self.activation_bits <= 8:
            raise ValueError(f"activation_bits must be in [1, 8], got {self.activation_bits}")
        if self.weight_bits != 1:
            raise ValueError("only binary weights (weight_bits=1) are supported")
        if not self.lo < self.hi:
            raise ValueError(f"empty activation range [{self.lo}, {self.hi}]")

    @property
    def max_code(self) -> int:
        return (1 << self.activation_bits) - 1

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.max_code

    @property
    def levels(self) -> np.ndarray:
        """Real value of every code, in code order."""
        return _levels(self.activation_bits, self.lo, self.hi)


@lru_cache(maxsize=None)
def _levels(bits: int, lo: float, hi: float) -> np.ndarray:
    n = (1 << bits) - 1
    codes = np.arange(n + 1, dtype=DTYPE)
    lv = DTYPE(lo) + codes / DTYPE(n) * DTYPE(hi - lo)
    lv.setflags(write=False)
    return lv


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def activation_codes(x, config: QuantConfig) -> np.ndarray:
    """Integer codes in ``[0, 2**bits - 1]`` for real inputs (no tape)."""
    x = np.asarray(x, dtype=DTYPE)
    lo, hi = DTYPE(config.lo), DTYPE(config.hi)
    v = (np.clip(x, lo, hi) - lo) / (hi - lo) * DTYPE(config.max_code)
    return round_half_away(v).astype(np.uint8)


def dequantize(codes, config: QuantConfig) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > config.max_code):
        raise ValueError(f"codes outside [0, {config.max_code}]")
    return config.levels[codes]


@dataclass
class QuantizedCode:
    """Integer codes plus the affine that maps them back to reals."""

    codes: np.ndarray
    config: QuantConfig

    def __post_init__(self):
        c = self.codes
        if c.size and (c.min() < 0 or c.max() > self.config.max_code):
            raise ValueError(f"codes outside [0, {self.config.max_code}]")

    @property
    def scale(self) -> float:
        return self.config.step

    @property
    def zero_level(self) -> int:
        return int(round(-self.config.lo / self.config.step))

    def dequantize(self) -> np.ndarray:
        return self.config.levels[self.codes]


def ste_backward(upstream_grad, forward_input, clip_range=None) -> np.ndarray:
    """Straight-through gradient, zeroed where the input left ``clip_range``."""
    g = np.asarray(upstream_grad, dtype=DTYPE)
    if clip_range is None:
        return g
    x = np.asarray(forward_input)
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {x.shape}")
    lo, hi = clip_range
    return np.where((x >= lo) & (x <= hi), g, DTYPE(0))


def quantize_activation(x, config: QuantConfig) -> Tensor:
    """Uniform fake-quantization to ``2**bits`` levels over ``[lo, hi]``.

    Backward is the clipped straight-through estimator.
    """
    x = as_tensor(x)
    xd = x.data
    out = config.levels[activation_codes(xd, config)]
    clip = (config.lo, config.hi)
    return custom_op("quantize-activation", [x], out,
                     lambda g: (ste_backward(g, xd, clip),))


def weight_scale(w: np.ndarray, per_channel: bool = True) -> np.ndarray:
    """Mean absolute value per output channel (axis 0), or one scalar per tensor."""
    w = np.asarray(w, dtype=DTYPE)
    if per_channel:
        alpha = np.abs(w.reshape(w.shape[0], -1)).mean(axis=1, dtype=np.float64).astype(DTYPE)
    else:
        alpha = np.full(w.shape[0], np.abs(w).mean(dtype=np.float64), DTYPE)
    if np.any(alpha == 0):
        dead = np.flatnonzero(alpha == 0).tolist()
        warnings.warn(f"all-zero weight channel(s) {dead}: scale is 0",
                      QuantizationWarning, stacklevel=3)
    return alpha


def sign_bits(w) -> np.ndarray:
    """True where the binarized weight is +1 (sign(0) is +1)."""
    return np.asarray(w) >= 0


def binarize(w: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    bshape = (-1,) + (1,) * (w.ndim - 1)
    a = alpha.reshape(bshape)
    return np.where(sign_bits(w), a, -a).astype(DTYPE)


def quantize_weight(w, per_channel: bool = True) -> tuple[Tensor, np.ndarray]:
    """Binarize to ``alpha_c * sign(w_c)``.

    Returns the quantized tensor and the scales. The gradient passes through
    the sign unchanged; no gradient flows into the scale.
    """
    w = as_tensor(w)
    if w.data.ndim not in (2, 4):
        raise ValueError(f"expected a (out, in) or (out, in, kh, kw) weight, got {w.shape}")
    alpha = weight_scale(w.data, per_channel)
    out = binarize(w.data, alpha)
    return custom_op("quantize-weight", [w], out, lambda g: (g,)), alpha


def sign_weight(w) -> Tensor:
    """Unscaled ``sign(w)`` in {-1, +1}; identity gradient.

    Used for the classifier, whose integer outputs feed the loss directly.
    """
    w = as_tensor(w)
    out = binarize(w.data, np.ones(w.shape[0], dtype=DTYPE))
    return custom_op("sign-weight", [w], out, lambda g: (g,))
