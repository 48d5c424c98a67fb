"""Pixel embedding: 8-bit color components looked up in a learned table.

Each of the R, G, B components of a pixel selects one column of a shared
``d x 256`` table; the column is passed through the activation quantizer, so a
pixel becomes ``3d`` low-bit channels. For inference the table and quantizer
collapse into a table of integer codes (:class:`MergedTable`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .quant import QuantConfig, QuantizedCode, activation_codes, quantize_activation

N_VALUES = 256


class PixelRangeError(ValueError):
    pass


def one_hot(p: int, n: int = N_VALUES) -> np.ndarray:
    if not 0 <= p < n:
        raise IndexError(f"one_hot index {p} outside [0, {n})")
    h = np.zeros(n, dtype=np.uint8)
    h[p] = 1
    return h


def check_pixels(image, dtype=np.intp) -> np.ndarray:
    img = np.asarray(image)
    if not np.issubdtype(img.dtype, np.integer):
        raise PixelRangeError(f"pixel values must be integers, got dtype {img.dtype}")
    if img.shape[-1:] != (3,):
        raise PixelRangeError(f"expected a trailing RGB axis of 3, got shape {img.shape}")
    # uint8 cannot leave the range, skip the scan
    if img.dtype != np.uint8 and img.size and (img.min() < 0 or img.max() > N_VALUES - 1):
        raise PixelRangeError(f"pixel values outside [0, 255]: [{img.min()}, {img.max()}]")
    return img.astype(dtype, copy=False)


@dataclass
class EmbeddingTable:
    """Float table, ``weights[:, p]`` is the embedding of pixel value ``p``."""

    weights: np.ndarray
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=ad.DTYPE)
        if self.weights.ndim != 2 or self.weights.shape[1] != N_VALUES:
            raise ValueError(f"embedding table must be d x {N_VALUES}, got {self.weights.shape}")

    @property
    def d(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, quant: QuantConfig | None = None,
               ordered: bool = True):
        """Entries drawn uniformly from the quantizer range.

        With ``ordered`` each dimension is sorted along the pixel axis, so the
        initial embedding is monotone in intensity: nearby pixel values share
        codes and sensor noise does not scramble the input.
        """
        quant = quant or QuantConfig()
        w = rng.uniform(quant.lo, quant.hi, size=(d, N_VALUES)).astype(ad.DTYPE)
        if ordered:
            w.sort(axis=1)
        return cls(w, quant)

    def clamp_(self) -> None:
        np.clip(self.weights, self.quant.lo, self.quant.hi, out=self.weights)


def embed_train(image, table, quant: QuantConfig | None = None) -> ad.Tensor:
    """Embed ``(..., H, W, 3)`` pixels into ``(..., H, W, 3d)`` quantized channels.

    ``table`` is an :class:`EmbeddingTable` or a ``(d, 256)`` tensor (then
    ``quant`` gives the quantizer). Channels ``[c*d, (c+1)*d)`` hold component
    ``c`` in R, G, B order.
    """
    if isinstance(table, EmbeddingTable):
        quant = table.quant
        table = table.weights
    quant = quant or QuantConfig()
    img = check_pixels(image)
    table = ad.as_tensor(table)
    d = table.shape[0]
    picked = ad.gather_columns(table, img)
    flat = ad.reshape(picked, img.shape[:-1] + (3 * d,))
    return quantize_activation(flat, quant)


def embed_matmul(image, table: EmbeddingTable) -> np.ndarray:
    """Reference embedding through explicit one-hot matrix products."""
    img = check_pixels(image)
    hot = np.zeros(img.shape + (N_VALUES,), dtype=ad.DTYPE)
    np.put_along_axis(hot, img[..., None], 1.0, axis=-1)
    e = hot @ table.weights.T
    y = quantize_activation(e.reshape(img.shape[:-1] + (-1,)), table.quant)
    return y.data


@dataclass
class MergedTable:
    """Inference table: ``entries[p]`` are the ``d`` integer codes for pixel ``p``."""

    entries: np.ndarray
    quant: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2 or e.shape[0] != N_VALUES:
            raise ValueError(f"merged table must be {N_VALUES} x d, got {e.shape}")
        if e.size and (e.min() < 0 or e.max() > self.quant.max_code):
            raise ValueError(f"merged codes outside [0, {self.quant.max_code}]")
        self.entries = e.astype(np.uint8)

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @property
    def bits(self) -> int:
        return self.quant.activation_bits

    def dequantize(self) -> np.ndarray:
        return self.quant.levels[self.entries]

    def payload_size(self) -> int:
        return -(-N_VALUES * self.d * self.bits // 8)

    def to_bytes(self) -> bytes:
        return pack_codes(self.entries.reshape(-1), self.bits)

    @classmethod
    def from_bytes(cls, payload: bytes, d: int, quant: QuantConfig) -> "MergedTable":
        codes = unpack_codes(payload, N_VALUES * d, quant.activation_bits)
        return cls(codes.reshape(N_VALUES, d), quant)

    def code_string(self, p: int) -> str:
        return format_codes(self.entries[p], self.bits)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack codes LSB-first: code ``i`` occupies stream bits ``[i*bits, (i+1)*bits)``."""
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    planes = (codes[:, None] >> np.arange(bits, dtype=np.uint8)) & 1
    return np.packbits(planes.reshape(-1), bitorder="little").tobytes()


def unpack_codes(payload: bytes, count: int, bits: int) -> np.ndarray:
    need = -(-count * bits // 8)
    if len(payload) != need:
        raise ValueError(f"expected {need} payload bytes for {count} {bits}-bit codes, got {len(payload)}")
    stream = np.unpackbits(np.frombuffer(payload, np.uint8), bitorder="little")
    if stream[count * bits:].any():
        raise ValueError("nonzero padding bits after the last code")
    planes = stream[:count * bits].reshape(count, bits)
    return (planes << np.arange(bits, dtype=np.uint8)).sum(axis=1).astype(np.uint8)


_DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"


def format_codes(codes, bits: int) -> str:
    """One digit per code in base ``2**bits``; dot-separated once digits run out."""
    codes = [int(c) for c in codes]
    if (1 << bits) <= len(_DIGITS):
        return "".join(_DIGITS[c] for c in codes)
    return ".".join(map(str, codes))


def merge_table(table: EmbeddingTable) -> MergedTable:
    return MergedTable(activation_codes(table.weights.T, table.quant), table.quant)


def embed_infer(image, merged: MergedTable) -> QuantizedCode:
    """Table lookup only: ``(..., H, W, 3)`` pixels to ``(..., H, W, 3d)`` codes."""
    img = check_pixels(image)
    codes = merged.entries[img].reshape(img.shape[:-1] + (3 * merged.d,))
    return QuantizedCode(codes, merged.quant)
