"""Bit-plane packed activations, sign-packed weights and a popcount convolution.

Layouts (all words are little-endian ``uint64``):

* :class:`PackedTensor` ``words[n, k, y, x, j]`` holds bit ``k`` of the codes of
  channels ``64*j .. 64*j+63`` at pixel ``(y, x)``; channel ``c`` sits in lane
  ``c % 64``. Lanes past the real channel count are zero.
* :class:`PackedWeights` ``signs[o, ty, tx, j]`` has lane ``c % 64`` set when
  weight ``(o, c, ty, tx)`` is ``+1``. Padded lanes are zero.

For activation codes ``a = sum_k 2**k a_k`` and binary weights the kernel uses

    sum_c w_c a_c = sum_k 2**k (2 * popcount(a_k & pos) - popcount(a_k))

which only counts lanes holding real, in-bounds activations, so channel padding
and spatial zero padding (code 0) contribute nothing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numba
import numpy as np
from numba.extending import intrinsic

from .embedding import MergedTable, check_pixels
from .autodiff import DTYPE
from .quant import QuantConfig, weight_scale

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # skip the TBB probe: older system TBB builds trigger a warning on first launch
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

LANES = 64
_WORD = np.dtype("<u8")


class PackError(ValueError):
    pass


def n_words(channels: int) -> int:
    return -(-channels // LANES)


def _pack_lanes(bits: np.ndarray, channels: int) -> np.ndarray:
    """Pack a trailing 0/1 axis of length ``channels`` into uint64 words."""
    nw = n_words(channels)
    pad = nw * LANES - channels
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), np.uint8)], axis=-1)
    packed = np.packbits(bits.astype(np.uint8, copy=False), axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(_WORD).astype(np.uint64, copy=False)


def _unpack_lanes(words: np.ndarray, channels: int) -> np.ndarray:
    b = np.ascontiguousarray(words.astype(_WORD, copy=False)).view(np.uint8)
    return np.unpackbits(b, axis=-1, bitorder="little")[..., :channels]


@dataclass
class PackedTensor:
    shape: tuple[int, int, int, int]
    bits: int
    words: np.ndarray

    @property
    def channels(self) -> int:
        return self.shape[1]

    def unpack(self) -> np.ndarray:
        """Codes as a ``(N, C, H, W)`` uint8 array."""
        planes = _unpack_lanes(self.words, self.channels)  # N, Q, H, W, C
        codes = np.zeros(planes.shape[:1] + planes.shape[2:], np.uint8)
        for k in range(self.bits):
            codes |= planes[:, k] << np.uint8(k)
        return np.ascontiguousarray(codes.transpose(0, 3, 1, 2))


def pack_activations(codes, bits: int | None = None, channel_axis: int = 1) -> PackedTensor:
    """Pack integer codes of a 4-D tensor into bit planes.

    ``codes`` is an array or :class:`~pixemb.quant.QuantizedCode`; ``bits``
    defaults to the code config's activation bits.
    """
    if hasattr(codes, "config"):
        bits = bits or codes.config.activation_bits
        codes = codes.codes
    arr = np.asarray(codes)
    if bits is None:
        raise PackError("bit width required for raw code arrays")
    if arr.ndim != 4:
        raise PackError(f"expected a 4-D code tensor, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > (1 << bits) - 1):
        raise PackError(f"codes outside [0, {(1 << bits) - 1}]")
    nhwc = np.moveaxis(arr, channel_axis, -1).astype(np.uint8)
    n, h, w, c = nhwc.shape
    planes = (nhwc[:, None] >> np.arange(bits, dtype=np.uint8)[None, :, None, None, None]) & 1
    return PackedTensor((n, c, h, w), bits, _pack_lanes(planes, c))


@dataclass
class PackedWeights:
    shape: tuple[int, int, int, int]
    signs: np.ndarray
    alpha: np.ndarray
    _dense: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_float(cls, w: np.ndarray, per_channel: bool = True) -> "PackedWeights":
        w = np.asarray(w, dtype=DTYPE)
        if w.ndim == 2:
            w = w[:, :, None, None]
        return cls.from_signs(w >= 0, weight_scale(w, per_channel))

    @classmethod
    def from_signs(cls, positive: np.ndarray, alpha: np.ndarray) -> "PackedWeights":
        positive = np.asarray(positive, dtype=bool)
        o, c, kh, kw = positive.shape
        signs = _pack_lanes(positive.transpose(0, 2, 3, 1), c)
        return cls((o, c, kh, kw), signs, np.asarray(alpha, dtype=DTYPE).reshape(o))

    def positive(self) -> np.ndarray:
        return _unpack_lanes(self.signs, self.shape[1]).transpose(0, 3, 1, 2).astype(bool)

    def dequantize(self) -> np.ndarray:
        a = self.alpha.reshape(-1, 1, 1, 1)
        return np.where(self.positive(), a, -a).astype(DTYPE)

    def dense(self) -> np.ndarray:
        """Signs with taps folded into one bit string, shape ``(words, out)``.

        Bit ``(ty*kw + tx)*C + c`` of output ``o`` is weight ``(o, c, ty, tx)``.
        """
        if self._dense is None:
            o, c, kh, kw = self.shape
            flat = self.positive().transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
            self._dense = np.ascontiguousarray(_pack_lanes(flat, kh * kw * c).T)
        return self._dense

    def signed_sum(self) -> np.ndarray:
        """Per output channel: number of +1 weights minus number of -1 weights."""
        o, c, kh, kw = self.shape
        pos = self.positive().reshape(o, -1).sum(axis=1)
        return 2 * pos - c * kh * kw


@intrinsic
def _popcount(typingctx, x):
    def codegen(context, builder, sig, args):
        return builder.ctpop(args[0])

    return x(x), codegen


@numba.njit(cache=True, boundscheck=False)
def _build_cols(words, n, nwk, channels, kh, kw, stride, pad, ho, wo):
    # im2col over bits: each output pixel gets the kh*kw*channels input bits
    # laid out tap-major, matching the weight layout of PackedWeights.dense
    q = words.shape[1]
    h, w, nwc = words.shape[2], words.shape[3], words.shape[4]
    cols = np.zeros((q, nwk, ho * wo), np.uint64)
    for ty in range(kh):
        for tx in range(kw):
            bit0 = (ty * kw + tx) * channels
            # output columns whose input column stays in bounds
            ox0 = max(0, (pad - tx + stride - 1) // stride)
            ox1 = min(wo, (w - 1 + pad - tx) // stride + 1)
            for j in range(nwc):
                bit = bit0 + LANES * j
                wi = bit >> 6
                off = np.uint64(bit & 63)
                spill = off != 0 and wi + 1 < nwk
                roff = np.uint64(64) - off if off != 0 else np.uint64(0)
                for k in range(q):
                    for oy in range(ho):
                        iy = oy * stride + ty - pad
                        if iy < 0 or iy >= h:
                            continue
                        row = oy * wo
                        for ox in range(ox0, ox1):
                            a = words[n, k, iy, ox * stride + tx - pad, j]
                            cols[k, wi, row + ox] |= a << off
                            if spill:
                                cols[k, wi + 1, row + ox] |= a >> roff
    return cols


@numba.njit(cache=True, boundscheck=False)
def _conv_image(words, n, dense, channels, kh, kw, stride, pad, factor, offset, out_i, out_f):
    # writes NCHW planes: int accumulators when out_i is non-empty,
    # else factor[o] * acc + offset[o] as float32
    nwk, o_count = dense.shape
    ho = (words.shape[2] + 2 * pad - kh) // stride + 1
    wo = (words.shape[3] + 2 * pad - kw) // stride + 1
    npix = ho * wo
    want_int = out_i.size > 0
    cols = _build_cols(words, n, nwk, channels, kh, kw, stride, pad, ho, wo)
    q = cols.shape[0]
    # sum_i x_i * (2 b_i - 1): the -sum_i x_i part is shared by every output channel
    base = np.zeros(npix, np.int64)
    for k in range(q):
        for wi in range(nwk):
            c = cols[k, wi]
            for p in range(npix):
                base[p] += np.int64(_popcount(c[p])) << k
    acc = np.empty(npix, np.int64)
    for o in range(o_count):
        for p in range(npix):
            acc[p] = -base[p]
        for k in range(q):
            sh = k + 1
            wi = 0
            # two words per pass keeps the popcount unit busier
            while wi + 1 < nwk:
                c0 = cols[k, wi]
                c1 = cols[k, wi + 1]
                w0 = dense[wi, o]
                w1 = dense[wi + 1, o]
                for p in range(npix):
                    acc[p] += np.int64(_popcount(c0[p] & w0) + _popcount(c1[p] & w1)) << sh
                wi += 2
            if wi < nwk:
                c0 = cols[k, wi]
                w0 = dense[wi, o]
                for p in range(npix):
                    acc[p] += np.int64(_popcount(c0[p] & w0)) << sh
        if want_int:
            dst_i = out_i[n, o].reshape(npix)
            for p in range(npix):
                dst_i[p] = np.int32(acc[p])
        else:
            f = factor[o]
            b = offset[o]
            dst_f = out_f[n, o].reshape(npix)
            for p in range(npix):
                dst_f[p] = np.float32(f * np.float64(acc[p]) + b)


@numba.njit(cache=True, parallel=True)
def _conv_batch(words, dense, channels, kh, kw, stride, pad, factor, offset, out_i, out_f):
    for n in numba.prange(words.shape[0]):
        _conv_image(words, n, dense, channels, kh, kw, stride, pad, factor, offset, out_i, out_f)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def check_accumulator_bound(bits: int, channels: int, kh: int, kw: int) -> None:
    bound = ((1 << bits) - 1) * channels * kh * kw
    if bound >= 2**31:
        raise PackError(f"accumulator bound {bound} overflows int32")


_NO_INT = np.empty((0, 0, 0, 0), np.int32)
_NO_FLOAT = np.empty((0, 0, 0, 0), np.float32)
_NO_SCALE = np.empty(0, np.float64)


def _run_conv(x: PackedTensor, w: PackedWeights, stride: int, padding: int,
              factor=None, offset=None) -> np.ndarray:
    n, c, h, wd = x.shape
    o, wc, kh, kw = w.shape
    if c != wc or x.words.shape[-1] != n_words(c):
        raise PackError(f"packed-conv2d: input has {c} channels, weights expect {wc}")
    if stride < 1 or h + 2 * padding < kh or wd + 2 * padding < kw:
        raise PackError(f"packed-conv2d: kernel {kh}x{kw} does not fit {h}x{wd} with padding {padding}")
    check_accumulator_bound(x.bits, c, kh, kw)
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    if factor is None:
        out_i, out_f, factor, offset = np.empty((n, o, ho, wo), np.int32), _NO_FLOAT, _NO_SCALE, _NO_SCALE
        out = out_i
    else:
        out_i, out_f = _NO_INT, np.empty((n, o, ho, wo), np.float32)
        out = out_f
    words = x.words if x.words.flags.c_contiguous else np.ascontiguousarray(x.words)
    args = (w.dense(), c, kh, kw, stride, padding, factor, offset, out_i, out_f)
    if n == 1:
        _conv_image(words, 0, *args)
    else:
        _conv_batch(words, *args)
    return out


def packed_conv2d_int(x: PackedTensor, w: PackedWeights, stride: int = 1,
                      padding: int = 0) -> np.ndarray:
    """Integer accumulators ``sum sign(w) * code``, shape ``(N, O, Ho, Wo)``."""
    return _run_conv(x, w, stride, padding)


def output_affine(w: PackedWeights, config: QuantConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel ``(factor, offset)`` with ``real = factor*acc + offset``.

    Spatial padding counts as code 0, i.e. value ``lo``.
    """
    alpha = w.alpha.astype(np.float64)
    factor = alpha * (config.hi - config.lo) / config.max_code
    offset = alpha * config.lo * w.signed_sum() if config.lo else np.zeros_like(alpha)
    return factor, offset


def dequantize_accumulator(acc: np.ndarray, w: PackedWeights, config: QuantConfig) -> np.ndarray:
    factor, offset = output_affine(w, config)
    real = factor[None, :, None, None] * acc.astype(np.float64) + offset[None, :, None, None]
    return real.astype(DTYPE)


def packed_conv2d(x: PackedTensor, w: PackedWeights, config: QuantConfig,
                  stride: int = 1, padding: int = 0, affine=None) -> np.ndarray:
    """Popcount convolution followed by the per-channel real-valued affine.

    ``affine`` may carry a cached :func:`output_affine` result.
    """
    factor, offset = affine if affine is not None else output_affine(w, config)
    return _run_conv(x, w, stride, padding, factor, offset)


def plane_table(merged: MergedTable) -> np.ndarray:
    """Pre-packed planes per color and pixel value: ``(3, 256, Q, words)``."""
    d, q = merged.d, merged.bits
    nw = n_words(3 * d)
    table = np.zeros((3, 256, q, nw), np.uint64)
    planes = (merged.entries[:, None, :] >> np.arange(q, dtype=np.uint8)[None, :, None]) & 1
    for color in range(3):
        spread = np.zeros((256, q, 3 * d), np.uint8)
        spread[:, :, color * d:(color + 1) * d] = planes
        table[color] = _pack_lanes(spread, 3 * d)
    return table


@numba.njit(cache=True, boundscheck=False)
def _embed_pack(img, table, out):
    n, h, w = img.shape[0], img.shape[1], img.shape[2]
    q, nw = table.shape[2], table.shape[3]
    for i in range(n):
        for y in range(h):
            for x in range(w):
                r = img[i, y, x, 0]
                g = img[i, y, x, 1]
                b = img[i, y, x, 2]
                for k in range(q):
                    for j in range(nw):
                        out[i, k, y, x, j] = table[0, r, k, j] | table[1, g, k, j] | table[2, b, k, j]


def embed_pack(image, merged: MergedTable, table: np.ndarray | None = None) -> PackedTensor:
    """Fused lookup and packing, equal to ``pack_activations(embed_infer(...))``.

    ``table`` may carry a cached :func:`plane_table`.
    """
    img = check_pixels(image, np.uint8)
    if img.ndim == 3:
        img = img[None]
    if table is None:
        table = plane_table(merged)
    n, h, w, _ = img.shape
    out = np.empty((n, merged.bits, h, w, table.shape[3]), np.uint64)
    _embed_pack(np.ascontiguousarray(img), table, out)
    return PackedTensor((n, 3 * merged.d, h, w), merged.bits, out)
