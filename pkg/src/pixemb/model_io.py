"""Strict little-endian checkpoint format.

Layout (all integers little-endian, floats raw IEEE-754)::

    header    b"PXEB"  u16 version  u8 mode (0 train, 1 infer)
    topology  u16 len + preset utf-8, u32 num_classes,
              u8 activation_bits, u8 weight_bits, f64 lo, f64 hi,
              u32 n_layers, then per layer u32 len + LayerConfig JSON
    sections  u32 count, then per section u8 tag, u16 len + key utf-8, body

Section bodies by tag:

    FLOAT        u8 ndim, ndim x u32 dims, f32 data
    FLOAT_FIRST  same as FLOAT; marks a float first layer kept in an infer bundle
    PACKED       4 x u32 (out, in, kh, kw), f32 alpha[out], u64 signs
    MERGED       u32 d, u8 bits, u32 n_bytes, packed codes (exactly ceil(256*d*bits/8))
    BN           u32 channels, f32 momentum, f32 eps, f32 mean, f32 var

Sections are written in sorted key order. The parser rejects unknown tags,
duplicate keys, missing parameters and trailing bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bitpack import PackedWeights, n_words
from .embedding import N_VALUES, MergedTable
from .network import LayerConfig, ModelGraph, binary_weights, freeze, init_params
from .quant import QuantConfig

MAGIC = b"PXEB"
VERSION = 1
MODES = {"train": 0, "infer": 1}

TAG_FLOAT, TAG_FLOAT_FIRST, TAG_PACKED, TAG_MERGED, TAG_BN = 1, 2, 3, 4, 5
_TAG_NAMES = {TAG_FLOAT: "float", TAG_FLOAT_FIRST: "float-first", TAG_PACKED: "packed",
              TAG_MERGED: "merged", TAG_BN: "bn"}


class CheckpointError(ValueError):
    """Parse failure at a byte offset."""

    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"offset {offset}: {message}")


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class FormatError(CheckpointError):
    pass


# ---------------------------------------------------------------- writing

class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self.parts.append(bytes(data))

    def text(self, s: str, width: str = "H") -> None:
        b = s.encode("utf-8")
        self.pack(width, len(b))
        self.raw(b)

    def array(self, a: np.ndarray, dtype: str) -> None:
        self.raw(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


def _infer_sections(model: ModelGraph) -> dict[str, tuple[int, object]]:
    if model.preset == "fp-first" and model.layer("conv") is None:
        raise ValueError("fp-first model without a float first layer")
    frozen = freeze(model)
    packed = set(binary_weights(model))
    out: dict[str, tuple[int, object]] = {}
    for key in packed:
        out[key] = (TAG_PACKED, frozen[key])
    if "embed.merged" in frozen:
        out["embed.merged"] = (TAG_MERGED, frozen["embed.merged"])
    first = model.layer("conv")
    for key, value in model.params.items():
        if key in packed or key == "embed.table":
            continue
        tag = TAG_FLOAT_FIRST if first is not None and key == f"{first.name}.w" else TAG_FLOAT
        out[key] = (tag, value)
    return out


def _train_sections(model: ModelGraph) -> dict[str, tuple[int, object]]:
    missing = [k for k in model.frozen if k not in model.params and k != "embed.merged"]
    if missing or ("embed.merged" in model.frozen and "embed.table" not in model.params):
        raise ValueError("model was loaded from an inference bundle; float weights are gone")
    return {k: (TAG_FLOAT, v) for k, v in model.params.items()}


def save(model: ModelGraph, mode: str = "train") -> bytes:
    """Serialize ``model``; ``mode`` is ``train`` (float) or ``infer`` (packed)."""
    if mode not in MODES:
        raise ValueError(f"unknown checkpoint mode {mode!r}; choose train or infer")
    sections = _train_sections(model) if mode == "train" else _infer_sections(model)
    for name, st in model.bn.items():
        sections[f"{name}.stats"] = (TAG_BN, st)

    w = _Writer()
    w.raw(MAGIC)
    w.pack("HB", VERSION, MODES[mode])
    w.text(model.preset)
    q = model.quant
    w.pack("IBBdd", model.num_classes, q.activation_bits, q.weight_bits, q.lo, q.hi)
    w.pack("I", len(model.layers))
    for lc in model.layers:
        w.text(lc.to_json(), "I")
    w.pack("I", len(sections))
    for key in sorted(sections):
        tag, value = sections[key]
        w.pack("B", tag)
        w.text(key)
        _write_body(w, tag, value)
    return w.getvalue()


def _write_body(w: _Writer, tag: int, value) -> None:
    if tag in (TAG_FLOAT, TAG_FLOAT_FIRST):
        a = np.asarray(value)
        w.pack("B" + "I" * a.ndim, a.ndim, *a.shape)
        w.array(a, "f4")
    elif tag == TAG_PACKED:
        w.pack("4I", *value.shape)
        w.array(value.alpha, "f4")
        w.array(value.signs, "u8")
    elif tag == TAG_MERGED:
        payload = value.to_bytes()
        w.pack("IBI", value.d, value.bits, len(payload))
        w.raw(payload)
    elif tag == TAG_BN:
        w.pack("Iff", len(value.mean), value.momentum, value.eps)
        w.array(value.mean, "f4")
        w.array(value.var, "f4")


# ---------------------------------------------------------------- reading

class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.pos + n > len(self.data):
            raise TruncatedError(self.pos, f"truncated {what}: need {n} bytes, "
                                           f"{len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def text(self, what: str, width: str = "H") -> str:
        (n,) = self.unpack(width, what)
        start = self.pos
        try:
            return bytes(self.take(n, what)).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(start, f"{what} is not utf-8") from e

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.take(count * dt.itemsize, what)
        return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="))


def load(data: bytes) -> ModelGraph:
    """Parse a checkpoint. Infer bundles load packed artifacts into ``frozen``."""
    return _parse(data)[0]


@dataclass
class SectionInfo:
    key: str
    tag: str
    offset: int  # of the section's tag byte
    body_bytes: int  # everything after the key
    payload_bytes: int  # array data or packed codes only, without dims/counts


def sections(data: bytes) -> list[SectionInfo]:
    """Validate ``data`` and list its parameter sections in file order."""
    return _parse(data)[1]


def _parse(data: bytes) -> tuple[ModelGraph, list[SectionInfo]]:
    r = _Reader(data)
    if bytes(r.take(len(MAGIC), "magic")) != MAGIC:
        raise BadMagicError(0, f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    (version,) = r.unpack("H", "version")
    if version != VERSION:
        raise VersionError(4, f"format version {version} not supported (expected {VERSION})")
    (mode,) = r.unpack("B", "mode")
    if mode not in MODES.values():
        raise FormatError(6, f"unknown mode byte {mode}")
    preset = r.text("preset")
    at = r.pos
    num_classes, abits, wbits, lo, hi = r.unpack("IBBdd", "topology")
    try:
        quant = QuantConfig(abits, wbits, lo, hi)
    except ValueError as e:
        raise FormatError(at, str(e)) from e
    (n_layers,) = r.unpack("I", "layer count")
    layers = []
    for _ in range(n_layers):
        at = r.pos
        try:
            layers.append(LayerConfig.from_json(r.text("layer record", "I")))
        except (ValueError, KeyError, TypeError) as e:
            if isinstance(e, CheckpointError):
                raise
            raise FormatError(at, f"bad layer record: {e}") from e
    model = ModelGraph(preset, num_classes, layers, quant=quant)

    (n_sections,) = r.unpack("I", "section count")
    seen = set()
    spans: list[SectionInfo] = []
    for _ in range(n_sections):
        at = r.pos
        (tag,) = r.unpack("B", "section tag")
        if tag not in _TAG_NAMES:
            raise FormatError(at, f"unknown section tag {tag}")
        key = r.text("section key")
        if key in seen:
            raise FormatError(at, f"duplicate section {key!r}")
        seen.add(key)
        body = r.pos
        payload = _read_body(r, tag, key, model, at)
        spans.append(SectionInfo(key, _TAG_NAMES[tag], at, r.pos - body, payload))
    if r.pos != len(r.data):
        raise FormatError(r.pos, f"{len(r.data) - r.pos} trailing bytes")
    _check_complete(model, mode, len(r.data))
    return model, spans


def _read_body(r: _Reader, tag: int, key: str, model: ModelGraph, at: int) -> int:
    """Parse one section body into ``model``; returns its payload size."""
    if tag in (TAG_FLOAT, TAG_FLOAT_FIRST):
        (ndim,) = r.unpack("B", key)
        shape = r.unpack("I" * ndim, key)
        start = r.pos
        model.params[key] = r.array("f4", int(np.prod(shape)), key).reshape(shape)
    elif tag == TAG_PACKED:
        shape = r.unpack("4I", key)
        o, c, kh, kw = shape
        start = r.pos
        alpha = r.array("f4", o, key)
        signs = r.array("u8", o * kh * kw * n_words(c), key).reshape(o, kh, kw, -1)
        pw = PackedWeights(shape, signs, alpha)
        if not np.array_equal(PackedWeights.from_signs(pw.positive(), alpha).signs, signs):
            raise FormatError(start, f"{key}: padded sign lanes are not zero")
        model.frozen[key] = pw
    elif tag == TAG_MERGED:
        d, bits, size = r.unpack("IBI", key)
        if bits != model.quant.activation_bits:
            raise FormatError(at, f"merged table has {bits}-bit codes, model uses "
                                  f"{model.quant.activation_bits}")
        need = -(-N_VALUES * d * bits // 8)
        if size != need:
            raise FormatError(at, f"merged payload is {size} bytes, expected {need}")
        start = r.pos
        payload = bytes(r.take(size, key))
        try:
            model.frozen[key] = MergedTable.from_bytes(payload, d, model.quant)
        except ValueError as e:
            raise FormatError(start, f"merged table: {e}") from e
    elif tag == TAG_BN:
        c, momentum, eps = r.unpack("Iff", key)
        start = r.pos
        mean = r.array("f4", c, key)
        var = r.array("f4", c, key)
        if not key.endswith(".stats"):
            raise FormatError(at, f"batch-norm section key {key!r} must end in '.stats'")
        model.bn[key[:-len(".stats")]] = ad.BatchNormState(mean, var, float(momentum), float(eps))
    return r.pos - start


def _check_complete(model: ModelGraph, mode: int, end: int) -> None:
    """Every parameter the topology needs must be present, in one form."""
    # the expected key set comes from the same topology walk used at build time
    probe = ModelGraph(model.preset, model.num_classes, model.layers, quant=model.quant)
    try:
        init_params(probe, np.random.default_rng(0))
    except (KeyError, TypeError) as e:
        raise FormatError(end, f"topology is inconsistent: {e}") from e
    have = set(model.params) | set(model.frozen)
    if "embed.merged" in model.frozen:
        have.add("embed.table")
    missing = sorted(set(probe.params) - have)
    if missing:
        raise FormatError(end, f"missing parameter sections: {', '.join(missing)}")
    missing_bn = sorted(set(probe.bn) - set(model.bn))
    if missing_bn:
        raise FormatError(end, f"missing batch-norm statistics: {', '.join(missing_bn)}")
    for key, value in model.params.items():
        want = probe.params.get(key)
        if want is None or want.shape != value.shape:
            raise FormatError(end, f"unexpected parameter {key!r} of shape {value.shape}")
    for key, value in model.frozen.items():
        if key == "embed.merged":
            if value.d != model.d:
                raise FormatError(end, f"merged table d={value.d}, topology says d={model.d}")
            continue
        want = probe.params.get(key)
        if want is None or tuple(value.shape) != want.shape + (1,) * (4 - want.ndim):
            raise FormatError(end, f"unexpected packed weights {key!r}")
    if mode == MODES["train"] and model.frozen:
        raise FormatError(end, "train checkpoint holds packed sections")


def save_file(model: ModelGraph, path, mode: str = "train") -> int:
    data = save(model, mode)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_file(path) -> ModelGraph:
    with open(path, "rb") as f:
        return load(f.read())


def size_report(model: ModelGraph) -> dict[str, int]:
    """Bytes used by the first layer in float form and in the infer bundle."""
    out = {}
    table = model.table()
    if table is not None:
        out["embed.table.float_bytes"] = table.weights.size * 4
        out["embed.merged_bytes"] = -(-N_VALUES * table.d * model.quant.activation_bits // 8)
    first = next((lc for lc in model.layers if lc.kind in ("conv", "quant-conv")), None)
    if first is not None:
        w = model.params.get(f"{first.name}.w")
        if w is not None:
            o, c, kh, kw = w.shape
            out["conv1.float_bytes"] = w.size * 4
            out["conv1.packed_bytes"] = o * kh * kw * n_words(c) * 8 + o * 4
    return out
