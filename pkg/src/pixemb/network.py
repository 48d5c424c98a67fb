"""Small residual classifier with four interchangeable first-layer treatments.

Presets differ only in how pixels reach the first convolution:

* ``fp-first``: float pixels / 255, float weights.
* ``wq-first``: float pixels / 255, binary weights.
* ``iwq-first``: pixels / 255 quantized to 2 bits, binary weights.
* ``pixemb-first``: pixel embedding (3d channels of 2-bit codes), binary weights.

Everything after the first convolution is shared: 2-bit activations, binary
weights, three stages of two residual blocks (widths 16/32/64), global mean
pooling and a classifier of unscaled +-1 weights, so packed logits are integers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import autodiff as ad
from .bitpack import (PackedWeights, embed_pack, output_affine, pack_activations,
                      packed_conv2d, plane_table)
from .embedding import EmbeddingTable, MergedTable, check_pixels, embed_train, merge_table
from .quant import QuantConfig, activation_codes, quantize_activation, quantize_weight, sign_weight

PRESETS = ("fp-first", "wq-first", "iwq-first", "pixemb-first")
MODES = ("train", "infer-float", "infer-packed")
STAGE_WIDTHS = (16, 32, 64)
BLOCKS_PER_STAGE = 2

# 8-bit raw pixels seen as codes of an [0, 1] quantizer: level p is p / 255
RAW_PIXELS = QuantConfig(activation_bits=8)


class UnsupportedPathError(RuntimeError):
    pass


@dataclass
class LayerConfig:
    name: str
    kind: str
    args: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "kind": self.kind, "args": self.args},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "LayerConfig":
        d = json.loads(text)
        return cls(d["name"], d["kind"], d["args"])


@dataclass
class ModelGraph:
    """Layer list plus float parameters and batch-norm running statistics.

    Models loaded from an inference bundle carry ``frozen`` artifacts (packed
    weights, merged tables) in place of the float weights they replace.
    """

    preset: str
    num_classes: int
    layers: list[LayerConfig]
    params: dict[str, np.ndarray] = field(default_factory=dict)
    bn: dict[str, ad.BatchNormState] = field(default_factory=dict)
    frozen: dict[str, Any] = field(default_factory=dict)
    quant: QuantConfig = field(default_factory=QuantConfig)

    def layer(self, kind: str) -> LayerConfig | None:
        return next((lc for lc in self.layers if lc.kind == kind), None)

    @property
    def d(self) -> int | None:
        lc = self.layer("pixel-embed")
        return lc.args["d"] if lc else None

    def table(self) -> EmbeddingTable | None:
        if "embed.table" not in self.params:
            return None
        return EmbeddingTable(self.params["embed.table"], self.quant)

    def output_shape(self, height: int, width: int) -> tuple[int, ...]:
        """Static shape propagation from an ``(H, W, 3)`` image to logits."""
        c, h, w = 3, height, width
        for lc in self.layers:
            a = lc.args
            if lc.kind == "pixel-embed":
                c = 3 * a["d"]
            elif lc.kind in ("conv", "quant-conv"):
                if a["in"] != c:
                    raise ad.ShapeError(lc.name, (c, h, w), (a["out"], a["in"]))
                h = (h + 2 * a["pad"] - a["k"]) // a["stride"] + 1
                w = (w + 2 * a["pad"] - a["k"]) // a["stride"] + 1
                c = a["out"]
            elif lc.kind == "residual-block":
                if a["in"] != c:
                    raise ad.ShapeError(lc.name, (c, h, w), (a["out"], a["in"]))
                h, w, c = -(-h // a["stride"]), -(-w // a["stride"]), a["out"]
            elif lc.kind == "pool":
                h = w = 1
            elif lc.kind == "fc":
                if a["in"] != c:
                    raise ad.ShapeError(lc.name, (c,), (a["out"], a["in"]))
                c = a["out"]
        return (c,)

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())


# ---------------------------------------------------------------- construction

def build_model(preset: str, d: int = 8, num_classes: int = 10, float_head: bool = False,
                seed: int = 0, quant: QuantConfig | None = None) -> ModelGraph:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    if preset == "pixemb-first" and d < 1:
        raise ValueError(f"embedding dimension must be >= 1, got {d}")
    quant = quant or QuantConfig()
    width = STAGE_WIDTHS[0]
    layers: list[LayerConfig] = []
    conv = {"in": 3, "out": width, "k": 3, "stride": 1, "pad": 1}
    if preset == "pixemb-first":
        layers.append(LayerConfig("embed", "pixel-embed", {"d": d, "bits": quant.activation_bits}))
        layers.append(LayerConfig("conv1", "quant-conv", {**conv, "in": 3 * d, "input": "embed"}))
    elif preset == "fp-first":
        layers.append(LayerConfig("conv1", "conv", {**conv, "input": "rescale"}))
    elif preset == "wq-first":
        layers.append(LayerConfig("conv1", "quant-conv", {**conv, "input": "rescale"}))
    else:
        layers.append(LayerConfig("conv1", "quant-conv", {**conv, "input": "quantize"}))
    layers.append(LayerConfig("bn1", "batch-norm", {"channels": width}))
    layers.append(LayerConfig("act1", "activation-quant", {"bits": quant.activation_bits}))
    c_in = width
    for s, c_out in enumerate(STAGE_WIDTHS):
        for b in range(BLOCKS_PER_STAGE):
            stride = 2 if s > 0 and b == 0 else 1
            layers.append(LayerConfig(f"stage{s + 1}.block{b + 1}", "residual-block",
                                      {"in": c_in, "out": c_out, "stride": stride}))
            c_in = c_out
    layers.append(LayerConfig("pool", "pool", {}))
    layers.append(LayerConfig("fc", "fc", {"in": c_in, "out": num_classes,
                                           "quantized": not float_head}))
    layers.append(LayerConfig("head", "argmax-head", {}))
    model = ModelGraph(preset, num_classes, layers, quant=quant)
    init_params(model, np.random.default_rng(seed))
    return model


def _he(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(ad.DTYPE)


def _bn_params(model: ModelGraph, name: str, c: int) -> None:
    model.params[f"{name}.gamma"] = np.ones(c, ad.DTYPE)
    model.params[f"{name}.beta"] = np.zeros(c, ad.DTYPE)
    model.bn[name] = ad.BatchNormState.create(c)


def init_params(model: ModelGraph, rng: np.random.Generator) -> None:
    for lc in model.layers:
        a = lc.args
        if lc.kind == "pixel-embed":
            model.params["embed.table"] = EmbeddingTable.random(a["d"], rng, model.quant).weights
        elif lc.kind in ("conv", "quant-conv"):
            model.params[f"{lc.name}.w"] = _he(rng, (a["out"], a["in"], a["k"], a["k"]))
        elif lc.kind == "batch-norm":
            _bn_params(model, lc.name, a["channels"])
        elif lc.kind == "residual-block":
            cin, cout = a["in"], a["out"]
            model.params[f"{lc.name}.conv1.w"] = _he(rng, (cout, cin, 3, 3))
            _bn_params(model, f"{lc.name}.bn1", cout)
            model.params[f"{lc.name}.conv2.w"] = _he(rng, (cout, cout, 3, 3))
            _bn_params(model, f"{lc.name}.bn2", cout)
            if a["stride"] != 1 or cin != cout:
                model.params[f"{lc.name}.short.w"] = _he(rng, (cout, cin, 1, 1))
                _bn_params(model, f"{lc.name}.short.bn", cout)
        elif lc.kind == "fc":
            std = 1.0 / np.sqrt(a["in"])
            model.params["fc.w"] = (rng.standard_normal((a["out"], a["in"])) * std).astype(ad.DTYPE)
            if not a["quantized"]:
                model.params["fc.b"] = np.zeros(a["out"], ad.DTYPE)


def decayed_params(model: ModelGraph) -> set[str]:
    """Parameters subject to weight decay: conv and fc weights only."""
    return {k for k in model.params if k.endswith(".w")}


# ---------------------------------------------------------------- float / train forward

class _Float:
    """Forward over tensors; records on ``tape`` when training."""

    def __init__(self, model: ModelGraph, tape: ad.Tape | None):
        self.model = model
        self.tape = tape
        self.training = tape is not None
        self.leaves: dict[str, ad.Tensor] = {}
        if tape is not None:
            for k, v in model.params.items():
                self.leaves[k] = tape.leaf(v)

    def p(self, key: str) -> ad.Tensor:
        if key in self.leaves:
            return self.leaves[key]
        return ad.Tensor(self.model.params[key])

    def weight(self, key: str, quantized: bool) -> ad.Tensor:
        frozen = self.model.frozen.get(key)
        if frozen is not None:
            # already binarized; never re-derive the scale
            w = frozen.dequantize()
            return ad.Tensor(w[:, :, 0, 0] if key == "fc.w" else w)
        w = self.p(key)
        if not quantized:
            return w
        # the classifier keeps bare signs: its integer outputs are the logits
        return sign_weight(w) if key == "fc.w" else quantize_weight(w)[0]

    def bn(self, x: ad.Tensor, name: str) -> ad.Tensor:
        return ad.batch_norm(x, self.p(f"{name}.gamma"), self.p(f"{name}.beta"),
                             self.model.bn[name], self.training)

    def actq(self, x: ad.Tensor) -> ad.Tensor:
        return quantize_activation(x, self.model.quant)

    def qconv(self, x, key, stride, pad) -> ad.Tensor:
        return ad.conv2d(x, self.weight(key, True), stride, pad)

    def run(self, images: np.ndarray) -> ad.Tensor:
        m = self.model
        x: ad.Tensor | None = None
        for lc in m.layers:
            a = lc.args
            if lc.kind == "pixel-embed":
                table = m.frozen.get("embed.merged")
                if table is not None:
                    e = ad.Tensor(table.dequantize()[images])
                    e = ad.reshape(e, images.shape[:-1] + (3 * table.d,))
                else:
                    e = embed_train(images, self.p("embed.table"), m.quant)
                x = ad.transpose(e, (0, 3, 1, 2))
            elif lc.kind in ("conv", "quant-conv"):
                if a["input"] != "embed":
                    x = ad.Tensor(rescale(images))
                    if a["input"] == "quantize":
                        x = self.actq(x)
                w = self.weight(f"{lc.name}.w", lc.kind == "quant-conv")
                x = ad.conv2d(x, w, a["stride"], a["pad"])
            elif lc.kind == "batch-norm":
                x = self.bn(x, lc.name)
            elif lc.kind == "activation-quant":
                x = self.actq(x)
            elif lc.kind == "relu":
                x = ad.relu(x)
            elif lc.kind == "residual-block":
                x = self.block(x, lc)
            elif lc.kind == "pool":
                x = ad.mean_pool(x)
            elif lc.kind == "fc":
                if a["quantized"]:
                    x = ad.matmul(x, ad.transpose(self.weight("fc.w", True), (1, 0)))
                else:
                    x = ad.add(ad.matmul(x, ad.transpose(self.p("fc.w"), (1, 0))), self.p("fc.b"))
        return x

    def block(self, x: ad.Tensor, lc: LayerConfig) -> ad.Tensor:
        n, s = lc.name, lc.args["stride"]
        y = self.actq(self.bn(self.qconv(x, f"{n}.conv1.w", s, 1), f"{n}.bn1"))
        y = self.bn(self.qconv(y, f"{n}.conv2.w", 1, 1), f"{n}.bn2")
        if f"{n}.short.w" in self.model.params or f"{n}.short.w" in self.model.frozen:
            sc = self.bn(self.qconv(x, f"{n}.short.w", s, 0), f"{n}.short.bn")
        else:
            sc = x
        return self.actq(ad.add(y, sc))


def rescale(images: np.ndarray) -> np.ndarray:
    """``(N, H, W, 3)`` pixels to ``(N, 3, H, W)`` floats in [0, 1]."""
    return images.transpose(0, 3, 1, 2).astype(ad.DTYPE) * ad.DTYPE(1.0 / 255.0)


# ---------------------------------------------------------------- packed inference

@dataclass
class _PackedLayer:
    weights: PackedWeights
    affine: tuple[np.ndarray, np.ndarray]
    config: QuantConfig


def freeze(model: ModelGraph) -> dict[str, Any]:
    """Derive inference artifacts: merged table and packed binary weights.

    Float weights already frozen (bundle-loaded models) are kept as they are.
    """
    out: dict[str, Any] = dict(model.frozen)
    if "embed.table" in model.params:
        out["embed.merged"] = merge_table(EmbeddingTable(model.params["embed.table"], model.quant))
    for key in binary_weights(model):
        if key not in out:
            w = model.params[key]
            if key == "fc.w":
                out[key] = PackedWeights.from_signs(w[:, :, None, None] >= 0, np.ones(len(w)))
            else:
                out[key] = PackedWeights.from_float(w)
    return out


def binary_weights(model: ModelGraph) -> list[str]:
    """Keys of all weights that are binarized in the forward pass."""
    keys = []
    for lc in model.layers:
        if lc.kind == "quant-conv":
            keys.append(f"{lc.name}.w")
        elif lc.kind == "residual-block":
            keys += [f"{lc.name}.conv1.w", f"{lc.name}.conv2.w"]
            short = f"{lc.name}.short.w"
            if short in model.params or short in model.frozen:
                keys.append(short)
        elif lc.kind == "fc" and lc.args["quantized"]:
            keys.append("fc.w")
    return keys


class _Packed:
    """Integer forward: codes in, popcount convolutions, integer logits out."""

    def __init__(self, model: ModelGraph, frozen: dict[str, Any]):
        self.model = model
        self.frozen = frozen
        self.cache: dict[str, Any] = {}

    def _layer(self, key: str, config: QuantConfig) -> _PackedLayer:
        pl = self.cache.get(key)
        if pl is None:
            w = self.frozen[key]
            pl = self.cache[key] = _PackedLayer(w, output_affine(w, config), config)
        return pl

    def bn(self, x: np.ndarray, name: str) -> np.ndarray:
        st = self.model.bn[name]
        gamma, beta = self.model.params[f"{name}.gamma"], self.model.params[f"{name}.beta"]
        s = gamma / np.sqrt(st.var + ad.DTYPE(st.eps))
        t = beta - st.mean * s
        return x * s[None, :, None, None] + t[None, :, None, None]

    def codes(self, x: np.ndarray) -> np.ndarray:
        return activation_codes(x, self.model.quant)

    def conv(self, codes: np.ndarray, key: str, stride: int, pad: int, config=None) -> np.ndarray:
        config = config or self.model.quant
        pl = self._layer(key, config)
        return packed_conv2d(pack_activations(codes, config.activation_bits), pl.weights,
                             config, stride, pad, pl.affine)

    def run(self, images: np.ndarray) -> np.ndarray:
        m = self.model
        x = None
        for lc in m.layers:
            a = lc.args
            if lc.kind == "pixel-embed":
                merged: MergedTable = self.frozen["embed.merged"]
                if "planes" not in self.cache:
                    self.cache["planes"] = plane_table(merged)
                packed = embed_pack(images, merged, self.cache["planes"])
            elif lc.kind == "conv":
                raise UnsupportedPathError(
                    f"{m.preset}: layer {lc.name!r} is a float convolution; "
                    "the packed path needs quantized inputs and weights")
            elif lc.kind == "quant-conv":
                key = f"{lc.name}.w"
                if a["input"] == "embed":
                    pl = self._layer(key, m.quant)
                    x = packed_conv2d(packed, pl.weights, m.quant, a["stride"], a["pad"], pl.affine)
                elif a["input"] == "rescale":
                    x = self.conv(images.transpose(0, 3, 1, 2), key, a["stride"], a["pad"], RAW_PIXELS)
                else:
                    x = self.conv(self.codes(rescale(images)), key, a["stride"], a["pad"])
            elif lc.kind == "batch-norm":
                x = self.bn(x, lc.name)
            elif lc.kind == "activation-quant":
                x = self.codes(x)
            elif lc.kind == "residual-block":
                x = self.block(x, lc)
            elif lc.kind == "pool":
                x = x.sum(axis=(2, 3), dtype=np.int64)
            elif lc.kind == "fc":
                x = self.head(x, lc)
        return x

    def block(self, codes: np.ndarray, lc: LayerConfig) -> np.ndarray:
        n, s = lc.name, lc.args["stride"]
        y = self.codes(self.bn(self.conv(codes, f"{n}.conv1.w", s, 1), f"{n}.bn1"))
        y = self.bn(self.conv(y, f"{n}.conv2.w", 1, 1), f"{n}.bn2")
        if f"{n}.short.w" in self.frozen:
            sc = self.bn(self.conv(codes, f"{n}.short.w", s, 0), f"{n}.short.bn")
        else:
            sc = self.model.quant.levels[codes]
        return self.codes(y + sc)

    def head(self, code_sums: np.ndarray, lc: LayerConfig) -> np.ndarray:
        if lc.args["quantized"]:
            pw: PackedWeights = self.frozen["fc.w"]
            signs = np.where(pw.positive()[:, :, 0, 0], 1, -1).astype(np.int64)
            return code_sums @ signs.T
        # float classifier on the pooled mean
        q = self.model.quant
        feats = (q.lo + q.step * code_sums / self.cache["pool_size"]).astype(ad.DTYPE)
        return feats @ self.model.params["fc.w"].T + self.model.params["fc.b"]


# ---------------------------------------------------------------- entry points

def forward(model: ModelGraph, images, mode: str = "infer-float", tape: ad.Tape | None = None,
            frozen: dict[str, Any] | None = None):
    """Run the model on ``(N, H, W, 3)`` pixels.

    ``train`` needs a ``tape`` and returns ``(logits, leaves)``; ``infer-float``
    returns float logits; ``infer-packed`` returns integer logits (float when
    the classifier is unquantized).
    """
    images = check_pixels(images)
    if images.ndim == 3:
        images = images[None]
    if mode == "train":
        if tape is None:
            raise ValueError("train mode needs a tape")
        f = _Float(model, tape)
        return f.run(images), f.leaves
    if mode == "infer-float":
        return _Float(model, None).run(images).data
    if mode == "infer-packed":
        if model.layer("conv") is not None:
            raise UnsupportedPathError(
                f"{model.preset}: first layer is float; infer-packed is not available")
        p = _Packed(model, frozen if frozen is not None else freeze(model))
        p.cache["pool_size"] = _pool_size(model, images.shape[1], images.shape[2])
        return p.run(images)
    raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")


def _pool_size(model: ModelGraph, h: int, w: int) -> int:
    for lc in model.layers:
        if lc.kind == "residual-block":
            h, w = -(-h // lc.args["stride"]), -(-w // lc.args["stride"])
    return h * w


def argmax_head(logits) -> np.ndarray:
    """Class prediction by comparison; the lowest index wins ties."""
    return np.asarray(logits).argmax(axis=1)
