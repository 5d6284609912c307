"""Architecture configs, parameter init/serialization, whole-network passes.

A network is a JSON document listing ``conv``, ``conv_transpose``, ``maxpool``
and ``relu`` layers. A softmax over the class axis is always applied after
the last layer. Input channel counts are inferred from the preceding layer.
"""
from __future__ import annotations

import functools
import io
import json
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import jsonschema
import numpy as np

from . import layers as L
from .core import Rng, read_ften, write_ften
from .errors import ConfigError, FormatError, ShapeError

FAMILIES = ("dilated", "deconvolutional")
REFERENCE_CONFIGS = ("dilated-1", "dilated-2", "deconv-1", "deconv-2")

ARCHITECTURE_SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ArchitectureConfig",
    "type": "object",
    "required": ["name", "family", "layers"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "family": {"enum": list(FAMILIES)},
        "input_channels": {"type": "integer", "minimum": 1, "default": 4},
        "num_classes": {"type": "integer", "minimum": 2, "default": 2},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["type", "out_channels"],
                        "additionalProperties": False,
                        "properties": {
                            "type": {"const": "conv"},
                            "out_channels": {"type": "integer", "minimum": 1},
                            "kernel": {"$ref": "#/$defs/kernel"},
                            "stride": {"type": "integer", "minimum": 1},
                            "dilation": {"type": "integer", "minimum": 1},
                            "padding": {"oneOf": [{"type": "integer", "minimum": 0}, {"const": "same"}]},
                        },
                    },
                    {
                        "type": "object",
                        "required": ["type", "out_channels"],
                        "additionalProperties": False,
                        "properties": {
                            "type": {"const": "conv_transpose"},
                            "out_channels": {"type": "integer", "minimum": 1},
                            "kernel": {"$ref": "#/$defs/kernel"},
                            "stride": {"type": "integer", "minimum": 1},
                            "output_padding": {"oneOf": [{"type": "integer", "minimum": 0}, {"const": "match"}]},
                        },
                    },
                    {
                        "type": "object",
                        "required": ["type"],
                        "additionalProperties": False,
                        "properties": {
                            "type": {"const": "maxpool"},
                            "window": {"type": "integer", "minimum": 1},
                            "stride": {"type": "integer", "minimum": 1},
                        },
                    },
                    {
                        "type": "object",
                        "required": ["type"],
                        "additionalProperties": False,
                        "properties": {"type": {"const": "relu"}},
                    },
                ]
            },
        },
    },
    "$defs": {
        "kernel": {
            "oneOf": [
                {"type": "integer", "minimum": 1},
                {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
            ]
        }
    },
}


@dataclass(frozen=True)
class Layer:
    type: str
    out_channels: int = 0
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    dilation: int = 1
    padding: int | str = 0
    window: int = 2
    output_padding: int | str = 0

    @property
    def has_params(self) -> bool:
        return self.type in ("conv", "conv_transpose")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"type": self.type}
        if self.type == "conv":
            d.update(out_channels=self.out_channels, kernel=list(self.kernel), stride=self.stride,
                     dilation=self.dilation, padding=self.padding)
        elif self.type == "conv_transpose":
            d.update(out_channels=self.out_channels, kernel=list(self.kernel), stride=self.stride,
                     output_padding=self.output_padding)
        elif self.type == "maxpool":
            d.update(window=self.window, stride=self.stride)
        return d


@dataclass(frozen=True)
class ArchitectureConfig:
    name: str
    family: str
    layers: tuple[Layer, ...]
    input_channels: int = 4
    num_classes: int = 2

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        try:
            jsonschema.validate(d, ARCHITECTURE_SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"architecture config invalid at {where}: {e.message}") from None
        parsed = []
        for spec in d["layers"]:
            kw = dict(spec)
            if "kernel" in kw:
                k = kw["kernel"]
                kw["kernel"] = (k, k) if isinstance(k, int) else tuple(k)
            if kw["type"] == "maxpool":
                kw.setdefault("stride", kw.get("window", 2))
            parsed.append(Layer(**kw))
        return cls(
            name=d["name"],
            family=d["family"],
            layers=tuple(parsed),
            input_channels=d.get("input_channels", 4),
            num_classes=d.get("num_classes", 2),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "layers": [layer.to_dict() for layer in self.layers],
        }


def load_config(name_or_path: str | os.PathLike) -> ArchitectureConfig:
    """Load a shipped reference config by name, or any JSON config by path."""
    p = str(name_or_path)
    if p in REFERENCE_CONFIGS:
        text = resources.files("floodseg").joinpath("architectures", f"{p}.json").read_text()
        return ArchitectureConfig.from_dict(json.loads(text))
    if not os.path.exists(p):
        raise ConfigError(f"unknown architecture {p!r}: not a reference name {REFERENCE_CONFIGS} nor a file")
    with open(p) as f:
        try:
            return ArchitectureConfig.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None


# -- shape planning -------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    kind: str
    layer_index: int
    param_index: int = -1
    conv: L.ConvSpec | None = None
    window: int = 0
    stride: int = 1
    output_padding: int = 0


def _layer_label(i: int, layer: Layer) -> str:
    return f"layer {i} ({layer.type})"


@functools.lru_cache(maxsize=256)
def build_plan(cfg: ArchitectureConfig, h: int, w: int) -> tuple[tuple[Step, ...], tuple[dict, ...]]:
    """Concrete per-layer steps and the shape trace for an ``h x w`` input.

    Raises ``ShapeError`` naming the offending layer on any size problem or
    family-invariant violation.
    """
    steps: list[Step] = []
    trace: list[dict] = [{"layer": "input", "channels": cfg.input_channels, "height": h, "width": w}]
    c = cfg.input_channels
    pooled: list[tuple[int, int]] = []
    n_params = 0
    for i, layer in enumerate(cfg.layers):
        label = _layer_label(i, layer)
        try:
            if layer.type == "conv":
                kh, kw = layer.kernel
                if layer.padding == "same":
                    if kh % 2 == 0 or kw % 2 == 0 or kh != kw:
                        raise ShapeError("'same' padding needs a square odd kernel")
                    pad = layer.dilation * (kh - 1) // 2
                else:
                    pad = int(layer.padding)
                spec = L.ConvSpec(c, layer.out_channels, layer.kernel, layer.stride, layer.dilation, pad)
                h, w = spec.output_size(h, w)
                steps.append(Step("conv", i, n_params, conv=spec))
                n_params += 1
                c = layer.out_channels
            elif layer.type == "conv_transpose":
                kh, kw = layer.kernel
                if kh != kw:
                    raise ShapeError("transposed convolution needs a square kernel")
                if layer.output_padding == "match":
                    if not pooled:
                        raise ShapeError("output_padding 'match' without a preceding maxpool to mirror")
                    th, tw = pooled.pop()
                    op_h = th - ((h - 1) * layer.stride + kh)
                    op_w = tw - ((w - 1) * layer.stride + kw)
                    if op_h != op_w or not 0 <= op_h < layer.stride:
                        raise ShapeError(
                            f"cannot restore {th}x{tw} from {h}x{w} with kernel {kh}, stride {layer.stride}"
                        )
                    op = op_h
                else:
                    op = int(layer.output_padding)
                    if op >= layer.stride:
                        raise ShapeError("output_padding must be smaller than stride")
                h, w = L.conv_transpose_output_size(h, w, layer.kernel, layer.stride, op)
                steps.append(Step("conv_transpose", i, n_params, stride=layer.stride, output_padding=op,
                                  conv=L.ConvSpec(c, layer.out_channels, layer.kernel, layer.stride)))
                n_params += 1
                c = layer.out_channels
            elif layer.type == "maxpool":
                pooled.append((h, w))
                h, w = L.maxpool_output_size(h, w, layer.window, layer.stride)
                steps.append(Step("maxpool", i, window=layer.window, stride=layer.stride))
            elif layer.type == "relu":
                steps.append(Step("relu", i))
            else:
                raise ConfigError(f"unknown layer type {layer.type!r}")
        except ShapeError as e:
            raise ShapeError(f"{cfg.name}: {label}: {e}") from None
        trace.append({"layer": i, "type": layer.type, "channels": c, "height": h, "width": w})
        if cfg.family == "dilated" and (h, w) != (trace[0]["height"], trace[0]["width"]):
            raise ShapeError(
                f"{cfg.name}: {label}: dilated network changes spatial size to {h}x{w} "
                f"(input {trace[0]['height']}x{trace[0]['width']})"
            )
    last = len(cfg.layers) - 1
    if not cfg.layers[last].has_params:
        raise ShapeError(f"{cfg.name}: {_layer_label(last, cfg.layers[last])}: final layer must be conv or conv_transpose")
    if c != cfg.num_classes:
        raise ShapeError(
            f"{cfg.name}: {_layer_label(last, cfg.layers[last])}: emits {c} channels, expected {cfg.num_classes}"
        )
    if cfg.family == "deconvolutional":
        kinds = {layer.type for layer in cfg.layers}
        if "maxpool" not in kinds or "conv_transpose" not in kinds:
            raise ShapeError(f"{cfg.name}: deconvolutional network needs at least one maxpool and one conv_transpose")
        if (h, w) != (trace[0]["height"], trace[0]["width"]):
            raise ShapeError(
                f"{cfg.name}: {_layer_label(last, cfg.layers[last])}: output {h}x{w} "
                f"does not match input {trace[0]['height']}x{trace[0]['width']}"
            )
    return tuple(steps), tuple(trace)


def validate_config(cfg: ArchitectureConfig, size: int | tuple[int, int] = 25) -> list[dict]:
    """Shape trace for a ``size x size`` input; raises on invariant violations."""
    h, w = (size, size) if isinstance(size, int) else size
    return [dict(t) for t in build_plan(cfg, h, w)[1]]


# -- parameters -----------------------------------------------------------------

@dataclass
class ModelParams:
    config: ArchitectureConfig
    seed: int
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_tensors(self, tensors: list[np.ndarray]) -> None:
        self.weights = list(tensors[0::2])
        self.biases = list(tensors[1::2])

    def tensor_names(self) -> list[str]:
        names = []
        for step in param_layers(self.config):
            names += [f"layer{step}.weight", f"layer{step}.bias"]
        return names

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.seed, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           dict(self.meta))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, self.seed, [w.astype(dtype) for w in self.weights],
                           [b.astype(dtype) for b in self.biases], dict(self.meta))

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors())


def param_layers(cfg: ArchitectureConfig) -> list[int]:
    return [i for i, layer in enumerate(cfg.layers) if layer.has_params]


def param_shapes(cfg: ArchitectureConfig) -> list[tuple[int, tuple, tuple]]:
    """``(layer_index, weight_shape, bias_shape)`` for every parametric layer."""
    out = []
    c = cfg.input_channels
    for i, layer in enumerate(cfg.layers):
        if layer.type == "conv":
            out.append((i, (layer.out_channels, c, *layer.kernel), (layer.out_channels,)))
        elif layer.type == "conv_transpose":
            out.append((i, (c, layer.out_channels, *layer.kernel), (layer.out_channels,)))
        if layer.has_params:
            c = layer.out_channels
    return out


def init_params(cfg: ArchitectureConfig, seed: int, dtype=np.float64) -> ModelParams:
    """He-normal weights (stddev sqrt(2/fan_in)), zero biases."""
    rng = Rng(seed)
    params = ModelParams(cfg, int(seed))
    for i, w_shape, b_shape in param_shapes(cfg):
        layer = cfg.layers[i]
        if layer.type == "conv":
            fan_in = w_shape[1] * w_shape[2] * w_shape[3]
        else:
            # each output pixel of a transposed conv sees kh*kw/stride^2 taps per input channel
            fan_in = max(1.0, w_shape[0] * w_shape[2] * w_shape[3] / layer.stride ** 2)
        params.weights.append(rng.normal(w_shape, 0.0, np.sqrt(2.0 / fan_in)).astype(dtype))
        params.biases.append(np.zeros(b_shape, dtype=dtype))
    return params


# -- forward / backward -----------------------------------------------------------

def _forward(params: ModelParams, x: np.ndarray, keep: bool):
    """Run the network on ``[C,H,W]`` or ``[N,C,H,W]``; returns channel-major
    logits ``[K, N, H, W]``, the plan, and per-step caches for backward."""
    cfg = params.config
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W] input, got shape {x.shape}")
    c = x.shape[-3]
    if c != cfg.input_channels:
        raise ShapeError(f"{cfg.name}: input has {c} channels, expected {cfg.input_channels}")
    steps, _ = build_plan(cfg, x.shape[-2], x.shape[-1])
    cache = []
    a = L.to_cm(x)
    for step in steps:
        if step.kind == "conv":
            out, cols = L.conv2d_cm(a, params.weights[step.param_index], params.biases[step.param_index], step.conv)
            cache.append((cols, a.shape) if keep else None)
        elif step.kind == "conv_transpose":
            out = L.conv_transpose2d_cm(a, params.weights[step.param_index], params.biases[step.param_index],
                                        step.stride, step.output_padding)
            cache.append(a if keep else None)
        elif step.kind == "maxpool":
            out, idx = L.maxpool2d(a, step.window, step.stride)
            cache.append((a.shape, idx) if keep else None)
        else:
            out = L.relu(a)
            cache.append(a if keep else None)
        a = out
    return a, steps, cache


def forward_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    logits, _, _ = _forward(params, x, keep=False)
    return L.from_cm(logits, x.ndim == 3)


def forward(params: ModelParams, patch: np.ndarray) -> np.ndarray:
    """Per-pixel class probabilities ``[K, H, W]`` (or ``[N, K, H, W]``)."""
    logits, _, _ = _forward(params, patch, keep=False)
    return L.from_cm(L.softmax(logits, axis=0), patch.ndim == 3)


def _labels_batch(patch: np.ndarray, labels) -> np.ndarray:
    lab = np.asarray(labels)
    if patch.ndim == 3:
        lab = lab[None]
    n = 1 if patch.ndim == 3 else patch.shape[0]
    if lab.shape != (n, patch.shape[-2], patch.shape[-1]):
        raise ShapeError(f"labels shape {np.shape(labels)} does not match patch {patch.shape}")
    return lab


def backward_step(params: ModelParams, patch: np.ndarray, labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over all pixels and its gradient for every tensor in
    ``params.tensors()`` order."""
    lab = _labels_batch(patch, labels)
    logits, steps, cache = _forward(params, patch, keep=True)
    loss, g = L.softmax_xent_cm(logits, lab)
    d_w: list = [None] * len(params.weights)
    d_b: list = [None] * len(params.biases)
    for step, saved in zip(reversed(steps), reversed(cache)):
        if step.kind == "conv":
            cols, in_shape = saved
            grads = L.conv2d_backward_cm(cols, in_shape, params.weights[step.param_index], step.conv, g)
            d_w[step.param_index], d_b[step.param_index], g = grads
        elif step.kind == "conv_transpose":
            grads = L.conv_transpose2d_backward_cm(saved, params.weights[step.param_index], step.stride, g,
                                                   step.output_padding)
            d_w[step.param_index], d_b[step.param_index], g = grads
        elif step.kind == "maxpool":
            in_shape, idx = saved
            g = L.maxpool2d_backward(in_shape, idx, g)
        else:
            g = L.relu_backward(saved, g)
    out = []
    for w, b in zip(d_w, d_b):
        out += [w, b]
    return loss, out


def loss_only(params: ModelParams, patch: np.ndarray, labels: np.ndarray) -> float:
    lab = _labels_batch(patch, labels)
    logits, _, _ = _forward(params, patch, keep=False)
    return L.softmax_xent_cm(logits, lab)[0]


# -- serialization ------------------------------------------------------------------

PARAMS_MAGIC = b"FPAR"
PARAMS_VERSION = 1


def params_to_bytes(params: ModelParams) -> bytes:
    header = json.dumps(
        {
            "config": params.config.name,
            "seed": params.seed,
            "tensors": params.tensor_names(),
            "architecture": params.config.to_dict(),
            "meta": params.meta,
        },
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(PARAMS_MAGIC)
    buf.write(struct.pack("<BI", PARAMS_VERSION, len(header)))
    buf.write(header)
    for t in params.tensors():
        write_ften(buf, t)
    return buf.getvalue()


def params_from_bytes(data: bytes, cfg: ArchitectureConfig | None = None, source: str = "<bytes>") -> ModelParams:
    f = io.BytesIO(data)
    if f.read(4) != PARAMS_MAGIC:
        raise FormatError(f"{source}: not a parameter file (bad magic)")
    head = f.read(5)
    if len(head) < 5:
        raise FormatError(f"{source}: truncated header")
    version, n = struct.unpack("<BI", head)
    if version != PARAMS_VERSION:
        raise FormatError(f"{source}: unsupported parameter-file version {version}")
    raw = f.read(n)
    if len(raw) < n:
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"{source}: corrupt header: {e}") from None
    if cfg is None:
        cfg = ArchitectureConfig.from_dict(header["architecture"])
    tensors = []
    for name in header["tensors"]:
        try:
            tensors.append(read_ften(f))
        except FormatError as e:
            raise FormatError(f"{source}: tensor {name}: {e}") from None
    expected = param_shapes(cfg)
    for k, (i, w_shape, b_shape) in enumerate(expected):
        where = f"{source}: layer {i} ({cfg.layers[i].type}) of {cfg.name}"
        if 2 * k + 1 >= len(tensors):
            raise ShapeError(f"{where}: missing from file ({len(tensors) // 2} parametric layers stored)")
        if tensors[2 * k].shape != w_shape or tensors[2 * k + 1].shape != b_shape:
            raise ShapeError(f"{where}: file has weights {tensors[2 * k].shape}, config expects {w_shape}")
    if len(tensors) != 2 * len(expected):
        raise ShapeError(
            f"{source}: file holds {len(tensors) // 2} parametric layers, config {cfg.name} has {len(expected)}"
        )
    params = ModelParams(cfg, int(header["seed"]), meta=dict(header.get("meta", {})))
    params.set_tensors(tensors)
    return params


def save_params(params: ModelParams, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(params_to_bytes(params))


def load_params(path: str | os.PathLike, cfg: ArchitectureConfig | None = None) -> ModelParams:
    with open(path, "rb") as f:
        return params_from_bytes(f.read(), cfg, source=str(path))
