"""Model graphs for the VGG-16 classifier and the U-Net segmenter.

A :class:`ModelGraph` is an immutable list of :class:`LayerSpec` in execution
order.  Each layer names the layers it reads from, so skip connections are
expressed without any special casing in :func:`forward`.  Parameters live
outside the graph in a :class:`~lusscreen.weights.WeightArchive`; a layer
only records the slot names and shapes it expects.

Slot names::

    block{i}.conv{j}.weight|bias         VGG-16 backbone, i = 1..5
    head.fc{k}.weight|bias               VGG-16 dense head, k = 1, 2
    unet.down{i}.conv{j}.weight|bias     U-Net contracting path, i = 1..depth
    unet.bottleneck.conv{j}.weight|bias  U-Net bottom
    unet.up{i}.upconv.weight|bias        U-Net 2x2 learned upsampling
    unet.up{i}.conv{j}.weight|bias       U-Net expansive path
    unet.final.weight|bias               U-Net 1x1 output conv
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as K
from .errors import ShapeError
from .weights import WeightArchive

CONV_KINDS = ("conv", "upconv")
PARAM_KINDS = ("conv", "upconv", "dense")
CLASS_HEAD = "class-probabilities"
MASK_HEAD = "mask-probabilities"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...]
    out_shape: tuple[int, ...]
    activation: str | None = None
    kernel: int = 0
    padding: int = 0
    slots: tuple[tuple[str, tuple[int, ...]], ...] = ()

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.slots)


@dataclass(frozen=True)
class ModelGraph:
    name: str
    input_spec: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    head: str
    trainable: frozenset[str] = field(default_factory=frozenset)

    @property
    def output_spec(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape if self.layers else self.input_spec

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def slots(self) -> dict[str, tuple[int, ...]]:
        """Every parameter slot, in execution order."""
        return {slot: shape for spec in self.layers for slot, shape in spec.slots}

    def count(self, *kinds: str) -> int:
        return sum(1 for spec in self.layers if spec.kind in kinds)

    @property
    def num_params(self) -> int:
        return sum(spec.param_count for spec in self.layers)


@dataclass(frozen=True)
class Vgg16Config:
    input_shape: tuple[int, int, int] = (3, 224, 224)
    blocks: tuple[int, ...] = (2, 2, 3, 3, 3)
    channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    head_width: int = 64
    num_classes: int = 2
    frozen_backbone: bool = True


@dataclass(frozen=True)
class UnetConfig:
    input_shape: tuple[int, int, int] = (1, 224, 224)
    depth: int = 4
    base_channels: int = 64
    num_mask_classes: int = 1


class _Builder:
    """Appends layers while propagating and checking shapes."""

    def __init__(self, input_shape):
        self.input_shape = tuple(input_shape)
        self.layers: list[LayerSpec] = []
        self.shapes = {"input": self.input_shape}
        self.last = "input"

    def _add(self, spec: LayerSpec) -> str:
        if spec.name in self.shapes:
            raise ShapeError(f"duplicate layer name {spec.name!r}")
        self.layers.append(spec)
        self.shapes[spec.name] = spec.out_shape
        self.last = spec.name
        return spec.name

    def conv(self, name, out_ch, kernel=3, activation="relu", src=None):
        src = src or self.last
        c, h, w = self.shapes[src]
        pad = kernel // 2
        oh = K.conv_output_size(h, kernel, 1, pad)
        ow = K.conv_output_size(w, kernel, 1, pad)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{name}: input {h}x{w} too small for a {kernel}x{kernel} kernel")
        slots = ((f"{name}.weight", (out_ch, c, kernel, kernel)), (f"{name}.bias", (out_ch,)))
        return self._add(LayerSpec(name, "conv", (src,), (out_ch, oh, ow), activation, kernel, pad, slots))

    def upconv(self, name, out_ch, src=None):
        src = src or self.last
        c, h, w = self.shapes[src]
        slots = ((f"{name}.weight", (out_ch, c, 2, 2)), (f"{name}.bias", (out_ch,)))
        return self._add(LayerSpec(name, "upconv", (src,), (out_ch, 2 * h, 2 * w), None, 2, 0, slots))

    def maxpool(self, name, src=None):
        src = src or self.last
        c, h, w = self.shapes[src]
        if h % 2 or w % 2:
            raise ShapeError(f"{name}: cannot 2x2-pool an odd {h}x{w} map")
        return self._add(LayerSpec(name, "maxpool", (src,), (c, h // 2, w // 2)))

    def concat(self, name, a, b):
        ca, ha, wa = self.shapes[a]
        cb, hb, wb = self.shapes[b]
        if (ha, wa) != (hb, wb):
            raise ShapeError(f"{name}: skip {a} {ha}x{wa} does not match {b} {hb}x{wb}")
        return self._add(LayerSpec(name, "concat", (a, b), (ca + cb, ha, wa)))

    def flatten(self, name):
        c, h, w = self.shapes[self.last]
        return self._add(LayerSpec(name, "flatten", (self.last,), (c * h * w,)))

    def dense(self, name, out_features, activation):
        (n_in,) = self.shapes[self.last]
        slots = ((f"{name}.weight", (out_features, n_in)), (f"{name}.bias", (out_features,)))
        return self._add(LayerSpec(name, "dense", (self.last,), (out_features,), activation, slots=slots))


def build_vgg16(cfg: Vgg16Config = Vgg16Config()) -> ModelGraph:
    """VGG-16 feature extractor with a small two-layer dense head."""
    if len(cfg.blocks) != len(cfg.channels) or not cfg.blocks:
        raise ShapeError(f"conv plan {cfg.blocks} does not match channel plan {cfg.channels}")
    if any(n < 1 for n in cfg.blocks) or any(c < 1 for c in cfg.channels):
        raise ShapeError("conv plan entries must be positive")
    if cfg.num_classes < 2 or cfg.head_width < 1:
        raise ShapeError("need at least 2 classes and a positive head width")
    c, h, w = cfg.input_shape
    if h % 2 ** len(cfg.blocks) or w % 2 ** len(cfg.blocks):
        raise ShapeError(f"input {h}x{w} not divisible by 2^{len(cfg.blocks)}")

    b = _Builder(cfg.input_shape)
    for i, (n_conv, ch) in enumerate(zip(cfg.blocks, cfg.channels), start=1):
        for j in range(1, n_conv + 1):
            b.conv(f"block{i}.conv{j}", ch)
        b.maxpool(f"block{i}.pool")
    b.flatten("head.flatten")
    b.dense("head.fc1", cfg.head_width, "relu")
    b.dense("head.fc2", cfg.num_classes, "softmax")

    layers = tuple(b.layers)
    all_slots = [s for spec in layers for s, _ in spec.slots]
    trainable = [s for s in all_slots if s.startswith("head.")] if cfg.frozen_backbone else all_slots
    return ModelGraph("vgg16", tuple(cfg.input_shape), layers, CLASS_HEAD, frozenset(trainable))


def build_unet(cfg: UnetConfig = UnetConfig()) -> ModelGraph:
    """U-Net with same-padded 3x3 convs, so the mask matches the input size."""
    c, h, w = cfg.input_shape
    if cfg.depth < 1 or cfg.base_channels < 1 or cfg.num_mask_classes < 1:
        raise ShapeError("depth, base_channels and num_mask_classes must be positive")
    if h % 2**cfg.depth or w % 2**cfg.depth:
        raise ShapeError(f"input {h}x{w} not divisible by 2^{cfg.depth}")

    b = _Builder(cfg.input_shape)
    skips = []
    ch = cfg.base_channels
    for i in range(1, cfg.depth + 1):
        b.conv(f"unet.down{i}.conv1", ch)
        skips.append(b.conv(f"unet.down{i}.conv2", ch))
        b.maxpool(f"unet.down{i}.pool")
        ch *= 2
    b.conv("unet.bottleneck.conv1", ch)
    b.conv("unet.bottleneck.conv2", ch)
    for i in range(cfg.depth, 0, -1):
        ch //= 2
        up = b.upconv(f"unet.up{i}.upconv", ch)
        b.concat(f"unet.up{i}.concat", skips[i - 1], up)
        b.conv(f"unet.up{i}.conv1", ch)
        b.conv(f"unet.up{i}.conv2", ch)
    b.conv("unet.final", cfg.num_mask_classes, kernel=1, activation="sigmoid")

    layers = tuple(b.layers)
    trainable = frozenset(s for spec in layers for s, _ in spec.slots)
    return ModelGraph("unet", tuple(cfg.input_shape), layers, MASK_HEAD, trainable)


def check_weights(model: ModelGraph, weights) -> None:
    """Raise :class:`ShapeError` unless every slot is present with the right dims."""
    problems = []
    for slot, shape in model.slots().items():
        if slot not in weights:
            problems.append(f"missing {slot}")
        elif tuple(np.shape(weights[slot])) != shape:
            problems.append(f"{slot} has dims {tuple(np.shape(weights[slot]))}, expected {shape}")
    if problems:
        shown = "; ".join(problems[:5]) + (f"; ... {len(problems) - 5} more" if len(problems) > 5 else "")
        raise ShapeError(f"weights do not fit {model.name}: {shown}")


def _activate(y, activation):
    if activation is None:
        return y
    if activation == "relu":
        return K.relu(y)
    if activation == "softmax":
        return K.softmax(y)
    if activation == "sigmoid":
        return K.sigmoid(y)
    raise ValueError(f"unknown activation {activation!r}")


def _run_layer(spec: LayerSpec, args, weights):
    kind = spec.kind
    if kind == "conv":
        params = K.Conv2dParams(weights[spec.slots[0][0]], weights[spec.slots[1][0]], 1, spec.padding)
        y = K.conv2d(args[0], params)
    elif kind == "upconv":
        params = K.Conv2dParams(weights[spec.slots[0][0]], weights[spec.slots[1][0]], 2, 0)
        y = K.transposed_conv2x2(args[0], params)
    elif kind == "maxpool":
        y = K.maxpool2x2(args[0])
    elif kind == "concat":
        y = K.concat_channels(args[0], args[1])
    elif kind == "flatten":
        y = args[0].reshape(args[0].shape[0], -1)
    elif kind == "dense":
        y = K.dense(args[0], weights[spec.slots[0][0]], weights[spec.slots[1][0]])
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _activate(y, spec.activation)


def forward(model: ModelGraph, weights, x, *, until: str | None = None, start_after: str | None = None,
            timings: list | None = None):
    """Run ``model`` on the NCHW batch ``x``.

    ``until`` stops after the named layer and returns its activation (used to
    pull frozen backbone features).  ``start_after`` treats ``x`` as that
    layer's activation and runs only the layers behind it, which lets cached
    backbone features go straight into the head.  When ``timings`` is a list,
    one ``(layer name, seconds)`` pair per executed layer is appended to it.
    """
    check_weights(model, weights)
    names = [spec.name for spec in model.layers]
    if until is not None and until not in names:
        raise KeyError(f"{model.name} has no layer {until!r}")
    if start_after is None:
        x = K.as_tensor(x)
        if tuple(x.shape[1:]) != model.input_spec:
            raise ShapeError(
                f"{model.name} expects input (N, {', '.join(map(str, model.input_spec))}), got {x.shape}"
            )
        first, acts = 0, {"input": x}
    else:
        if start_after not in names:
            raise KeyError(f"{model.name} has no layer {start_after!r}")
        first = names.index(start_after) + 1
        x = np.asarray(x)
        expected = model.layers[first - 1].out_shape
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"activation of {start_after} must be (N, {expected}), got {x.shape}")
        acts = {start_after: x}

    last_use = {}
    for idx, spec in enumerate(model.layers):
        for src in spec.inputs:
            last_use[src] = idx
    out = x
    clock = time.perf_counter
    for idx, spec in enumerate(model.layers[first:], start=first):
        args = [acts[src] for src in spec.inputs]
        if timings is not None:
            t0 = clock()
            out = _run_layer(spec, args, weights)
            timings.append((spec.name, clock() - t0))
        else:
            out = _run_layer(spec, args, weights)
        acts[spec.name] = out
        if spec.name == until:
            break
        for src in spec.inputs:
            if last_use[src] == idx:
                del acts[src]
    return out


def init_weights(model: ModelGraph, seed: int = 0) -> WeightArchive:
    """He-uniform weights and zero biases, drawn slot by slot in graph order."""
    rng = np.random.default_rng(seed)
    entries = {}
    for spec in model.layers:
        for slot, shape in spec.slots:
            if slot.endswith(".bias"):
                entries[slot] = np.zeros(shape, dtype=np.float32)
                continue
            if spec.kind == "conv":
                fan_in = shape[1] * shape[2] * shape[3]
            elif spec.kind == "upconv":
                fan_in = shape[1]  # each output pixel sees a single tap
            else:
                fan_in = shape[1]
            limit = np.sqrt(6.0 / fan_in)
            entries[slot] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return WeightArchive(entries)


def zero_weights(model: ModelGraph) -> WeightArchive:
    return WeightArchive({slot: np.zeros(shape, np.float32) for slot, shape in model.slots().items()})


def summary_rows(model: ModelGraph):
    return [(spec.name, spec.kind, spec.out_shape, spec.param_count) for spec in model.layers]


def summarize(model: ModelGraph) -> str:
    """Text table of layers: name, kind, output shape, parameter count."""
    rows = summary_rows(model)
    header = ("layer", "kind", "output", "params")
    cells = [(n, k, "x".join(map(str, s)), f"{p:,}") for n, k, s, p in rows]
    widths = [max([len(header[i])] + [len(c[i]) for c in cells]) for i in range(4)]

    def fmt(row):
        return "  ".join(
            str(v).rjust(widths[i]) if i == 3 else str(v).ljust(widths[i]) for i, v in enumerate(row)
        )

    lines = [fmt(header), "  ".join("-" * wd for wd in widths)]
    lines += [fmt(c) for c in cells]
    lines.append(f"total params: {sum(r[3] for r in rows):,}")
    return "\n".join(lines)


def classifier_input(gray):
    """Replicate a (N, 1, H, W) grayscale batch to the 3 channels VGG-16 expects."""
    gray = K.as_tensor(gray)
    if gray.shape[1] != 1:
        raise ShapeError(f"expected a single-channel batch, got {gray.shape}")
    return np.repeat(gray, 3, axis=1)
