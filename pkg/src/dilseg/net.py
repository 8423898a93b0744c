"""Network assembly: the two comparison architectures, initialization,
and model serialization.

Both variants are small fully convolutional networks over the same
channel progression (c, 2c, 4c, 4c); they differ only in how they trade
resolution for context:

* ``standard-fcn``: three 2x2 max-pool stages shrink the map to 1/8
  resolution, and a learnable transposed convolution (kernel 16,
  stride 8, bilinear-initialized) restores it.
* ``dilated-fcn``: one pool stage (1/2 resolution), then convolutions
  at dilation 2 and 4 grow context with no further shrinking, and a
  fixed bilinear x2 restores full resolution.

A dilated layer has exactly the parameter count of its dilation-1
counterpart with the same channel geometry; the two nets are therefore
a controlled comparison of subsample-then-upsample against
dilate-at-high-resolution.

Weights draw from a seeded PCG64 generator (numpy default_rng) with
He fan-in scaling; biases start at zero; upsampling heads start as
exact bilinear interpolators.
"""

import math
import os
import struct

import numpy as np

from dilseg import ops
from dilseg.errors import (
    ConfigError,
    ModelFormatError,
    ModelTruncatedError,
    ModelVersionError,
    ShapeError,
)
from dilseg.tensor import Tensor

VARIANT_STANDARD = "standard-fcn"
VARIANT_DILATED = "dilated-fcn"

_MAGIC = b"DSEG"
_VERSION = 1
_VARIANT_CODES = {VARIANT_STANDARD: 0, VARIANT_DILATED: 1}
_PAD_CODES = {ops.PAD_ZERO_SAME: 0, ops.PAD_VALID: 1}


class ConvLayer:
    kind = "conv"

    def __init__(self, spec, weight, bias):
        if weight.shape != (spec.out_channels, spec.in_channels,
                            spec.kernel_size, spec.kernel_size):
            raise ShapeError(f"conv weight shape {weight.shape} does not match {spec}")
        if bias.shape != (spec.out_channels,):
            raise ShapeError(f"conv bias shape {bias.shape} != ({spec.out_channels},)")
        self.spec = spec
        self.weight = weight
        self.bias = bias

    def params(self):
        return {"bias": self.bias, "weight": self.weight}

    def forward(self, x):
        return ops.dilated_conv2d_forward(x, self.weight, self.bias, self.spec), x

    def backward(self, cache, grad_out):
        gx, gk, gb = ops.dilated_conv2d_backward(cache, self.weight, self.spec, grad_out)
        return gx, {"bias": gb, "weight": gk}


class ReluLayer:
    kind = "relu"

    def params(self):
        return {}

    def forward(self, x):
        return ops.relu(x), x

    def backward(self, cache, grad_out):
        return ops.relu_backward(cache, grad_out), {}


class MaxPoolLayer:
    kind = "maxpool"

    def __init__(self, spec):
        self.spec = spec

    def params(self):
        return {}

    def forward(self, x):
        y, idx = ops.maxpool2d(x, self.spec)
        return y, (idx, x.shape)

    def backward(self, cache, grad_out):
        idx, in_shape = cache
        return ops.maxpool2d_backward(idx, in_shape, grad_out), {}


class TConvLayer:
    """Learnable upsampling head: transposed conv then a fixed center crop.

    With kernel 2s and crop s/2 the output extent is exactly stride times
    the input extent.
    """

    kind = "tconv"

    def __init__(self, weight, stride, crop):
        if weight.rank != 4 or weight.shape[2] != weight.shape[3]:
            raise ShapeError(f"tconv weight must be [C_in,C_out,M,M], got {weight.shape}")
        if stride < 1 or crop < 0:
            raise ShapeError(f"bad tconv geometry: stride {stride}, crop {crop}")
        self.weight = weight
        self.stride = stride
        self.crop = crop

    def params(self):
        return {"weight": self.weight}

    def forward(self, x):
        full = ops.transposed_conv2d(x, self.weight, self.stride)
        c = self.crop
        if c == 0:
            return full, x
        h, w = full.shape[1], full.shape[2]
        if h <= 2 * c or w <= 2 * c:
            raise ShapeError(f"tconv output {h}x{w} too small for crop {c}")
        return Tensor(np.ascontiguousarray(full.data[:, c : h - c, c : w - c])), x

    def backward(self, cache, grad_out):
        c = self.crop
        g = grad_out if c == 0 else Tensor(np.pad(grad_out.data, ((0, 0), (c, c), (c, c))))
        gx, gw = ops.transposed_conv2d_backward(cache, self.weight, self.stride, g)
        return gx, {"weight": gw}


class BilinearLayer:
    """Fixed (non-learnable) bilinear upsampling by an integer factor."""

    kind = "bilinear"

    def __init__(self, factor):
        if factor < 1:
            raise ShapeError(f"bilinear factor must be >= 1, got {factor}")
        self.factor = factor

    def params(self):
        return {}

    def forward(self, x):
        return ops.bilinear_upsample(x, self.factor), x.shape

    def backward(self, cache, grad_out):
        return ops.bilinear_upsample_backward(self.factor, cache, grad_out), {}


class Network:
    """An ordered layer stack with a variant tag and dense-prediction contract.

    forward maps [B,C,H,W] (or a single [C,H,W]) with H, W divisible by 8
    to logits of the same spatial extent and num_classes channels.
    """

    def __init__(self, variant, layers, num_classes, output_stride):
        if variant not in _VARIANT_CODES:
            raise ConfigError(f"unknown variant {variant!r}")
        self.variant = variant
        self.layers = list(layers)
        self.num_classes = num_classes
        self.output_stride = output_stride
        self._check_channel_chain()

    def _check_channel_chain(self):
        convs = [l for l in self.layers if l.kind == "conv"]
        for a, b in zip(convs, convs[1:]):
            if a.spec.out_channels != b.spec.in_channels:
                raise ShapeError(
                    f"channel chain broken: {a.spec.out_channels} feeds {b.spec.in_channels}"
                )

    @property
    def in_channels(self):
        for layer in self.layers:
            if layer.kind == "conv":
                return layer.spec.in_channels
        raise ShapeError("network has no convolution layers")

    def _check_spatial(self, h, w):
        if h % 8 or w % 8:
            raise ShapeError(
                f"spatial extents {h}x{w} must be divisible by 8; "
                f"crop to {h - h % 8}x{w - w % 8} or pad to "
                f"{h + (-h) % 8}x{w + (-w) % 8}"
            )

    def forward_with_caches(self, image):
        """Single-image forward keeping every layer cache for backward."""
        if image.rank != 3:
            raise ShapeError(f"expected [C,H,W], got {image.shape}")
        if image.shape[0] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {image.shape[0]}"
            )
        self._check_spatial(image.shape[1], image.shape[2])
        caches = []
        x = image
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward_through(self, caches, grad_logits):
        """Backpropagate to every parameter; returns (grad_input, per-layer grads)."""
        grads = [None] * len(self.layers)
        g = grad_logits
        for i in range(len(self.layers) - 1, -1, -1):
            g, layer_grads = self.layers[i].backward(caches[i], g)
            grads[i] = layer_grads
        return g, grads

    def forward(self, batch):
        """Logits for a [B,C,H,W] batch (or [C,H,W] single image)."""
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=float)
        single = data.ndim == 3
        if single:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"expected [B,C,H,W], got shape {data.shape}")
        outs = []
        for item in data:
            logits, _ = self.forward_with_caches(Tensor(item))
            outs.append(logits.data)
        stacked = np.stack(outs)
        return Tensor(stacked[0] if single else stacked)

    def loss_and_gradients(self, image, labels, ignore=None):
        """Cross-entropy loss and parameter gradients for one labeled image."""
        logits, caches = self.forward_with_caches(image)
        probs = ops.softmax_pixelwise(logits)
        loss, grad_logits = ops.cross_entropy_loss(probs, labels, ignore=ignore)
        _, grads = self.backward_through(caches, grad_logits)
        return loss, grads

    def parameters(self):
        """Deterministic flat view: list of (layer_index, name, Tensor)."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params()):
                out.append((i, name, layer.params()[name]))
        return out

    def parameter_count(self):
        return sum(t.data.size for _, _, t in self.parameters())

    def receptive_span(self, prefix_len):
        """Input cells (per axis) influencing one unit after the first
        prefix_len layers; defined on the trunk before any upsampling."""
        if not 0 <= prefix_len <= len(self.layers):
            raise ShapeError(f"prefix_len {prefix_len} out of range")
        span, jump = 1, 1
        for layer in self.layers[:prefix_len]:
            if layer.kind == "conv":
                span += (layer.spec.kernel_size - 1) * layer.spec.dilation * jump
                jump *= layer.spec.stride
            elif layer.kind == "maxpool":
                span += (layer.spec.window - 1) * jump
                jump *= layer.spec.stride
            elif layer.kind == "relu":
                pass
            else:
                raise ShapeError("receptive span is defined before the upsampling head")
        return span


def _he_conv(rng, kernel_size, in_ch, out_ch, dilation=1):
    spec = ops.ConvSpec(kernel_size, in_ch, out_ch, dilation=dilation)
    fan_in = in_ch * kernel_size * kernel_size
    std = math.sqrt(2.0 / fan_in)
    weight = rng.normal(0.0, std, size=(out_ch, in_ch, kernel_size, kernel_size))
    return ConvLayer(spec, Tensor(weight), Tensor.zeros((out_ch,)))


def _bilinear_tconv(channels, stride):
    kernel = 2 * stride
    weight = np.zeros((channels, channels, kernel, kernel))
    w2 = np.outer(ops.bilinear_kernel_1d(stride), ops.bilinear_kernel_1d(stride))
    for c in range(channels):
        weight[c, c] = w2
    return TConvLayer(Tensor(weight), stride, crop=stride // 2)


def _check_build_args(num_classes, base_channels):
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if base_channels < 4:
        raise ConfigError(f"base_channels must be >= 4, got {base_channels}")


def build_standard_fcn(num_classes=8, base_channels=8, seed=0):
    """Downsampling FCN: three pool stages then a learnable x8 upsampling head."""
    _check_build_args(num_classes, base_channels)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c = base_channels
    layers = [
        _he_conv(rng, 3, 3, c), ReluLayer(), MaxPoolLayer(ops.PoolSpec(2, 2)),
        _he_conv(rng, 3, c, 2 * c), ReluLayer(), MaxPoolLayer(ops.PoolSpec(2, 2)),
        _he_conv(rng, 3, 2 * c, 4 * c), ReluLayer(), MaxPoolLayer(ops.PoolSpec(2, 2)),
        _he_conv(rng, 3, 4 * c, 4 * c), ReluLayer(),
        _he_conv(rng, 1, 4 * c, num_classes),
        _bilinear_tconv(num_classes, 8),
    ]
    return Network(VARIANT_STANDARD, layers, num_classes, output_stride=8)


def build_dilated_fcn(num_classes=8, base_channels=8, seed=0):
    """Dilation FCN: one pool stage, then r = 2 and r = 4 context layers."""
    _check_build_args(num_classes, base_channels)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c = base_channels
    layers = [
        _he_conv(rng, 3, 3, c), ReluLayer(), MaxPoolLayer(ops.PoolSpec(2, 2)),
        _he_conv(rng, 3, c, 2 * c), ReluLayer(),
        _he_conv(rng, 3, 2 * c, 4 * c, dilation=2), ReluLayer(),
        _he_conv(rng, 3, 4 * c, 4 * c, dilation=4), ReluLayer(),
        _he_conv(rng, 1, 4 * c, num_classes),
        BilinearLayer(2),
    ]
    return Network(VARIANT_DILATED, layers, num_classes, output_stride=2)


def _layer_descriptor(layer):
    if layer.kind == "conv":
        s = layer.spec
        return [s.kernel_size, s.dilation, s.stride, _PAD_CODES[s.padding],
                s.in_channels, s.out_channels]
    if layer.kind == "maxpool":
        return [layer.spec.window, layer.spec.stride]
    if layer.kind == "tconv":
        w = layer.weight.shape
        return [w[0], w[1], w[2], layer.stride, layer.crop]
    if layer.kind == "bilinear":
        return [layer.factor]
    return []


_LAYER_CODES = {"conv": 1, "relu": 2, "maxpool": 3, "tconv": 4, "bilinear": 5}
_CODE_KINDS = {v: k for k, v in _LAYER_CODES.items()}
_DESCRIPTOR_LEN = {"conv": 6, "relu": 0, "maxpool": 2, "tconv": 5, "bilinear": 1}


def save_model(net, path):
    """Serialize a network; the format round-trips bit-exactly.

    Layout: magic "DSEG", u16 version, u8 variant, u32 num_classes,
    u32 output_stride, u16 layer count, per-layer descriptors (u8 type
    code + u32 fields), then per-layer parameters in sorted name order
    (u8 rank, u32 extents, float32 values), all little-endian.
    """
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<H", _VERSION)
    buf += struct.pack("<B", _VARIANT_CODES[net.variant])
    buf += struct.pack("<II", net.num_classes, net.output_stride)
    buf += struct.pack("<H", len(net.layers))
    for layer in net.layers:
        buf += struct.pack("<B", _LAYER_CODES[layer.kind])
        for field in _layer_descriptor(layer):
            buf += struct.pack("<I", field)
    for layer in net.layers:
        for name in sorted(layer.params()):
            arr = layer.params()[name].data
            buf += struct.pack("<B", arr.ndim)
            for extent in arr.shape:
                buf += struct.pack("<I", extent)
            buf += arr.astype("<f4").tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise ModelTruncatedError(
                f"{self.path}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def _rebuild_layer(kind, fields):
    if kind == "conv":
        m, r, s, pad_code, c_in, c_out = fields
        pads = {v: k for k, v in _PAD_CODES.items()}
        if pad_code not in pads:
            raise ModelFormatError(f"unknown padding code {pad_code}")
        try:
            spec = ops.ConvSpec(m, c_in, c_out, dilation=r, stride=s, padding=pads[pad_code])
        except ShapeError as exc:
            raise ModelFormatError(f"invalid conv descriptor: {exc}") from exc
        return ConvLayer(spec, Tensor.zeros((c_out, c_in, m, m)), Tensor.zeros((c_out,)))
    if kind == "relu":
        return ReluLayer()
    if kind == "maxpool":
        try:
            return MaxPoolLayer(ops.PoolSpec(fields[0], fields[1]))
        except ShapeError as exc:
            raise ModelFormatError(f"invalid pool descriptor: {exc}") from exc
    if kind == "tconv":
        c_in, c_out, m, stride, crop = fields
        if min(c_in, c_out, m, stride) < 1 or crop < 0:
            raise ModelFormatError(f"invalid tconv descriptor {fields}")
        return TConvLayer(Tensor.zeros((c_in, c_out, m, m)), stride, crop)
    if kind == "bilinear":
        if fields[0] < 1:
            raise ModelFormatError(f"invalid bilinear factor {fields[0]}")
        return BilinearLayer(fields[0])
    raise ModelFormatError(f"unhandled layer kind {kind}")


def load_model(path):
    """Reconstruct a saved network; fails loudly on malformed files."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    if reader.take(4) != _MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a model file")
    version = reader.u16()
    if version != _VERSION:
        raise ModelVersionError(f"{path}: unsupported version {version}")
    variant_code = reader.u8()
    variants = {v: k for k, v in _VARIANT_CODES.items()}
    if variant_code not in variants:
        raise ModelFormatError(f"{path}: unknown variant code {variant_code}")
    num_classes = reader.u32()
    output_stride = reader.u32()
    n_layers = reader.u16()
    layers = []
    for _ in range(n_layers):
        code = reader.u8()
        if code not in _CODE_KINDS:
            raise ModelFormatError(f"{path}: unknown layer code {code}")
        kind = _CODE_KINDS[code]
        fields = [reader.u32() for _ in range(_DESCRIPTOR_LEN[kind])]
        layers.append(_rebuild_layer(kind, fields))
    for layer in layers:
        for name in sorted(layer.params()):
            target = layer.params()[name]
            rank = reader.u8()
            if rank != target.rank:
                raise ModelFormatError(
                    f"{path}: parameter {name} rank {rank} != descriptor rank {target.rank}"
                )
            shape = tuple(reader.u32() for _ in range(rank))
            if shape != target.shape:
                raise ModelFormatError(
                    f"{path}: parameter {name} shape {shape} != descriptor {target.shape}"
                )
            raw = reader.take(4 * int(np.prod(shape)))
            values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            target.data[...] = values
    if reader.pos != len(reader.blob):
        raise ModelFormatError(
            f"{path}: {len(reader.blob) - reader.pos} trailing bytes after parameters"
        )
    try:
        return Network(variants[variant_code], layers, num_classes, output_stride)
    except (ShapeError, ConfigError) as exc:
        raise ModelFormatError(f"{path}: inconsistent network: {exc}") from exc
