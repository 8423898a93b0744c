"""Layer primitives: forward passes and exact adjoints.

The central operation is the dilated 2-D convolution

    out(o, i, j) = sum_c sum_{m,n} in(c, i + r*m, j + r*n) * k(o, c, m, n) + b(o)

with tap offsets m, n running over a centered odd-sized kernel and r the
dilation factor (tap spacing). r = 1 is ordinary convolution; the plus-sign
indexing is the cross-correlation convention, adopted as-is since learned
kernels make the flip unobservable. Kernels are restricted to odd sizes so
the centered tap window is unambiguous.

Summation order per output element is fixed (input channel, kernel row,
kernel column; bias last) and identical across kernel backends, so results
are reproducible bit-for-bit for a given build.

Boundary policy is either ``zero-same`` (out-of-bounds taps read as zero,
stride-1 output keeps the input extent) or ``valid`` (no padding).
"""

from dataclasses import dataclass

import numpy as np

from dilseg import backend
from dilseg.errors import LabelError, ShapeError
from dilseg.tensor import Tensor

PAD_ZERO_SAME = "zero-same"
PAD_VALID = "valid"


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one dilated convolution layer."""

    kernel_size: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    stride: int = 1
    padding: str = PAD_ZERO_SAME

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ShapeError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in (PAD_ZERO_SAME, PAD_VALID):
            raise ShapeError(f"padding must be '{PAD_ZERO_SAME}' or '{PAD_VALID}'")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")

    @property
    def span(self):
        """Receptive span per axis: (M-1)*r + 1 input cells."""
        return (self.kernel_size - 1) * self.dilation + 1


@dataclass(frozen=True)
class PoolSpec:
    """Geometry of one max-pooling layer."""

    window: int
    stride: int

    def __post_init__(self):
        if self.window < 2:
            raise ShapeError(f"pool window must be >= 2, got {self.window}")
        if self.stride < 1:
            raise ShapeError(f"pool stride must be >= 1, got {self.stride}")


def _check_conv_args(x, kernel, bias, spec):
    if x.rank != 3:
        raise ShapeError(f"conv input must be [C,H,W], got shape {x.shape}")
    if kernel.rank != 4:
        raise ShapeError(f"conv kernel must be [C_out,C_in,M,M], got shape {kernel.shape}")
    c_out, c_in, m, n = kernel.shape
    if m != n or m != spec.kernel_size:
        raise ShapeError(
            f"kernel extents {m}x{n} do not match spec kernel_size {spec.kernel_size}"
        )
    if c_in != spec.in_channels or x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"input channels {x.shape[0]}, kernel {c_in}, spec {spec.in_channels} disagree"
        )
    if c_out != spec.out_channels:
        raise ShapeError(f"kernel output channels {c_out} != spec {spec.out_channels}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")


def _conv_geometry(h, w, spec):
    """Returns (pad, out_h, out_w) for the given input extents."""
    r, m, s = spec.dilation, spec.kernel_size, spec.stride
    if spec.padding == PAD_ZERO_SAME:
        pad = r * ((m - 1) // 2)
        out_h = (h - 1) // s + 1
        out_w = (w - 1) // s + 1
    else:
        span = (m - 1) * r + 1
        if h < span or w < span:
            raise ShapeError(
                f"valid conv needs input >= {span} per axis, got {h}x{w}"
            )
        pad = 0
        out_h = (h - span) // s + 1
        out_w = (w - span) // s + 1
    return pad, out_h, out_w


def _pad_input(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def dilated_conv2d_forward(x, kernel, bias, spec):
    """Dilated convolution of a [C,H,W] image with a [C_out,C_in,M,M] kernel."""
    _check_conv_args(x, kernel, bias, spec)
    h, w = x.shape[1], x.shape[2]
    pad, out_h, out_w = _conv_geometry(h, w, spec)
    xpad = _pad_input(x.data, pad)
    bias_arr = bias.data if bias is not None else np.zeros(spec.out_channels)
    out = backend.conv2d_forward(
        xpad, kernel.data, bias_arr, spec.dilation, spec.stride, out_h, out_w
    )
    return Tensor(out)


def dilated_conv2d_backward(x, kernel, spec, grad_out):
    """Exact adjoints of the forward pass: (grad_input, grad_kernel, grad_bias)."""
    _check_conv_args(x, kernel, None, spec)
    h, w = x.shape[1], x.shape[2]
    pad, out_h, out_w = _conv_geometry(h, w, spec)
    if grad_out.shape != (spec.out_channels, out_h, out_w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output "
            f"({spec.out_channels}, {out_h}, {out_w})"
        )
    xpad = _pad_input(x.data, pad)
    gxpad = backend.conv2d_grad_input(
        grad_out.data, kernel.data, spec.dilation, spec.stride,
        xpad.shape[1], xpad.shape[2],
    )
    if pad:
        gxpad = gxpad[:, pad : pad + h, pad : pad + w]
    gk = backend.conv2d_grad_kernel(
        grad_out.data, xpad, spec.dilation, spec.stride, spec.kernel_size
    )
    gb = grad_out.data.sum(axis=(1, 2))
    return Tensor(np.ascontiguousarray(gxpad)), Tensor(gk), Tensor(gb)


def upsample_kernel(kernel, r):
    """Zero-stuffed kernel: taps move to (r*m, r*n), zeros in between.

    Convolving with the stuffed kernel at dilation 1 equals the dilated
    convolution with the original kernel at dilation r.
    """
    if r < 1:
        raise ShapeError(f"dilation must be >= 1, got {r}")
    arr = kernel.data
    m = arr.shape[-1]
    if arr.shape[-2] != m:
        raise ShapeError(f"kernel must be square in its last two extents, got {arr.shape}")
    if r == 1:
        return Tensor(arr.copy())
    big = (m - 1) * r + 1
    out = np.zeros(arr.shape[:-2] + (big, big))
    out[..., ::r, ::r] = arr
    return Tensor(out)


def transposed_conv2d(x, kernel, stride):
    """Adjoint of strided valid convolution; upsamples [C_in,H,W] by stride.

    Kernel layout is [C_in,C_out,M,M]; the output extent is (H-1)*stride + M
    per axis (valid placement, no implicit cropping).
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if x.rank != 3 or kernel.rank != 4:
        raise ShapeError("transposed conv needs [C,H,W] input and [C_in,C_out,M,M] kernel")
    if kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be square, got {kernel.shape}")
    if x.shape[0] != kernel.shape[0]:
        raise ShapeError(
            f"input channels {x.shape[0]} != kernel input channels {kernel.shape[0]}"
        )
    return Tensor(backend.tconv2d_forward(x.data, kernel.data, stride))


def transposed_conv2d_backward(x, kernel, stride, grad_out):
    """(grad_input, grad_kernel) for the transposed convolution."""
    m = kernel.shape[2]
    h, w = x.shape[1], x.shape[2]
    expect = (kernel.shape[1], (h - 1) * stride + m, (w - 1) * stride + m)
    if grad_out.shape != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {expect}")
    gx = backend.tconv2d_grad_input(grad_out.data, kernel.data, stride, h, w)
    gk = backend.tconv2d_grad_kernel(grad_out.data, x.data, stride, m)
    return Tensor(gx), Tensor(gk)


def strided_conv2d_valid(x, kernel, stride):
    """Valid strided correlation with a [C_in,C_out,M,M] kernel, producing
    the adjoint pair of transposed_conv2d (used by its adjoint tests)."""
    m = kernel.shape[2]
    h2, w2 = x.shape[1], x.shape[2]
    h = (h2 - m) // stride + 1
    w = (w2 - m) // stride + 1
    if (h - 1) * stride + m != h2 or (w - 1) * stride + m != w2:
        raise ShapeError(
            f"input {h2}x{w2} is not a valid strided placement for kernel {m}, stride {stride}"
        )
    out = backend.tconv2d_grad_input(x.data, kernel.data, stride, h, w)
    return Tensor(out)


def bilinear_kernel_1d(factor):
    """Triangle weights of length 2*factor - factor%2 used for upsampling."""
    if factor < 1:
        raise ShapeError(f"factor must be >= 1, got {factor}")
    size = 2 * factor - factor % 2
    center = (size - 1) / 2.0
    i = np.arange(size)
    return 1.0 - np.abs(i - center) / factor


def bilinear_kernel_2d(channels, factor):
    """Per-channel (diagonal) [C,C,k,k] transposed-conv kernel of bilinear weights."""
    w1 = bilinear_kernel_1d(factor)
    k2 = np.outer(w1, w1)
    size = k2.shape[0]
    weight = np.zeros((channels, channels, size, size))
    for c in range(channels):
        weight[c, c] = k2
    return Tensor(weight)


def _bilinear_crop(factor):
    """Border trim after the padded transposed conv: pad shift + placement excess."""
    size = 2 * factor - factor % 2
    return (size - factor) // 2 + factor


def bilinear_upsample(x, factor):
    """Fixed bilinear upsampling by an integer factor (align-corners=false).

    Realized as a transposed convolution with the triangle kernel on a
    1-pixel replicate-padded input, then center-cropped to H*factor. The
    edge replication keeps the partition of unity at the borders, so
    constants are preserved everywhere.
    """
    if x.rank != 3:
        raise ShapeError(f"bilinear input must be [C,H,W], got {x.shape}")
    if factor == 1:
        return Tensor(x.data.copy())
    c, h, w = x.shape
    padded = Tensor(np.pad(x.data, ((0, 0), (1, 1), (1, 1)), mode="edge"))
    full = transposed_conv2d(padded, bilinear_kernel_2d(c, factor), factor)
    off = _bilinear_crop(factor)
    return Tensor(np.ascontiguousarray(full.data[:, off : off + h * factor, off : off + w * factor]))


def bilinear_upsample_backward(factor, in_shape, grad_out):
    """Adjoint of bilinear_upsample for a [C,H,W] input of in_shape."""
    c, h, w = in_shape
    if grad_out.shape != (c, h * factor, w * factor):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != upsampled shape {(c, h * factor, w * factor)}"
        )
    if factor == 1:
        return Tensor(grad_out.data.copy())
    size = 2 * factor - factor % 2
    full_h = (h + 1) * factor + size
    full_w = (w + 1) * factor + size
    off = _bilinear_crop(factor)
    gfull = np.zeros((c, full_h, full_w))
    gfull[:, off : off + h * factor, off : off + w * factor] = grad_out.data
    gpad = backend.tconv2d_grad_input(
        gfull, bilinear_kernel_2d(c, factor).data, factor, h + 2, w + 2
    )
    # fold the replicate-pad contributions back onto the edge cells
    gx = gpad[:, 1 : 1 + h, 1 : 1 + w].copy()
    gx[:, 0, :] += gpad[:, 0, 1 : 1 + w]
    gx[:, -1, :] += gpad[:, h + 1, 1 : 1 + w]
    gx[:, :, 0] += gpad[:, 1 : 1 + h, 0]
    gx[:, :, -1] += gpad[:, 1 : 1 + h, w + 1]
    gx[:, 0, 0] += gpad[:, 0, 0]
    gx[:, 0, -1] += gpad[:, 0, w + 1]
    gx[:, -1, 0] += gpad[:, h + 1, 0]
    gx[:, -1, -1] += gpad[:, h + 1, w + 1]
    return Tensor(gx)


def maxpool2d(x, spec):
    """Window maxima plus the flat winner index per window (ties: first in
    row-major scan order). Returns (pooled Tensor, int64 index array)."""
    if x.rank != 3:
        raise ShapeError(f"pool input must be [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if h < spec.window or w < spec.window:
        raise ShapeError(f"pool window {spec.window} larger than input {h}x{w}")
    y, idx = backend.maxpool2d_forward(x.data, spec.window, spec.stride)
    return Tensor(y), idx


def maxpool2d_backward(idx, in_shape, grad_out):
    """Route gradients to the recorded winners; overlapping windows accumulate."""
    c, h, w = in_shape
    if grad_out.shape[0] != c or grad_out.shape != idx.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {idx.shape}")
    return Tensor(backend.maxpool2d_backward(grad_out.data, idx, h, w))


def relu(x):
    """Elementwise max(x, 0)."""
    return Tensor(np.maximum(x.data, 0.0))


def relu_backward(x, grad_out):
    """Pass gradient where x > 0; the subgradient at exactly 0 is 0."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return Tensor(np.where(x.data > 0.0, grad_out.data, 0.0))


def softmax_pixelwise(logits):
    """Per-pixel softmax over the channel axis of [C,H,W] logits.

    Max-subtracted for overflow safety; each pixel's channel vector sums
    to 1 within 1e-12.
    """
    if logits.rank != 3:
        raise ShapeError(f"logits must be [C,H,W], got {logits.shape}")
    if logits.shape[0] < 2:
        raise ShapeError(f"softmax needs >= 2 classes, got {logits.shape[0]}")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    return Tensor(e / e.sum(axis=0, keepdims=True))


def cross_entropy_loss(probs, labels, ignore=None):
    """Mean negative log-likelihood over non-ignored pixels.

    ``probs`` must come from softmax_pixelwise; the returned gradient is
    with respect to the logits that produced it: (probs - onehot) / count,
    zero at ignored pixels.
    """
    c, h, w = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ShapeError(f"labels shape {labels.shape} != spatial shape {(h, w)}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(
            f"labels must lie in 0..{c - 1}, got range [{labels.min()}, {labels.max()}]"
        )
    valid = np.ones((h, w), dtype=bool) if ignore is None else labels != ignore
    count = int(valid.sum())
    if count == 0:
        raise LabelError("every pixel is ignored; loss undefined")
    p = probs.data
    rows, cols = np.nonzero(valid)
    true_p = p[labels[rows, cols], rows, cols]
    with np.errstate(divide="ignore"):
        loss = float(-np.log(true_p).sum() / count)
    grad = p.copy()
    grad[labels[rows, cols], rows, cols] -= 1.0
    grad /= count
    if ignore is not None:
        grad[:, ~valid] = 0.0
    return loss, Tensor(grad)


def predict_labels(logits):
    """Per-pixel argmax over channels; the lowest class index wins ties."""
    return logits.data.argmax(axis=0).astype(np.int64)
