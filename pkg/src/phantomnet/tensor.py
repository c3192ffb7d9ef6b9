"""Dense NCHW tensors and the primitive ops every network block is built from.

Two convolution paths are provided: ``conv2d_naive`` is a direct
seven-nested-loop summation that serves as the correctness reference, and
``conv2d_fast`` is the production path (im2col + GEMM, with special cases
for pointwise and depthwise kernels). Everything runs in 32-bit floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Input shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """Operation attributes are invalid or mutually inconsistent."""


@dataclass(frozen=True)
class Tensor4:
    """A batch of feature maps, laid out row-major N, C, H, W.

    Values are treated as immutable after construction; ops return new
    tensors and never write through ``data``.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"expected 4 dims (n, c, h, w), got {arr.ndim}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dims must be >= 1, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor4":
        return cls(np.zeros((n, c, h, w), dtype=DTYPE))

    @classmethod
    def full(cls, n: int, c: int, h: int, w: int, value: float) -> "Tensor4":
        return cls(np.full((n, c, h, w), value, dtype=DTYPE))

    @classmethod
    def random(cls, n: int, c: int, h: int, w: int, rng: np.random.Generator) -> "Tensor4":
        return cls(rng.uniform(-1.0, 1.0, size=(n, c, h, w)).astype(DTYPE))


@dataclass(frozen=True)
class ConvAttrs:
    """Static attributes of one convolution: kernel, stride, padding, grouping."""

    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    groups: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ConfigError(f"kernel must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise ConfigError(f"groups must be >= 1, got {self.groups}")
        if self.out_channels < 1:
            raise ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.out_channels % self.groups != 0:
            raise ConfigError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )


@dataclass(frozen=True)
class ConvParams:
    """Weights plus folded normalization for one convolution.

    ``weights`` is [out_channels, in_channels/groups, kernel_h, kernel_w];
    ``scale`` and ``bias`` are per-out-channel and apply after the raw
    convolution (scale*y + bias). A folded batch norm lands in scale/bias;
    a plain conv uses scale of all ones.
    """

    attrs: ConvAttrs
    weights: np.ndarray
    scale: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        a = self.attrs
        w = np.ascontiguousarray(self.weights, dtype=DTYPE)
        if w.ndim != 4 or w.shape[0] != a.out_channels or w.shape[2:] != (a.kernel_h, a.kernel_w):
            raise ShapeError(
                f"weights shape {w.shape} does not match attrs "
                f"(out={a.out_channels}, k={a.kernel_h}x{a.kernel_w})"
            )
        s = np.ascontiguousarray(self.scale, dtype=DTYPE)
        b = np.ascontiguousarray(self.bias, dtype=DTYPE)
        if s.shape != (a.out_channels,) or b.shape != (a.out_channels,):
            raise ShapeError(
                f"scale/bias must have length out_channels={a.out_channels}, "
                f"got {s.shape} and {b.shape}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1] * self.attrs.groups


def make_conv_params(
    in_channels: int,
    out_channels: int,
    kernel: int | tuple[int, int],
    stride: int = 1,
    padding: int | None = None,
    groups: int = 1,
) -> ConvParams:
    """Zero-initialized ConvParams with scale=1, bias=0.

    ``padding=None`` picks the same-padding convention k//2 (odd kernels).
    """
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    if padding is None:
        padding = kh // 2
    if in_channels % groups != 0:
        raise ConfigError(f"in_channels {in_channels} not divisible by groups {groups}")
    attrs = ConvAttrs(kh, kw, stride, padding, groups, out_channels)
    return ConvParams(
        attrs=attrs,
        weights=np.zeros((out_channels, in_channels // groups, kh, kw), dtype=DTYPE),
        scale=np.ones(out_channels, dtype=DTYPE),
        bias=np.zeros(out_channels, dtype=DTYPE),
    )


def conv_out_hw(h: int, w: int, attrs: ConvAttrs) -> tuple[int, int]:
    """Output spatial dims: floor((in + 2*pad - k) / stride) + 1."""
    ph = h + 2 * attrs.padding
    pw = w + 2 * attrs.padding
    if ph < attrs.kernel_h or pw < attrs.kernel_w:
        raise ShapeError(
            f"padded input {ph}x{pw} smaller than kernel {attrs.kernel_h}x{attrs.kernel_w}"
        )
    return (ph - attrs.kernel_h) // attrs.stride + 1, (pw - attrs.kernel_w) // attrs.stride + 1


def _check_conv_input(x: Tensor4, p: ConvParams) -> None:
    if x.c != p.in_channels:
        raise ShapeError(
            f"input has {x.c} channels, params expect in_channels={p.in_channels}"
        )
    if x.c % p.attrs.groups != 0:
        raise ConfigError(f"in_channels {x.c} not divisible by groups {p.attrs.groups}")


def _apply_scale_bias(y: np.ndarray, p: ConvParams) -> np.ndarray:
    return y * p.scale[None, :, None, None] + p.bias[None, :, None, None]


def conv2d_naive(x: Tensor4, p: ConvParams) -> Tensor4:
    """Reference grouped convolution by direct summation.

    Loops n, out-channel, out-row, out-col, in-channel-within-group,
    kernel-row, kernel-col. Slow by design; it is the oracle the fast
    path is checked against.
    """
    _check_conv_input(x, p)
    a = p.attrs
    ho, wo = conv_out_hw(x.h, x.w, a)
    pad = a.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))).tolist()
    w = p.weights.tolist()
    cpg = p.weights.shape[1]
    opg = a.out_channels // a.groups
    out = np.empty((x.n, a.out_channels, ho, wo), dtype=np.float64)
    for n in range(x.n):
        for oc in range(a.out_channels):
            g = oc // opg
            for oh in range(ho):
                for ow in range(wo):
                    acc = 0.0
                    for ic in range(cpg):
                        plane = xp[n][g * cpg + ic]
                        kern = w[oc][ic]
                        for kh in range(a.kernel_h):
                            row = plane[oh * a.stride + kh]
                            krow = kern[kh]
                            base = ow * a.stride
                            for kw in range(a.kernel_w):
                                acc += row[base + kw] * krow[kw]
                    out[n, oc, oh, ow] = acc
    return Tensor4(_apply_scale_bias(out.astype(DTYPE), p))


def _windows(xpad: np.ndarray, ho: int, wo: int, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c = xpad.shape[:2]
    sn, sc, sh, sw = xpad.strides
    return np.lib.stride_tricks.as_strided(
        xpad,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


def conv2d_fast(x: Tensor4, p: ConvParams) -> Tensor4:
    """Optimized convolution; agrees with conv2d_naive within 1e-5 relative.

    Pointwise kernels go straight to a channel-mixing GEMM, depthwise
    kernels contract strided window views, and everything else lowers to
    one patch-matrix GEMM per group.
    """
    _check_conv_input(x, p)
    a = p.attrs
    ho, wo = conv_out_hw(x.h, x.w, a)
    w = p.weights

    if (a.kernel_h, a.kernel_w, a.stride, a.padding, a.groups) == (1, 1, 1, 0, 1):
        if x.n == 1:
            y = (w[:, :, 0, 0] @ x.data.reshape(x.c, -1)).reshape(1, a.out_channels, ho, wo)
        else:
            y = np.moveaxis(np.tensordot(w[:, :, 0, 0], x.data, axes=([1], [1])), 0, 1)
    else:
        pad = a.padding
        xpad = (
            np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        )
        win = _windows(xpad, ho, wo, a.kernel_h, a.kernel_w, a.stride)
        if a.groups == x.c and a.out_channels == x.c:
            # Depthwise: contract each channel against its own kernel.
            y = np.einsum("nchwkl,ckl->nchw", win, w[:, 0], optimize=True)
        else:
            cpg = w.shape[1]
            opg = a.out_channels // a.groups
            ksize = cpg * a.kernel_h * a.kernel_w
            m = x.n * ho * wo
            pieces = []
            for g in range(a.groups):
                # im2col laid out (patch, position): rows of the copy walk
                # the innermost image axis, so stride-1 convs copy contiguously
                cols = np.ascontiguousarray(
                    win[:, g * cpg : (g + 1) * cpg].transpose(1, 4, 5, 0, 2, 3)
                ).reshape(ksize, m)
                pieces.append(w[g * opg : (g + 1) * opg].reshape(opg, ksize) @ cols)
            y2 = np.concatenate(pieces, axis=0) if a.groups > 1 else pieces[0]
            if x.n == 1:
                y = y2.reshape(1, a.out_channels, ho, wo)
            else:
                y = y2.reshape(a.out_channels, x.n, ho, wo).transpose(1, 0, 2, 3)
    y = y.astype(DTYPE, copy=False)
    return Tensor4(_apply_scale_bias(y, p))


def depthwise_conv(x: Tensor4, p: ConvParams) -> Tensor4:
    """Per-channel spatial convolution: groups == in_channels == out_channels."""
    if p.attrs.groups != x.c or p.attrs.out_channels != x.c:
        raise ConfigError(
            f"depthwise requires groups == out_channels == in_channels ({x.c}), "
            f"got groups={p.attrs.groups}, out_channels={p.attrs.out_channels}"
        )
    return conv2d_fast(x, p)


def pointwise_conv(x: Tensor4, p: ConvParams) -> Tensor4:
    """1x1 channel-mixing convolution (stride 1, no padding, no groups)."""
    a = p.attrs
    if (a.kernel_h, a.kernel_w) != (1, 1):
        raise ConfigError(f"pointwise requires a 1x1 kernel, got {a.kernel_h}x{a.kernel_w}")
    if a.stride != 1 or a.padding != 0 or a.groups != 1:
        raise ConfigError(
            f"pointwise requires stride=1, padding=0, groups=1, got "
            f"stride={a.stride}, padding={a.padding}, groups={a.groups}"
        )
    return conv2d_fast(x, p)


def sigmoid(v: np.ndarray) -> np.ndarray:
    """Logistic function; exp overflow at very negative v saturates to 0."""
    with np.errstate(over="ignore"):
        return (1.0 / (1.0 + np.exp(-v.astype(DTYPE, copy=False)))).astype(DTYPE, copy=False)


def silu(x: Tensor4) -> Tensor4:
    """Elementwise v * sigmoid(v)."""
    return Tensor4(x.data * sigmoid(x.data))


def maxpool2d(x: Tensor4, kernel: int, stride: int, padding: int) -> Tensor4:
    """Max over each kernel window; padding is filled with -inf."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ConfigError(
            f"bad pool attrs: kernel={kernel}, stride={stride}, padding={padding}"
        )
    ph, pw = x.h + 2 * padding, x.w + 2 * padding
    if ph < kernel or pw < kernel:
        raise ConfigError(f"pool window {kernel} larger than padded input {ph}x{pw}")
    xpad = np.pad(
        x.data,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    ho = (ph - kernel) // stride + 1
    wo = (pw - kernel) // stride + 1
    win = _windows(xpad, ho, wo, kernel, kernel, stride)
    return Tensor4(win.max(axis=(4, 5)))


def upsample_nearest(x: Tensor4, factor: int) -> Tensor4:
    """Replicate each pixel factor x factor."""
    if not isinstance(factor, int) or factor < 1:
        raise ConfigError(f"upsample factor must be an integer >= 1, got {factor}")
    if factor == 1:
        return x
    return Tensor4(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))


def concat_channels(parts: list[Tensor4]) -> Tensor4:
    """Concatenate along the channel axis, preserving part order."""
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    first = parts[0]
    for i, t in enumerate(parts[1:], start=1):
        if (t.n, t.h, t.w) != (first.n, first.h, first.w):
            raise ShapeError(
                f"concat part {i} has (n,h,w)=({t.n},{t.h},{t.w}), "
                f"expected ({first.n},{first.h},{first.w})"
            )
    if len(parts) == 1:
        return first
    return Tensor4(np.concatenate([t.data for t in parts], axis=1))


def split_channels(x: Tensor4, sizes: list[int]) -> list[Tensor4]:
    """Inverse of concat_channels for the given channel sizes."""
    if sum(sizes) != x.c:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.c} channels")
    out = []
    off = 0
    for s in sizes:
        out.append(Tensor4(x.data[:, off : off + s]))
        off += s
    return out
